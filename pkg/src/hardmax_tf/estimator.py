"""Data generation, restricted least-squares fitting and plug-in classification.

The estimator keeps every weight of a compiled scaffold fixed except the
linear coefficients of the root block's heads.  The network output is linear
in those coefficients, so least squares over them is an ordinary linear
regression on the per-head features read off the network before its summing
layer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .construct import CompiledHCM
from .encoder import EncoderParams, count_nonzero, forward_batch, probe_batch, truncate
from .hcm import HCMInstance

__all__ = [
    "AposterioriModel",
    "Dataset",
    "sample_data",
    "FittedClassifier",
    "BayesClassifier",
    "scaffold_features",
    "fit_coefficients",
    "fit_restricted_ls",
    "classify",
    "bayes_classify",
    "excess_risk_mc",
    "excess_risk_naive",
    "RIDGE",
]

RIDGE = 1e-10


@dataclass(frozen=True)
class AposterioriModel:
    """m(x) = P(Y = 1 | X = x), an HCM clamped to [0, 1]."""

    instance: HCMInstance

    @property
    def A(self) -> float:
        return self.instance.A

    @property
    def dim(self) -> int:
        return self.instance.ambient_dim

    def m(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.clip(self.instance(X), 0.0, 1.0)

    def sample_x(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.A, self.A, size=(n, self.dim))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(1, self.X.shape[1] + 1)] + ["y"])
            for row, label in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        rows = list(csv.reader(Path(path).read_text().splitlines()))[1:]
        arr = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), -1)
        return cls(arr[:, :-1], arr[:, -1].astype(int))


def sample_data(model: AposterioriModel, n: int, seed: int) -> Dataset:
    """X uniform on [-A, A]^{d*l}, Y ~ Bernoulli(m(X)); separate streams for X and Y."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sx, sy = np.random.SeedSequence(seed).spawn(2)
    X = model.sample_x(n, np.random.default_rng(sx))
    y = (np.random.default_rng(sy).random(n) < model.m(X)).astype(int)
    return Dataset(X, y)


def scaffold_features(scaffold: CompiledHCM, X) -> np.ndarray:
    """Per-head root basis values at token 1 (network run with unit coefficients)."""
    unit = scaffold.with_root_coefficients(np.ones_like(scaffold.root.fit.coefficients))
    layer, coords = scaffold.root_feature_probe()
    return probe_batch(unit, X, layer, 1, coords)


@dataclass
class FittedClassifier:
    params: EncoderParams
    beta: float
    L_n: int
    coefficients: np.ndarray
    ridge: float = 0.0
    residual: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        nnz = count_nonzero(self.params)
        if nnz > self.L_n:
            raise ValueError(f"fitted network has {nnz} nonzero parameters, budget L_n = {self.L_n}")

    def regression(self, X) -> np.ndarray:
        return truncate(forward_batch(self.params, np.atleast_2d(X)), self.beta)

    def predict(self, X) -> np.ndarray:
        return (self.regression(X) >= 0.5).astype(int)


@dataclass(frozen=True)
class BayesClassifier:
    model: AposterioriModel

    def predict(self, X) -> np.ndarray:
        return (self.model.m(X) > 0.5).astype(int)


def fit_coefficients(Phi: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares coefficients on a feature matrix and the ridge used (0 when full rank)."""
    norms = np.linalg.norm(Phi, axis=0)
    norms[norms == 0] = 1.0
    S = Phi / norms
    G = S.T @ S
    rhs = S.T @ y
    n_coef = Phi.shape[1]
    rank = np.linalg.matrix_rank(S) if Phi.shape[0] else 0
    if Phi.shape[0] >= n_coef and rank == n_coef and np.linalg.cond(G) < 1e12:
        c, *_ = scipy.linalg.lstsq(S, y, lapack_driver="gelsd")
        return c / norms, 0.0
    # rank deficient: ridge on the column-scaled problem picks the minimum-norm tie-break
    c = scipy.linalg.solve(G + RIDGE * np.eye(n_coef), rhs, assume_a="pos")
    return c / norms, RIDGE


def fit_restricted_ls(data: Dataset, scaffold: CompiledHCM, beta: float = 1.0,
                      features: np.ndarray | None = None) -> FittedClassifier:
    """Minimise (1/n) sum (Y_i - f(X_i))^2 over the root head coefficients of ``scaffold``."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    Phi = scaffold_features(scaffold, data.X) if features is None else features
    y = np.asarray(data.y, dtype=np.float64)
    coef, ridge = fit_coefficients(Phi, y)
    grad = Phi.T @ (Phi @ coef - y) + ridge * (np.linalg.norm(Phi, axis=0) ** 2) * coef
    scale = max(np.linalg.norm(Phi, axis=0).max(), 1.0) * max(np.linalg.norm(y), 1.0)
    residual = float(np.abs(grad).max() / scale)
    params = scaffold.with_root_coefficients(coef)
    params.metadata["fitted"] = {"n": len(data), "ridge": ridge}
    return FittedClassifier(params, beta, scaffold.L_n, coef, ridge, residual,
                            {"n_features": Phi.shape[1], "n": len(data)})


def classify(clf: FittedClassifier, x) -> int:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(clf.predict(x)[0])


def bayes_classify(model: AposterioriModel, x) -> int:
    return int(model.m(np.asarray(x, dtype=np.float64).reshape(1, -1))[0] > 0.5)


def _predict(clf, X) -> np.ndarray:
    if hasattr(clf, "predict"):
        return np.asarray(clf.predict(X)).astype(int)
    return np.asarray(clf(X)).astype(int)


def excess_risk_mc(clf, model: AposterioriModel, n_mc: int, seed: int, chunk: int = 1 << 14) -> tuple[float, float]:
    """Mean and standard error of |2 m(X) - 1| * 1{clf(X) != bayes(X)} over uniform X."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    vals = np.empty(n_mc)
    for start in range(0, n_mc, chunk):
        X = model.sample_x(min(chunk, n_mc - start), rng)
        m = model.m(X)
        vals[start : start + len(X)] = np.abs(2 * m - 1) * (_predict(clf, X) != (m > 0.5))
    se = float(vals.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return float(vals.mean()), se


def excess_risk_naive(clf, model: AposterioriModel, n_mc: int, seed: int) -> tuple[float, float]:
    """Label-sampling estimate of P(clf(X) != Y) - P(bayes(X) != Y)."""
    sx, sy = np.random.SeedSequence(seed).spawn(2)
    X = model.sample_x(n_mc, np.random.default_rng(sx))
    m = model.m(X)
    y = np.random.default_rng(sy).random(n_mc) < m
    diff = (_predict(clf, X) != y).astype(float) - ((m > 0.5) != y).astype(float)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_mc))
