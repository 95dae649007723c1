"""Experiment drivers behind the command-line interface.

Every driver takes an :class:`ExperimentConfig` and returns a JSON-ready
report; rate experiments also return :class:`RateResult` objects that are
written as CSV.  Floats in CSV files are written with ``repr`` so that
repeated runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import construct as C
from .encoder import (
    Dims,
    EncoderParams,
    FeedForward,
    Layer,
    count_nonzero,
    encode_batch,
    forward_batch,
    propagate,
    truncate,
)
from .estimator import AposterioriModel, Dataset, fit_coefficients, sample_data, scaffold_features
from .hcm import blocks, get_instance
from .splines import eval_tensor_basis, equidistant_basis, tensor_grid

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RateResult",
    "ols_slope",
    "rel_dev",
    "run_construct_verify",
    "run_approx_rate",
    "run_class_rate",
    "run_audit",
    "class_rate_h",
    "KINDS",
]

KINDS = ("construct-verify", "approx-rate", "class-rate", "audit")
REL_TOL = 1e-9


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    hcm: str = "smooth1d"
    hcm_params: dict = field(default_factory=dict)
    h_grid: list[int] = field(default_factory=lambda: [16, 64, 256])
    n_grid: list[int] = field(default_factory=lambda: [2**e for e in range(7, 14)])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    n_mc: int = 1 << 15
    n_inputs: int = 1000
    grid_points: int = 0  # dense test grid per relevant coordinate; 0 picks a default
    beta: float = 1.0
    compare_hcm: str | None = None  # class-rate: same model in a larger ambient space
    compare_params: dict = field(default_factory=dict)
    b_scale: float = 1.0  # construct-verify: multiplies every margin B (values < 1 sabotage)
    network: dict = field(default_factory=dict)  # audit: summed parallel-head network description
    densify: bool = False  # audit: fill one weight matrix to force a failure
    target_slope: float | None = None
    # class-rate pass criteria
    slope_bounds: list[float] | None = field(default_factory=lambda: [-0.55, -0.15])
    max_inversions: int = 1
    min_decrease: float | None = None  # required ratio first / last median excess risk
    max_slope_difference: float = 0.15
    seed: int = 0
    out: str = "results"

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        grids = {"approx-rate": ("h_grid",), "class-rate": ("n_grid", "seeds")}.get(self.kind, ())
        for name in grids:
            g = getattr(self, name)
            if not g:
                raise ConfigError(f"{name} is empty")
        for name in ("h_grid", "n_grid"):
            g = getattr(self, name)
            if any(b <= a for a, b in zip(g, g[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {g}")
            if any(int(v) != v or v < 1 for v in g):
                raise ConfigError(f"{name} must hold positive integers, got {g}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if self.kind == "construct-verify" and self.n_inputs < 1:
            raise ConfigError("n_inputs must be >= 1")
        if self.kind in ("approx-rate", "class-rate") and len(self.h_grid if self.kind == "approx-rate" else self.n_grid) < 3:
            raise ConfigError("rate experiments need at least 3 grid points")
        if self.n_mc < 2:
            raise ConfigError("n_mc must be >= 2")
        if self.b_scale <= 0:
            raise ConfigError("b_scale must be positive")
        if self.slope_bounds is not None and (len(self.slope_bounds) != 2 or self.slope_bounds[0] > self.slope_bounds[1]):
            raise ConfigError(f"slope_bounds must be [low, high], got {self.slope_bounds}")
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "kind" not in doc:
            raise ConfigError("config needs a 'kind'")
        try:
            return cls(**doc).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def ols_slope(x, y) -> tuple[float, float]:
    """OLS slope of log y on log x with its 95% t-interval half-width."""
    lx, ly = np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64))
    n = lx.size
    if n < 3:
        raise ValueError("need at least 3 points")
    xc = lx - lx.mean()
    slope = float(xc @ (ly - ly.mean()) / (xc @ xc))
    resid = ly - ly.mean() - slope * xc
    se = math.sqrt(float(resid @ resid) / (n - 2) / float(xc @ xc))
    return slope, float(stats.t.ppf(0.975, n - 2) * se)


@dataclass
class RateResult:
    x_name: str
    y_name: str
    x: list[float]
    y: list[float]
    stderr: list[float]
    target: float
    slope: float = float("nan")
    halfwidth: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) < 3:
            raise ValueError("a rate result needs at least 3 grid points")
        self.slope, self.halfwidth = ols_slope(self.x, self.y)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.x_name, self.y_name, "stderr"])
        for a, b, s in zip(self.x, self.y, self.stderr):
            w.writerow([repr(a), repr(float(b)), repr(float(s))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    def summary(self) -> dict:
        return {"x": self.x_name, "y": self.y_name, "points": len(self.x), "slope": self.slope,
                "halfwidth": self.halfwidth, "target": self.target, **self.extra}


def rel_dev(got, expected) -> float:
    """max |got - expected| / max(1, |expected|)."""
    got, expected = np.asarray(got, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - expected) / np.maximum(1.0, np.abs(expected))))


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Map in order; a process pool when jobs > 1 (results keep grid order)."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# construct-verify


def _random_aux(Z: np.ndarray, slc, rng, scale: float = 1.0) -> np.ndarray:
    Z = Z.copy()
    n, l, _ = Z.shape
    for c in (slc.aux_a, slc.aux_b, slc.aux_c):
        Z[:, :, c] = rng.uniform(-scale, scale, size=(n, l))
    return Z


def _untouched(before: np.ndarray, after: np.ndarray, mask: np.ndarray) -> float:
    """Largest change over the coordinates the builder must leave alone."""
    return float(np.max(np.abs(after - before)[mask])) if mask.any() else 0.0


def _verify_builders(n: int, seed: int, b_scale: float) -> list[dict]:
    rng = np.random.default_rng(seed)
    out: list[dict] = []
    A = 1.0

    def record(name, got, exp, inter, margin_needed, margin_used):
        out.append({"builder": name, "max_rel_dev": rel_dev(got, exp), "max_noninterference": inter,
                    "margin_needed": margin_needed, "margin_used": margin_used,
                    "precondition_ok": bool(margin_used > margin_needed)})

    dims = Dims(2, 3, 1, 1, 2, 10)
    s = dims.slice()
    X = rng.uniform(-A, A, size=(n, dims.d * dims.l))
    Z0 = encode_batch(X, dims)
    xmax = float(np.abs(X).max())

    # select: per-row token/coordinate/knot, grouped so that each group is one network
    B = (2 * A + 1) * b_scale
    got, exp, inter = [], [], 0.0
    for j in range(1, dims.l + 1):
        for k in range(1, dims.d + 1):
            rows = np.arange(n)[(np.arange(n) % (dims.l * dims.d)) == (j - 1) * dims.d + (k - 1)]
            u = float(rng.uniform(-0.5, 0.5))
            p = C.plans_to_params(dims, [[C.build_select(dims, s, j, k, u, B)]])
            Zi = Z0[rows]
            Zo = propagate(p, Zi)
            got.append(Zo[:, 0, s.aux_a])
            exp.append(Zi[:, j - 1, s.data(k)] - u)
            mask = np.ones(Zo.shape[1:], bool)
            mask[0, s.aux_a] = False
            inter = max(inter, _untouched(Zi, Zo, np.broadcast_to(mask, Zo.shape)))
    record("select", np.concatenate(got), np.concatenate(exp), inter, 2 * xmax, B)

    p = C.plans_to_params(dims, [[C.build_select(dims, s, 2, 1, 0.0, B, constant=True)]])
    Zo = propagate(p, Z0)
    mask = np.ones(Zo.shape[1:], bool)
    mask[0, s.aux_a] = False
    record("constant", Zo[:, 0, s.aux_a], np.ones(n), _untouched(Z0, Zo, np.broadcast_to(mask, Zo.shape)),
           0.0, B)

    # multiply: random a in auxA and b in auxB on every token
    Zr = _random_aux(Z0, s, rng)
    ab = np.abs(Zr[:, :, s.aux_a]).max() * np.abs(Zr[:, :, s.aux_b]).max()
    Bm = (2 * 1.0 + 1) * b_scale
    got, exp, inter = [], [], 0.0
    for j in range(1, dims.l + 1):
        rows = np.arange(n)[np.arange(n) % dims.l == j - 1]
        p = C.plans_to_params(dims, [[C.build_multiply(dims, s, j, Bm)]])
        Zi = Zr[rows]
        Zo = propagate(p, Zi)
        got.append(Zo[:, 0, s.aux_c])
        exp.append(Zi[:, 0, s.aux_b] * Zi[:, j - 1, s.aux_a] + Bm + Zi[:, 0, s.aux_c])
        mask = np.ones(Zo.shape[1:], bool)
        mask[:, s.aux_c] = False  # other tokens' auxC may be polluted
        inter = max(inter, _untouched(Zi, Zo, np.broadcast_to(mask, Zo.shape)))
    record("multiply", np.concatenate(got), np.concatenate(exp), inter, 2 * ab, Bm)

    # scale-shift on every token
    alpha, Bs = float(rng.normal()), 2.0
    p = C.plans_to_params(dims, [[C.build_scale_shift_ffn(dims, s, alpha, Bs)]])
    Zo = propagate(p, Zr)
    got = np.stack([Zo[:, :, s.aux_b], Zo[:, :, s.aux_a], Zo[:, :, s.aux_c]])
    exp = np.stack([alpha * (Zr[:, :, s.aux_c] - Bs), np.zeros_like(Zr[:, :, 0]), np.zeros_like(Zr[:, :, 0])])
    mask = np.ones(Zo.shape[1:], bool)
    mask[:, [s.aux_a, s.aux_b, s.aux_c]] = False
    record("scale-shift", got, exp, _untouched(Zr, Zo, np.broadcast_to(mask, Zo.shape)), 0.0, Bs)

    for identity in (False, True):
        p = C.plans_to_params(dims, [[C.build_relu_ffn(dims, s, identity=identity)]])
        Zo = propagate(p, Zr)
        src = Zr[:, :, s.aux_c]
        mask = np.ones(Zo.shape[1:], bool)
        mask[:, s.aux_a] = False
        record("copy" if identity else "relu", Zo[:, :, s.aux_a], src if identity else np.maximum(src, 0),
               _untouched(Zr, Zo, np.broadcast_to(mask, Zo.shape)), 0.0, 1.0)

    # tensor basis, one head
    M = 2
    basis = equidistant_basis(M, 5, -A, A)
    got, exp, inter, mneed, mused = [], [], 0.0, 0.0, np.inf
    groups = np.array_split(np.arange(n), 10)
    for rows in groups:
        idx = tuple(int(v) for v in rng.integers(0, basis.size, size=2))
        alpha = float(rng.normal())
        plans = C.build_tensor_basis(dims, s, basis, idx, alpha, data_bound=A, b_scale=b_scale)
        p = C.plans_to_params(dims, [[q] for q in plans])
        Zi = Z0[rows]
        Zo = propagate(p, Zi)
        got.append(Zo[:, 0, s.aux_b])
        exp.append(alpha * eval_tensor_basis(basis, idx, X[rows][:, :2]))
        mask = np.zeros(Zo.shape[1:], bool)
        mask[:, : s.const + 1 + dims.l] = True
        inter = max(inter, _untouched(Zi, Zo, np.broadcast_to(mask, Zo.shape)))
        mneed = max(mneed, 2 * xmax)
        mused = min(mused, (2 * A + 1) * b_scale)
    record("tensor-basis", np.concatenate(got), np.concatenate(exp), inter, mneed, mused)

    # parallel heads and the summing layer
    d4 = Dims(2, 3, 4, 1, 2, C.default_d_ff(4))
    Z4 = encode_batch(X, d4)
    got5, exp5, gotb, expb, inter = [], [], [], [], 0.0
    for rows in groups:
        specs = [(basis, tuple(int(v) for v in rng.integers(0, basis.size, size=2)), float(rng.normal()))
                 for _ in range(4)]
        layer_plans = C.build_parallel_heads(d4, specs, data_bound=A, b_scale=b_scale)
        p = C.plans_to_params(d4, layer_plans)
        Zi = Z4[rows]
        Zo = propagate(p, Zi)
        for q, (b, i, a) in enumerate(specs):
            got5.append(Zo[:, 0, d4.slice(q + 1).aux_b])
            exp5.append(a * eval_tensor_basis(b, i, X[rows][:, :2]))
        slices = [d4.slice(q) for q in range(1, 5)]
        ps = C.plans_to_params(d4, [[C.build_sum_layer(d4, slices, slices[-1].aux_c)]])
        Zs = propagate(ps, Zo)
        gotb.append(Zs[:, 0, slices[-1].aux_c])
        expb.append(sum(a * eval_tensor_basis(b, i, X[rows][:, :2]) for b, i, a in specs))
    record("parallel-heads", np.concatenate(got5), np.concatenate(exp5), 0.0, 2 * xmax, (2 * A + 1) * b_scale)
    record("sum", np.concatenate(gotb), np.concatenate(expb), 0.0, 2 * xmax, (2 * A + 1) * b_scale)
    return out


def _verify_compile(n: int, seed: int) -> list[dict]:
    """Compiled HCMs against the composed spline approximants evaluated in numpy."""
    rng = np.random.default_rng(seed + 1)
    rows = []
    for name, h in (("smooth1d", 16), ("additive2", 9), ("composition2", 9)):
        inst = get_instance(name)
        comp = C.compile_hcm(inst.node, inst.d, inst.l, h, inst.A)
        X = rng.uniform(-inst.A, inst.A, size=(n, inst.ambient_dim))
        rows.append({"builder": f"compile[{name}]", "max_rel_dev": rel_dev(forward_batch(comp.params, X),
                                                                           comp.approximant(X)),
                     "max_noninterference": 0.0, "margin_needed": 0.0, "margin_used": 1.0, "precondition_ok": True})
    return rows


def run_construct_verify(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    rows = _verify_builders(cfg.n_inputs, cfg.seed, cfg.b_scale)
    if cfg.b_scale == 1.0:
        rows += _verify_compile(cfg.n_inputs, cfg.seed)
    for r in rows:
        r["pass"] = bool(r["max_rel_dev"] <= REL_TOL and r["max_noninterference"] == 0.0)
    violated = [r["builder"] for r in rows if not r["precondition_ok"]]
    ok = all(r["pass"] for r in rows)
    status = "pass" if ok else ("precondition-violated" if violated else "fail")
    return {"kind": "construct-verify", "status": status, "pass": ok, "violations": violated,
            "tolerance": REL_TOL, "n_inputs": cfg.n_inputs, "builders": rows,
            "seconds": time.perf_counter() - t0}


# ----------------------------------------------------------------------------
# approximation rate


def _leaf_indices(node) -> list[int]:
    out: set[int] = set()
    for _, _, nd in blocks(node):
        out.update(c.index for c in nd.children if not hasattr(c, "g"))
    return sorted(out)


def _approx_point(args) -> tuple[int, float, dict]:
    name, params, h, grid_points = args
    inst = get_instance(name, **params)
    comp = C.compile_hcm(inst.node, inst.d, inst.l, h, inst.A)
    leaves = _leaf_indices(inst.node)
    G = tensor_grid(-inst.A, inst.A, grid_points, len(leaves))
    X = np.zeros((G.shape[0], inst.ambient_dim))
    X[:, np.array(leaves) - 1] = G
    err = float(np.max(np.abs(forward_batch(comp.params, X) - inst(X))))
    info = {"h": h, "N": comp.params.N, "nonzero": count_nonzero(comp.params), "L_n": comp.L_n,
            "test_points": int(G.shape[0])}
    return h, err, info


def run_approx_rate(cfg: ExperimentConfig, jobs: int = 1) -> tuple[dict, RateResult]:
    inst = get_instance(cfg.hcm, **cfg.hcm_params)
    pk = sorted(inst.constraints)
    K = max(k for _, k in pk)
    p = min(pp for pp, _ in pk)
    gp = cfg.grid_points or (2001 if K == 1 else 101)
    pts = _pmap(_approx_point, [(cfg.hcm, cfg.hcm_params, h, gp) for h in cfg.h_grid], jobs)
    target = cfg.target_slope if cfg.target_slope is not None else -p / K
    res = RateResult("h", "sup_error", [float(h) for h, _, _ in pts], [e for _, e, _ in pts],
                     [0.0] * len(pts), target, extra={"points_info": [i for _, _, i in pts]})
    report = {"kind": "approx-rate", "hcm": cfg.hcm, **res.summary(),
              "within_25pct": bool(abs(res.slope - target) <= 0.25 * abs(target)) if target else None}
    return report, res


# ----------------------------------------------------------------------------
# classification rate


def class_rate_h(n: int, constraints) -> int:
    """h = ceil(max n^{K/(2p+K)}), rounded down to a perfect K-th power."""
    K = max(k for _, k in constraints)
    h = math.ceil(max(n ** (k / (2 * p + k)) for p, k in constraints) - 1e-12)
    t = C._int_root(h, K)
    return max(t, 2) ** K


def _leaf_order(node) -> list[int]:
    order: list[int] = []
    for _, _, nd in blocks(node):
        order += [c.index for c in nd.children if not hasattr(c, "g") and c.index not in order]
    return order


def _embed(X_base: np.ndarray, base, target, seed) -> np.ndarray:
    """Place the base model's relevant coordinates into the target's; fresh values elsewhere."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    X = rng.uniform(-target.A, target.A, size=(X_base.shape[0], target.ambient_dim))
    X[:, np.array(_leaf_order(target.node)) - 1] = X_base[:, np.array(_leaf_order(base.node)) - 1]
    return X


def _class_samples(cfg: ExperimentConfig, inst, base=None, crn: bool = True):
    """Training samples per seed and the Monte-Carlo set.

    With ``base`` and ``crn`` the relevant coordinates and labels are those of
    the base model's draws (common random numbers); otherwise draws are
    independent of any other run.
    """
    n_max = max(cfg.n_grid)
    src = base if (base is not None and crn) else inst
    tag = 0 if src is inst and base is None else (1 if crn else 2)
    full = [sample_data(AposterioriModel(src), n_max, 1_000_003 * (cfg.seed + 1) + s + (tag == 2) * 7919)
            for s in cfg.seeds]
    X_mc = AposterioriModel(src).sample_x(cfg.n_mc, np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 77, int(tag == 2)])))
    if src is not inst:
        full = [Dataset(_embed(D.X, src, inst, [cfg.seed, 99, k]), D.y) for k, D in enumerate(full)]
        X_mc = _embed(X_mc, src, inst, [cfg.seed, 98])
    return full, X_mc


def _class_curve(name: str, params: dict, cfg: ExperimentConfig, base: tuple | None = None,
                 crn: bool = True) -> tuple[RateResult, dict]:
    inst = get_instance(name, **params)
    model = AposterioriModel(inst)
    base_inst = get_instance(base[0], **base[1]) if base else None
    # nested samples: the data for n are the first n draws of one sample per seed
    full, X_mc = _class_samples(cfg, inst, base_inst, crn)
    m_mc = model.m(X_mc)
    bayes = m_mc > 0.5
    weight = np.abs(2 * m_mc - 1)
    hs = {n: class_rate_h(n, inst.constraints) for n in cfg.n_grid}
    medians, ses, per_n = [], [], []
    max_dev = 0.0
    cache: dict[int, tuple] = {}
    check = np.random.default_rng(cfg.seed).choice(cfg.n_mc, size=min(64, cfg.n_mc), replace=False)
    for n in cfg.n_grid:
        h = hs[n]
        if h not in cache:
            scaffold = C.compile_hcm(inst.node, inst.d, inst.l, h, inst.A)
            cache = {h: (scaffold, [scaffold_features(scaffold, D.X) for D in full],
                         scaffold_features(scaffold, X_mc))}
        scaffold, feats, Phi_mc = cache[h]
        risks, sds = [], []
        for D, Phi in zip(full, feats):
            coef, _ = fit_coefficients(Phi[:n], D.y[:n].astype(np.float64))
            reg = truncate(Phi_mc @ coef, cfg.beta)
            vals = weight * ((reg >= 0.5) != bayes)
            risks.append(float(vals.mean()))
            sds.append(float(vals.std(ddof=1) / math.sqrt(cfg.n_mc)))
            # the feature shortcut must agree with the actual network
            net = scaffold.with_root_coefficients(coef)
            max_dev = max(max_dev, rel_dev(forward_batch(net, X_mc[check]), Phi_mc[check] @ coef))
            if count_nonzero(net) > scaffold.L_n:
                raise RuntimeError(f"fitted network exceeds its sparsity budget L_n={scaffold.L_n}")
        med = float(np.median(risks))
        medians.append(med)
        ses.append(float(np.median(sds)))
        per_n.append({"n": n, "h": h, "risks": risks, "median": med})
    if max_dev > REL_TOL:
        raise RuntimeError(f"network output deviates from its feature expansion by {max_dev:.3e}")
    pk = sorted(inst.constraints)
    target = cfg.target_slope if cfg.target_slope is not None else -max(p / (2 * p + k) for p, k in pk)
    inversions = int(sum(b > a for a, b in zip(medians, medians[1:])))
    res = RateResult("n", "excess_risk", [float(n) for n in cfg.n_grid], medians, ses, target,
                     extra={"inversions": inversions, "ambient_dim": inst.ambient_dim,
                            "max_network_feature_dev": max_dev,
                            "sampling": "common" if (base and crn) else "independent"})
    return res, {"hcm": name, "per_n": per_n}


def run_class_rate(cfg: ExperimentConfig, jobs: int = 1) -> tuple[dict, dict[str, RateResult]]:
    """Excess-risk curve of the main model; with ``compare_hcm`` also the same model in a
    larger ambient space, once with common random numbers (checked) and once with
    independent draws (diagnostic)."""
    t0 = time.perf_counter()
    base = (cfg.hcm, cfg.hcm_params)
    runs = [(cfg.hcm, base, None, True)]
    if cfg.compare_hcm:
        cmp = (cfg.compare_hcm, cfg.compare_params)
        runs += [(cfg.compare_hcm, cmp, base, True), (cfg.compare_hcm + "_independent", cmp, base, False)]
    curves = _pmap(_ClassJob(cfg), runs, jobs)
    results = {label: res for (label, *_), (res, _) in zip(runs, curves)}
    report = {"kind": "class-rate", "curves": {label: {**res.summary(), "details": det}
                                               for (label, *_), (res, det) in zip(runs, curves)}}
    main = results[cfg.hcm]
    report["slope"] = main.slope
    report["inversions"] = main.extra["inversions"]
    if cfg.compare_hcm:
        report["slope_difference"] = abs(main.slope - results[cfg.compare_hcm].slope)
        report["slope_difference_independent"] = abs(main.slope - results[cfg.compare_hcm + "_independent"].slope)
    checks = {"inversions": report["inversions"] <= cfg.max_inversions}
    if cfg.slope_bounds is not None:
        checks["slope"] = cfg.slope_bounds[0] <= main.slope <= cfg.slope_bounds[1]
    if cfg.min_decrease is not None:
        report["decrease"] = main.y[0] / main.y[-1] if main.y[-1] > 0 else math.inf
        checks["decrease"] = report["decrease"] >= cfg.min_decrease
    if cfg.compare_hcm:
        checks["slope_difference"] = report["slope_difference"] <= cfg.max_slope_difference
    report["checks"] = checks
    report["pass"] = all(checks.values())
    report["seconds"] = time.perf_counter() - t0
    return report, results


@dataclass
class _ClassJob:
    cfg: ExperimentConfig

    def __call__(self, run):
        _, (name, params), base, crn = run
        return _class_curve(name, params, self.cfg, base, crn)


# ----------------------------------------------------------------------------
# audit


def _audit_network(net: dict, seed: int) -> tuple[EncoderParams, dict, int]:
    d, l, h = net.get("d", 2), net.get("l", 3), net.get("h", 4)
    M, d_k = net.get("M", 1), net.get("d_k", 2)
    d_ff = net.get("d_ff", C.default_d_ff(h))
    # the parallel scale-shift step needs 8 hidden units per head
    d_ff_net = max(d_ff, C.default_d_ff(h))
    t = net.get("basis_size", M + 2)
    dims = Dims(d, l, h, 1, d_k, d_ff_net)
    rng = np.random.default_rng(seed)
    basis = equidistant_basis(M, t, -1.0, 1.0)
    specs = [(basis, tuple(int(v) for v in rng.integers(0, basis.size, size=d)), float(rng.normal()))
             for _ in range(h)]
    params = C.summed_heads_network(dims, specs, data_bound=1.0)
    return params, {"M": M, "d": d, "h": h, "l": l, "d_k": d_k, "d_ff": d_ff}, d_ff_net


def densify(params: EncoderParams) -> EncoderParams:
    """Copy of ``params`` with the first layer's W_1 filled with ones."""
    layers = list(params.layers)
    first = layers[0]
    ffn = FeedForward(np.ones(first.ffn.W_1.shape), first.ffn.b_1, first.ffn.W_2, first.ffn.b_2)
    layers[0] = Layer(first.heads, ffn, first.tag + "+dense")
    return EncoderParams(params.dims, layers, params.out_w, params.out_b, params.metadata)


def run_audit(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    params, shape, d_ff_net = _audit_network(cfg.network, cfg.seed)
    if cfg.densify:
        params = densify(params)
    rep = C.audit_params(params, **shape)
    actual = C.audit_params(params, **{**shape, "d_ff": d_ff_net})
    ok = rep["pass"] and actual["pass"]
    return {"kind": "audit", "network": shape, "d_ff_network": d_ff_net, "densified": cfg.densify, **rep,
            "total_bound_network_d_ff": actual["total_bound"], "pass": ok}
