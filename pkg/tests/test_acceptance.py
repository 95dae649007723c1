"""Acceptance checks, one per primary criterion; each prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py``; the lines are written
through pytest's terminal reporter, so output capture does not hide them.
Running the file as a script also works: ``python3 tests/test_acceptance.py``.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hardmax_tf import construct as C
from hardmax_tf.cli import EXIT_OK, main
from hardmax_tf.encoder import Dims, count_nonzero, total_parameters
from hardmax_tf.estimator import (
    AposterioriModel,
    BayesClassifier,
    Dataset,
    excess_risk_mc,
    excess_risk_naive,
    fit_restricted_ls,
    scaffold_features,
)
from hardmax_tf.experiments import ExperimentConfig, run_approx_rate, run_construct_verify
from hardmax_tf.hcm import get_instance
from hardmax_tf.splines import equidistant_basis

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


_terminal = None


@pytest.fixture(autouse=True)
def _grab_terminal(request):
    global _terminal
    _terminal = request.config.pluginmanager.get_plugin("terminalreporter")


def report(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    if _terminal is not None:
        _terminal.write_line("")
        _terminal.write_line(line)
    else:
        print(line)
    assert ok, line


def load(name):
    return ExperimentConfig.load(CONFIGS / name)


@pytest.fixture(scope="module")
def class_rate_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("class_rate")
    t0 = time.perf_counter()
    rc = main(["class-rate", "--config", str(CONFIGS / "class_rate.json"), "--out", str(out)])
    seconds = time.perf_counter() - t0
    rep = json.loads((out / "class_rate_classification2.json").read_text())
    return rc, rep, seconds, out


def test_exactness():
    t0 = time.perf_counter()
    rep = run_construct_verify(load("construct_verify.json"))
    seconds = time.perf_counter() - t0
    rows = rep["builders"]
    worst = max(r["max_rel_dev"] for r in rows)
    untouched = max(r["max_noninterference"] for r in rows)
    ok = (rep["n_inputs"] == 1000 and all(r["pass"] for r in rows) and worst <= 1e-9 and untouched == 0
          and seconds < 30)
    report("exactness", ok, f"{len(rows)} checks on 1000 inputs, max rel dev {worst:.2e}, "
                            f"non-targeted change {untouched:.1e}, {seconds:.1f}s (< 30s)")


def summed_networks():
    """Parallel-head networks followed by the summing layer over a range of shapes."""
    rng = np.random.default_rng(0)
    for M in (1, 2, 3):
        for d in (1, 2, 3):
            for h in (1, 2, 4, 8):
                l = int(rng.integers(max(d, 1), 5))
                dims = Dims(d, l, h, 1, 2, C.default_d_ff(h))
                b = equidistant_basis(M, M + 3, -1, 1)
                specs = [(b, tuple(int(v) for v in rng.integers(0, b.size, size=d)), float(rng.normal()))
                         for _ in range(h)]
                yield (M, d, h, l, dims), C.summed_heads_network(dims, specs)


def test_sparsity_bounds():
    failures, n_sum = [], 0
    worst_nnz, worst_total = 0.0, 0.0
    for (M, d, h, l, dims), params in summed_networks():
        n_sum += 1
        nnz, total = count_nonzero(params), total_parameters(params)
        nb, tb = 144 * M * d * h, 235 * M * max(l, d, dims.d_k, dims.d_ff) ** 3 * h**2
        worst_nnz, worst_total = max(worst_nnz, nnz / nb), max(worst_total, total / tb)
        if nnz > nb or total > tb:
            failures.append((M, d, h, nnz, nb, total, tb))
    n_thm = 0
    for name, hs in [("smooth1d", (4, 16, 64, 256)), ("smooth2d", (4, 9, 16, 64)), ("additive2", (9, 16)),
                     ("composition2", (4, 9, 16)), ("classification2", (4, 9, 16)), ("highdim", (4, 9, 16))]:
        inst = get_instance(name)
        for h in hs:
            comp = C.compile_hcm(inst.node, inst.d, inst.l, h, inst.A)
            n_thm += 1
            q_max = max(b.node.g.q for b in comp.blocks)
            K_max = max(b.node.g.arity for b in comp.blocks)
            I = comp.params.dims.I
            M = max(q_max, 1)
            nnz = count_nonzero(comp.params)
            L_n = 144 * (q_max + 1) * K_max * I * h
            if comp.L_n != L_n or nnz > L_n or nnz > 144 * M * K_max * h * I:
                failures.append((name, h, nnz, L_n))
            worst_nnz = max(worst_nnz, nnz / L_n)
    report("sparsity", not failures,
           f"{n_sum} summed networks and {n_thm} compiled models, largest nonzero/bound {worst_nnz:.3f}, "
           f"largest total/bound {worst_total:.2e}, violations {failures}")


def test_approximation_rate():
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, target in (("approx_rate_1d.json", -2.0), ("approx_rate_2d.json", -1.0)):
        cfg = load(name)
        assert cfg.h_grid == [16, 64, 256]
        rep, res = run_approx_rate(cfg)
        inside = abs(res.slope - target) <= 0.25 * abs(target)
        ok &= inside
        lines.append(f"{cfg.hcm} slope {res.slope:.3f} vs {target:g}")
    seconds = time.perf_counter() - t0
    ok &= seconds < 300
    report("approximation rate", ok, f"{'; '.join(lines)} (within 25%), {seconds:.1f}s (< 300s)")


def test_classification_rate(class_rate_run):
    rc, rep, seconds, _ = class_rate_run
    cur = rep["curves"]["classification2"]
    medians = [p["median"] for p in cur["details"]["per_n"]]
    slope, inv = rep["slope"], rep["inversions"]
    ok = -0.55 <= slope <= -0.15 and inv <= 1 and len(medians) == 7 and seconds < 900
    report("classification rate", ok,
           f"median excess risk {', '.join(f'{m:.4g}' for m in medians)}; slope {slope:.3f} in [-0.55, -0.15], "
           f"{inv} inversion(s), {seconds:.0f}s (< 900s)")


def test_dimension_robustness(class_rate_run):
    rc, rep, _, _ = class_rate_run
    curves = rep["curves"]
    diff = rep["slope_difference"]
    ok = curves["highdim"]["ambient_dim"] == 20 and curves["classification2"]["ambient_dim"] == 4 and diff <= 0.15
    report("dimension robustness", ok,
           f"slope 4-dim {curves['classification2']['slope']:.3f}, 20-dim {curves['highdim']['slope']:.3f}, "
           f"difference {diff:.3f} <= 0.15 (independent-draw diagnostic "
           f"{rep['slope_difference_independent']:.3f}); cli exit {rc}")


def test_estimator_correctness():
    inst = get_instance("smooth2d")
    scaffold = C.compile_hcm(inst.node, inst.d, inst.l, 16)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(1000, 2))
    Phi = scaffold_features(scaffold, X)
    true = rng.normal(size=Phi.shape[1])
    clf = fit_restricted_ls(Dataset(X, Phi @ true), scaffold)
    coef_err = float(np.abs(clf.coefficients - true).max())

    model = AposterioriModel(get_instance("classification2"))
    bayes, _ = excess_risk_mc(BayesClassifier(model), model, 100_000, 1)

    # a deliberately crude rule on a model with strong margins, so the excess risk is sizeable
    model = AposterioriModel(get_instance("realizable2"))

    def rule(Z):
        return (Z[:, 1] > 0).astype(int)

    rb, se_rb = excess_risk_mc(rule, model, 100_000, 2)
    nv, se_nv = excess_risk_naive(rule, model, 100_000, 3)
    gap, band = abs(rb - nv), 3 * float(np.hypot(se_rb, se_nv))
    ok = coef_err <= 1e-6 and bayes == 0.0 and gap <= band
    report("estimator correctness", ok,
           f"coefficient error {coef_err:.1e} (<= 1e-6), Bayes excess risk {bayes!r}, "
           f"Rao-Blackwell {rb:.5f} vs label sampling {nv:.5f}, gap {gap:.5f} <= {band:.5f}")


def test_determinism(class_rate_run, tmp_path):
    _, _, _, first = class_rate_run
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        for name in ("approx_rate_1d.json", "approx_rate_2d.json", "approx_rate_constant.json"):
            assert main(["approx-rate", "--config", str(CONFIGS / name), "--out", str(out)]) == EXIT_OK
        runs.append(out)
    assert main(["class-rate", "--config", str(CONFIGS / "class_rate.json"), "--out", str(runs[1])]) == EXIT_OK
    names = sorted(p.name for p in runs[0].glob("*.csv"))
    same = all((runs[0] / n).read_bytes() == (runs[1] / n).read_bytes() for n in names)
    cls = sorted(p.name for p in first.glob("*.csv"))
    same_cls = all((first / n).read_bytes() == (runs[1] / n).read_bytes() for n in cls)
    report("determinism", same and same_cls and len(names) == 3 and len(cls) == 3,
           f"{len(names) + len(cls)} CSV files byte-identical across repeated runs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
