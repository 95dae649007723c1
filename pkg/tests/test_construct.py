import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardmax_tf import construct as C
from hardmax_tf.encoder import Dims, EncoderParams, Layer, count_nonzero, encode_batch, forward_batch, propagate
from hardmax_tf.experiments import densify
from hardmax_tf.hcm import Composite, Leaf, SmoothFn, get_instance
from hardmax_tf.splines import TruncPowerBasis, equidistant_basis, eval_tensor_basis


def run(dims, layer_plans, Z):
    return propagate(C.plans_to_params(dims, layer_plans), Z)


def changed(before, after):
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(before != after))}


# ----------------------------------------------------------------------------
# single builders


def test_select_examples():
    dims = Dims(2, 2)
    slc = dims.slice()
    Z = encode_batch([[0.5, -0.3, 0.2, 0.1]], dims)[0]
    out = run(dims, [[C.build_select(dims, slc, 2, 1, 0.1, 2.0)]], Z)
    assert out[0, slc.aux_a] == pytest.approx(0.1, abs=1e-15)
    assert changed(Z, out) == {(0, slc.aux_a)}
    out = run(dims, [[C.build_select(dims, slc, 2, 1, 0.2, 2.0)]], Z)
    assert out[0, slc.aux_a] == 0.0
    out = run(dims, [[C.build_select(dims, slc, 2, 1, 0.1, 2.0, constant=True)]], Z)
    assert out[0, slc.aux_a] == 1.0


@settings(max_examples=40)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.integers(1, 3), st.integers(1, 2),
       st.floats(-1, 1))
def test_select_random(x, token, dim, u):
    dims = Dims(2, 3)
    slc = dims.slice()
    Z = encode_batch([x], dims)[0]
    out = run(dims, [[C.build_select(dims, slc, token, dim, u, 3.0)]], Z)
    expect = x[(token - 1) * 2 + dim - 1] - u
    assert abs(out[0, slc.aux_a] - expect) <= 1e-12
    assert changed(Z, out) <= {(0, slc.aux_a)}


def pipeline_state(dims, a, b):
    """Encoded zeros with auxA = a per token and auxB = b per token."""
    Z = encode_batch(np.zeros((1, dims.d * dims.l)), dims)[0]
    slc = dims.slice()
    Z[:, slc.aux_a] = a
    Z[:, slc.aux_b] = b
    return Z


def test_multiply_examples():
    dims = Dims(1, 2)
    slc = dims.slice()
    Z = pipeline_state(dims, [0.0, 0.4], [0.5, 1.0])
    out = run(dims, [[C.build_multiply(dims, slc, 2, 2.0)]], Z)
    assert out[0, slc.aux_c] == pytest.approx(2.2, abs=1e-15)
    assert changed(Z, out) <= {(0, slc.aux_c), (1, slc.aux_c)}
    Z = pipeline_state(dims, [0.0, 0.4], [0.0, 1.0])
    assert run(dims, [[C.build_multiply(dims, slc, 2, 2.0)]], Z)[0, slc.aux_c] == 2.0
    Z = pipeline_state(dims, [0.0, 1.0], [0.7, 1.0])
    assert run(dims, [[C.build_multiply(dims, slc, 2, 3.0)]], Z)[0, slc.aux_c] == pytest.approx(3.7, abs=1e-15)


def test_scale_shift_examples():
    dims = Dims(1, 2)
    slc = dims.slice()
    Z = pipeline_state(dims, [0.3, -0.2], [0.9, 1.0])
    Z[:, slc.aux_c] = [2.2, 7.0]
    out = run(dims, [[C.build_scale_shift_ffn(dims, slc, 1.0, 2.0)]], Z)
    assert out[0, slc.aux_b] == pytest.approx(0.2, abs=1e-15)
    assert out[0, slc.aux_a] == 0 and out[0, slc.aux_c] == 0
    assert out[1, slc.aux_c] == 0 and out[1, slc.aux_a] == 0
    keep = [c for c in range(dims.d_model) if c not in (slc.aux_a, slc.aux_b, slc.aux_c)]
    np.testing.assert_array_equal(out[:, keep], Z[:, keep])
    out = run(dims, [[C.build_scale_shift_ffn(dims, slc, 0.0, 2.0)]], Z)
    assert out[0, slc.aux_b] == 0


def test_scale_shift_needs_hidden_width():
    dims = Dims(1, 2, d_ff=7)
    with pytest.raises(C.CapacityError) as exc:
        C.build_scale_shift_ffn(dims, dims.slice(), 1.0, 2.0)
    assert exc.value.constraint == "d_ff"


@pytest.mark.parametrize("c, identity, expect", [(-1.5, False, 0.0), (0.7, False, 0.7), (-1.5, True, -1.5)])
def test_relu_step(c, identity, expect):
    dims = Dims(1, 2)
    slc = dims.slice()
    Z = pipeline_state(dims, [0.3, 0.0], [1.0, 1.0])
    Z[:, slc.aux_c] = c
    out = run(dims, [[C.build_relu_ffn(dims, slc, identity=identity)]], Z)
    assert out[0, slc.aux_a] == expect
    assert changed(Z, out) <= {(i, slc.aux_a) for i in range(2)}
    # pipeline variant: auxA starts at 0 and auxC is cleared
    Z[:, slc.aux_a] = 0
    out = run(dims, [[C.build_relu_ffn(dims, slc, identity=identity, clear_source=True)]], Z)
    assert out[0, slc.aux_a] == expect and out[0, slc.aux_c] == 0


def test_relu_needs_hidden_width():
    dims = Dims(1, 2, d_ff=3)
    C.build_relu_ffn(dims, dims.slice())
    with pytest.raises(C.CapacityError):
        C.build_relu_ffn(dims, dims.slice(), identity=True)


@pytest.mark.parametrize("vals", [(0.0, 0.0), (0.2, -0.2), (0.3, -1.1, 2.5, 0.01)])
def test_sum_layer(vals):
    h = len(vals)
    dims = Dims(1, 2, h=h, d_ff=2 * h + 2)
    slices = [dims.slice(s) for s in range(1, h + 1)]
    Z = encode_batch(np.zeros((1, 2)), dims)[0]
    for s, v in zip(slices, vals):
        Z[0, s.aux_b] = v
    out_coord = slices[-1].aux_c
    plan = C.build_sum_layer(dims, slices, out_coord)
    out = run(dims, [[plan]], Z)
    assert abs(out[0, out_coord] - sum(vals)) <= 1e-12
    assert plan.nnz() <= 2 * h + 2


# ----------------------------------------------------------------------------
# sparsity and support discipline


def test_per_matrix_nonzero_counts():
    dims = Dims(2, 3, d_ff=8)
    slc = dims.slice()
    for p in (C.build_select(dims, slc, 2, 1, 0.3, 3.0), C.build_select(dims, slc, 2, 1, 0.3, 3.0, constant=True)):
        assert max(p.nnz_by_matrix()[m] for m in "QKV") <= 3
    mul = C.build_multiply(dims, slc, 2, 3.0)
    assert max(mul.nnz_by_matrix()[m] for m in "QKV") <= 2
    ss = C.build_scale_shift_ffn(dims, slc, 0.7, 3.0).nnz_by_matrix()
    assert ss["W1"] <= 10 and ss["W2"] <= 10 and ss["b1"] == ss["b2"] == 0
    assert max(C.build_relu_ffn(dims, slc).nnz_by_matrix().values()) <= 3
    assert max(C.build_relu_ffn(dims, slc, identity=True).nnz_by_matrix().values()) <= 4


@settings(max_examples=30)
@given(st.floats(-0.9, 0.9), st.floats(2.5, 50), st.floats(-3, 3).filter(lambda a: a != 0))
def test_support_does_not_depend_on_values(u, B, alpha):
    dims = Dims(2, 3, d_ff=8)
    slc = dims.slice()
    ref = [C.build_select(dims, slc, 2, 1, 0.1, 3.0), C.build_multiply(dims, slc, 2, 3.0),
           C.build_scale_shift_ffn(dims, slc, 1.0, 3.0)]
    new = [C.build_select(dims, slc, 2, 1, u, B), C.build_multiply(dims, slc, 2, B),
           C.build_scale_shift_ffn(dims, slc, alpha, B)]
    for a, b in zip(ref, new):
        assert a.support() == b.support()
        assert b.nonzero_support() <= b.support()


# ----------------------------------------------------------------------------
# tensor-product basis functions


def tensor_run(dims, plans, X):
    params = C.plans_to_params(dims, [[p] for p in plans])
    return propagate(params, encode_batch(X, dims))


def test_tensor_constant_and_identity():
    dims = Dims(1, 2, d_ff=8)
    slc = dims.slice()
    b = TruncPowerBasis(1, (0.0,), -1, 1)
    X = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
    out = tensor_run(dims, C.build_tensor_basis(dims, slc, b, (0,), 0.75), X)
    np.testing.assert_allclose(out[:, 0, slc.aux_b], 0.75, atol=1e-12)
    plans = C.build_tensor_basis(dims, slc, b, (1,), 1.0)
    assert len(plans) == 2
    out = tensor_run(dims, plans, X)
    np.testing.assert_allclose(out[:, 0, slc.aux_b], [eval_tensor_basis(b, (1,), x[:1]) for x in X], atol=1e-12)


def test_tensor_truncated_example():
    dims = Dims(2, 2, d_ff=8)
    slc = dims.slice()
    b = TruncPowerBasis(1, (0.0,), -1, 1)
    plans = C.build_tensor_basis(dims, slc, b, (2, 1), 1.0)
    assert len(plans) == 2 * 1 * 2
    out = tensor_run(dims, plans, np.array([[0.5, 0.4, 0.0, 0.0]]))
    assert abs(out[0, 0, slc.aux_b] - 0.2) <= 1e-12


@pytest.mark.parametrize("M, K", [(1, 1), (2, 1), (2, 2), (3, 2)])
def test_tensor_matches_oracle(M, K):
    dims = Dims(K, 3, d_ff=8)
    slc = dims.slice()
    b = equidistant_basis(M, M + 4, -1, 1)
    rng = np.random.default_rng(M * 10 + K)
    X = rng.uniform(-1, 1, size=(1000, 3 * K))
    for _ in range(3):
        idx = tuple(int(v) for v in rng.integers(0, b.size, size=K))
        alpha = float(rng.normal())
        plans = C.build_tensor_basis(dims, slc, b, idx, alpha)
        assert len(plans) == 2 * M * K
        out = tensor_run(dims, plans, X)
        expect = alpha * eval_tensor_basis(b, idx, X[:, :K])
        dev = np.abs(out[:, 0, slc.aux_b] - expect) / np.maximum(1, np.abs(expect))
        assert dev.max() <= 1e-9
        # only the working slots of this slice move
        Z0 = encode_batch(X, dims)
        keep = [c for c in range(dims.d_model) if c not in (slc.aux_a, slc.aux_b, slc.aux_c)]
        np.testing.assert_array_equal(out[:, :, keep], Z0[:, :, keep])


def test_bad_schedule_rejected():
    dims = Dims(1, 2, d_ff=8)
    b = TruncPowerBasis(1, (0.0,), -1, 1)
    with pytest.raises(ValueError):
        C.build_tensor_basis(dims, dims.slice(), b, (1,), 1.0, schedule=C.BSchedule((3.0,), ()))
    with pytest.raises(ValueError):
        C.build_tensor_basis(dims, dims.slice(), b, (1,), 1.0, schedule=C.BSchedule((-1.0,), (3.0,)))


def test_small_margin_breaks_pipeline():
    dims = Dims(1, 3, d_ff=8)
    b = TruncPowerBasis(1, (0.0,), -1, 1)
    X = np.random.default_rng(0).uniform(-1, 1, size=(200, 3))
    plans = C.build_tensor_basis(dims, dims.slice(), b, (1,), 1.0, b_scale=0.1)
    out = tensor_run(dims, plans, X)
    assert np.abs(out[:, 0, dims.slice().aux_b] - X[:, 0]).max() > 1e-3


@pytest.mark.parametrize("h", [1, 2, 4])
def test_parallel_heads(h):
    dims = Dims(2, 2, h=h, d_ff=C.default_d_ff(h))
    b = equidistant_basis(1, 4, -1, 1)
    rng = np.random.default_rng(h)
    X = rng.uniform(-1, 1, size=(1000, 4))
    if h == 2:
        specs = [(b, (2, 1), 0.5)] * 2
    else:
        specs = [(b, tuple(int(v) for v in rng.integers(0, 4, size=2)), float(rng.normal())) for _ in range(h)]
    steps = C.build_parallel_heads(dims, specs)
    out = propagate(C.plans_to_params(dims, steps), encode_batch(X, dims))
    for s, (_, idx, a) in enumerate(specs, start=1):
        expect = a * eval_tensor_basis(b, idx, X[:, :2])
        assert np.abs(out[:, 0, dims.slice(s).aux_b] - expect).max() <= 1e-9
    if h == 2:
        np.testing.assert_array_equal(out[:, 0, dims.slice(1).aux_b], out[:, 0, dims.slice(2).aux_b])
    if h == 1:
        single = C.build_tensor_basis(dims, dims.slice(), b, specs[0][1], specs[0][2])
        assert [p.support() for p in single] == [s[0].support() for s in steps]
    with pytest.raises(ValueError):
        C.build_parallel_heads(dims, specs + specs)


def summed_heads(h=4, d=2, l=3, M=1, seed=0):
    dims = Dims(d, l, h, 1, 2, C.default_d_ff(h))
    b = equidistant_basis(M, M + 2, -1, 1)
    rng = np.random.default_rng(seed)
    specs = [(b, tuple(int(v) for v in rng.integers(0, b.size, size=d)), float(rng.normal())) for _ in range(h)]
    return C.summed_heads_network(dims, specs), specs, b


def test_summed_network_output_and_sparsity():
    params, specs, b = summed_heads()
    X = np.random.default_rng(1).uniform(-1, 1, size=(500, 6))
    expect = sum(a * eval_tensor_basis(b, idx, X[:, :2]) for _, idx, a in specs)
    assert np.abs(forward_batch(params, X) - expect).max() <= 1e-9
    assert count_nonzero(params) <= 144 * 1 * 2 * 4
    assert params.layers[-1].nnz() <= 2 * 4 + 2


# ----------------------------------------------------------------------------
# compiling composition models


@pytest.mark.parametrize("name, h", [("smooth1d", 16), ("additive2", 9), ("smooth2d", 16), ("composition2", 9)])
def test_compile_matches_composed_splines(name, h):
    inst = get_instance(name)
    comp = C.compile_hcm(inst.node, inst.d, inst.l, h, A=inst.A)
    X = np.random.default_rng(2).uniform(-1, 1, size=(1000, inst.ambient_dim))
    got = forward_batch(comp.params, X)
    expect = comp.approximant(X)
    assert (np.abs(got - expect) / np.maximum(1, np.abs(expect))).max() <= 1e-9
    assert count_nonzero(comp.params) <= comp.L_n
    q_max, K_max = 1, max(n.g.arity for n in [b.node for b in comp.blocks])
    I = comp.params.dims.I
    assert comp.L_n == 144 * (q_max + 1) * K_max * I * h
    assert count_nonzero(comp.params) <= 144 * 1 * K_max * h * I
    assert comp.params.N == I * (2 * 1 * K_max + 1)


def test_compile_hand_composed_level_two():
    inst = get_instance("composition2")
    comp = C.compile_hcm(inst.node, inst.d, inst.l, 9)
    X = np.random.default_rng(4).uniform(-1, 1, size=(300, 4))
    inner = [b for b in comp.blocks if b.level == 1]
    u = inner[0].fit(X[:, [0, 1]])
    v = inner[1].fit(X[:, [2, 3]])
    np.testing.assert_allclose(forward_batch(comp.params, X), comp.root.fit(np.stack([u, v], axis=1)),
                               rtol=1e-9, atol=1e-9)


def test_compile_identity_model():
    inst = get_instance("identity")
    comp = C.compile_hcm(inst.node, 1, 1, 16)
    X = np.linspace(-1, 1, 1001)[:, None]
    assert np.abs(forward_batch(comp.params, X) - X[:, 0]).max() <= 1e-2
    assert count_nonzero(comp.params) <= comp.L_n


def test_compile_leaf_argument_in_later_token():
    g = SmoothFn(lambda a: a * a, 1, 2.0, 2.0, interval=lambda box: (0.0, max(box[0] ** 2, box[1] ** 2)))
    node = Composite(g, (Leaf(5),))
    comp = C.compile_hcm(node, 2, 3, 16)
    X = np.random.default_rng(0).uniform(-1, 1, size=(200, 6))
    np.testing.assert_allclose(forward_batch(comp.params, X), comp.approximant(X), atol=1e-9)


def test_compile_capacity_errors():
    inst = get_instance("composition2")
    for kw, name in [({"I": 2}, "I"), ({"d_ff": 20}, "d_ff"), ({"d_k": 1}, "d_k")]:
        with pytest.raises(C.CapacityError) as exc:
            C.compile_hcm(inst.node, 2, 2, 9, **kw)
        assert exc.value.constraint == name
    with pytest.raises(C.CapacityError) as exc:
        C.compile_hcm(get_instance("smooth1d").node, 1, 1, 1)
    assert exc.value.constraint == "h"
    with pytest.raises(C.CapacityError):
        C.compile_hcm(Leaf(1), 1, 1, 4)


def test_compile_metadata_and_extra_copies():
    inst = get_instance("smooth1d")
    comp = C.compile_hcm(inst.node, 1, 1, 16, I=2)
    assert comp.params.N == 2 * 3
    assert comp.params.metadata["output_coord"] == comp.root.out_coord
    assert all(layer.nnz() == 0 for layer in comp.params.layers[3:])
    X = np.linspace(-1, 1, 101)[:, None]
    np.testing.assert_allclose(forward_batch(comp.params, X), comp.approximant(X), atol=1e-9)


def test_root_coefficients_swap():
    inst = get_instance("smooth2d")
    comp = C.compile_hcm(inst.node, 2, 1, 9)
    X = np.random.default_rng(5).uniform(-1, 1, size=(100, 2))
    alpha = np.random.default_rng(6).normal(size=comp.root.fit.coefficients.size)
    p = comp.with_root_coefficients(alpha)
    ref = C.CompiledHCM(p, comp.blocks, comp.A, comp.A_bar, comp.layers_per_block, comp.L_n)
    fit = comp.root.fit
    expect = fit.design(X) @ alpha
    np.testing.assert_allclose(forward_batch(ref.params, X), expect, atol=1e-9)
    with pytest.raises(ValueError):
        comp.with_root_coefficients(alpha[:-1])


# ----------------------------------------------------------------------------
# audits


def test_audit_summed_network():
    params, _, _ = summed_heads()
    rep = C.audit_params(params, M=1, d=2, h=4, l=3, d_k=2, d_ff=10)
    assert rep["nonzero_bound"] == 1152 and rep["nonzero_pass"]
    assert rep["total_bound"] == 3_760_000 and rep["total_pass"]
    assert not C.audit_params(densify(params), M=1, d=2, h=4, l=3, d_k=2, d_ff=10)["pass"]


def test_audit_all_zero():
    dims = Dims(2, 3, h=4, d_ff=10)
    params = EncoderParams(dims, [Layer.identity(dims)] * 3, np.zeros(dims.d_model * dims.l))
    rep = C.audit_params(params, 1, 2, 4, 3, 2, 10)
    assert rep["nonzero"] == 0 and rep["pass"]
