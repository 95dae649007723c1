"""Compile spline and HCM descriptions into explicit encoder weights.

Each builder returns a :class:`LayerPairPlan`: a list of (matrix, row, col,
value) entries for the attention part of one head and/or the feedforward part
of a layer.  Entry positions depend only on the slice and the addressed
coordinates, never on the values ``u``, ``B`` or ``alpha``, so the support of
every emitted matrix is fixed in advance.

Slot names follow :class:`~hardmax_tf.encoder.SliceAddress`:
``auxA`` (d+l+2), ``auxB`` (d+l+3), ``auxC`` (d+l+4).

Pipeline for one factor of a tensor-product basis function (two layer pairs):

1. select/read into ``auxC``, then ReLU (or identity) from ``auxC`` to ``auxA``
   while clearing ``auxC``;
2. multiply: ``auxC <- auxB * auxA + B`` on token 1, then scale-shift:
   ``auxB <- alpha * (auxC - B)``, ``auxA, auxC <- 0`` on every token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .encoder import (
    AttentionHead,
    Dims,
    EncoderParams,
    FeedForward,
    Layer,
    SliceAddress,
    count_nonzero,
    total_parameters,
)
from .hcm import Composite, HCMNode, Leaf, blocks, range_bound
from .splines import SplineFit, TruncPowerBasis, equidistant_basis, fit_spline_ls

__all__ = [
    "CapacityError",
    "LayerPairPlan",
    "FactorSpec",
    "build_select",
    "build_read",
    "build_multiply",
    "build_scale_shift_ffn",
    "build_relu_ffn",
    "merge",
    "assemble_layer",
    "plans_to_params",
    "factor_specs",
    "b_schedule",
    "build_tensor_basis",
    "build_parallel_heads",
    "build_sum_layer",
    "summed_heads_network",
    "CompiledHCM",
    "compile_hcm",
    "audit_params",
    "remark6_total_bound",
    "remark6_nnz_bound",
    "compiled_nnz_bound",
    "default_d_ff",
]


class CapacityError(ValueError):
    """The requested architecture cannot host the construction."""

    def __init__(self, constraint: str, msg: str):
        super().__init__(f"{constraint}: {msg}")
        self.constraint = constraint


SLOTS = ("auxA", "auxB", "auxC")


def _slot(slc: SliceAddress, name: str) -> int:
    return {"auxA": slc.aux_a, "auxB": slc.aux_b, "auxC": slc.aux_c}[name]


@dataclass
class LayerPairPlan:
    """Sparse entries of one layer pair, restricted to one head's attention.

    ``attn`` entries are ``(matrix, row, col, value)`` with matrix in
    ``{"Q", "K", "V"}``; V rows are global ``d_model`` coordinates.
    ``ffn`` entries use ``"W1"`` (unit, col), ``"b1"`` (unit, -1),
    ``"W2"`` (row, unit), ``"b2"`` (row, -1) with local hidden-unit numbers.
    """

    tag: str
    head: int | None = None
    attn: list[tuple[str, int, int, float]] = field(default_factory=list)
    ffn: list[tuple[str, int, int, float]] = field(default_factory=list)
    n_units: int = 0

    def support(self) -> frozenset[tuple[str, int, int]]:
        return frozenset((m, r, c) for m, r, c, _ in self.attn + self.ffn)

    def nonzero_support(self) -> frozenset[tuple[str, int, int]]:
        return frozenset((m, r, c) for m, r, c, v in self.attn + self.ffn if v != 0)

    def nnz_by_matrix(self) -> dict[str, int]:
        out = {m: 0 for m in ("Q", "K", "V", "W1", "b1", "W2", "b2")}
        for m, _, _, v in self.attn + self.ffn:
            out[m] += int(v != 0)
        return out

    def nnz(self) -> int:
        return sum(self.nnz_by_matrix().values())


def merge(*plans: LayerPairPlan) -> LayerPairPlan:
    """Combine an attention-only plan and an ffn-only plan (same head) into one pair."""
    heads = {p.head for p in plans if p.attn}
    if len(heads) > 1:
        raise ValueError(f"cannot merge attention parts of different heads {heads}")
    out = LayerPairPlan("+".join(p.tag for p in plans), heads.pop() if heads else None)
    for p in plans:
        out.attn += p.attn
        out.ffn += [(m, r + out.n_units if m in ("W1", "b1") else r,
                     c + out.n_units if m == "W2" else c, v) for m, r, c, v in p.ffn]
        out.n_units += p.n_units
    return out


# ----------------------------------------------------------------------------
# single-slice builders


def build_select(dims: Dims, slc: SliceAddress, token: int, dim: int, u: float, B: float,
                 target: str = "auxA", constant: bool = False) -> LayerPairPlan:
    """Attention writing ``x_token^(dim) - u`` (or 1 when ``constant``) into token 1's target slot.

    Query of token i is (pos1_i, B pos1_i); key of token t is
    (x_t^(dim) - u - B, pos_token_t).  Requires B > 2 max |x|.
    """
    slc.pos(token)
    tgt = _slot(slc, target)
    attn = [("Q", 0, slc.pos(1), 1.0), ("Q", 1, slc.pos(1), float(B))]
    if constant:
        attn += [("K", 0, slc.const, 1.0 - B)]
    else:
        attn += [("K", 0, slc.data(dim), 1.0), ("K", 0, slc.const, -float(u) - B)]
    attn += [("K", 1, slc.pos(token), 1.0), ("V", tgt, slc.const, 1.0)]
    return LayerPairPlan("constant" if constant else "select", slc.head, attn=attn)


def build_read(dims: Dims, slc: SliceAddress, coord: int, u: float = 0.0, target: str = "auxC") -> LayerPairPlan:
    """Attention copying token 1's coordinate ``coord`` minus ``u`` into the target slot.

    Token 1 attends to itself with score exactly 1 and the value carries the
    coordinate, so the result does not depend on the other tokens' contents.
    """
    if not 0 <= coord < dims.d_model:
        raise CapacityError("coordinate", f"{coord} outside 0..{dims.d_model - 1}")
    tgt = _slot(slc, target)
    attn = [("Q", 0, slc.pos(1), 1.0), ("K", 0, slc.pos(1), 1.0),
            ("V", tgt, coord, 1.0), ("V", tgt, slc.const, -float(u))]
    return LayerPairPlan("read", slc.head, attn=attn)


def build_multiply(dims: Dims, slc: SliceAddress, j: int, B: float) -> LayerPairPlan:
    """Attention adding ``auxB_1 * auxA_j + B`` to token 1's auxC.

    Requires B > 2 max_{r,s} |auxA_r auxB_s|.
    """
    attn = [("Q", 0, slc.aux_b, 1.0), ("Q", 1, slc.pos(1), float(B)),
            ("K", 0, slc.aux_a, 1.0), ("K", 1, slc.pos(j), 1.0),
            ("V", slc.aux_c, slc.const, 1.0)]
    return LayerPairPlan("multiply", slc.head, attn=attn)


def build_scale_shift_ffn(dims: Dims, slc: SliceAddress, alpha: float, B: float) -> LayerPairPlan:
    """auxB <- alpha * (auxC - B), auxA <- 0, auxC <- 0 on every token (8 hidden units)."""
    if dims.d_ff < 8:
        raise CapacityError("d_ff", f"scale-shift needs d_ff >= 8, got {dims.d_ff}")
    a, b, c, one = slc.aux_a, slc.aux_b, slc.aux_c, slc.const
    alpha, B = float(alpha), float(B)
    ffn = [
        ("W1", 0, a, 1.0), ("W1", 1, a, -1.0),
        ("W1", 2, b, 1.0), ("W1", 3, b, -1.0),
        ("W1", 4, one, -B), ("W1", 4, c, 1.0),
        ("W1", 5, one, B), ("W1", 5, c, -1.0),
        ("W1", 6, c, 1.0), ("W1", 7, c, -1.0),
        ("W2", a, 0, -1.0), ("W2", a, 1, 1.0),
        ("W2", b, 2, -1.0), ("W2", b, 3, 1.0), ("W2", b, 4, alpha), ("W2", b, 5, -alpha),
        ("W2", c, 6, -1.0), ("W2", c, 7, 1.0),
    ]
    return LayerPairPlan("scale-shift", None, ffn=ffn, n_units=8)


def build_relu_ffn(dims: Dims, slc: SliceAddress, identity: bool = False, clear_source: bool = False) -> LayerPairPlan:
    """auxA <- max(auxC, 0), or auxA <- auxC when ``identity``.

    With ``clear_source`` auxC is also zeroed; that variant assumes auxA is 0
    on entry, which holds inside the tensor-basis pipeline.
    """
    a, c = slc.aux_a, slc.aux_c
    if clear_source:
        need = 2
        ffn = [("W1", 0, c, 1.0), ("W1", 1, c, -1.0), ("W2", a, 0, 1.0),
               ("W2", c, 0, -1.0), ("W2", c, 1, 1.0)]
        if identity:
            ffn.append(("W2", a, 1, -1.0))
    else:
        need = 4 if identity else 3
        ffn = [("W1", 0, a, 1.0), ("W1", 1, a, -1.0), ("W1", 2, c, 1.0),
               ("W2", a, 0, -1.0), ("W2", a, 1, 1.0), ("W2", a, 2, 1.0)]
        if identity:
            ffn += [("W1", 3, c, -1.0), ("W2", a, 3, -1.0)]
    if dims.d_ff < need:
        raise CapacityError("d_ff", f"relu step needs d_ff >= {need}, got {dims.d_ff}")
    return LayerPairPlan("copy" if identity else "relu", None, ffn=ffn, n_units=need)


def build_sum_layer(dims: Dims, slices: Sequence[SliceAddress], out_coord: int) -> LayerPairPlan:
    """Feedforward writing sum_s auxB_s into ``out_coord`` (assumed 0 on entry); attention is zero."""
    if dims.d_ff < 2:
        raise CapacityError("d_ff", "sum layer needs d_ff >= 2")
    ffn = [("W1", 0, s.aux_b, 1.0) for s in slices] + [("W1", 1, s.aux_b, -1.0) for s in slices]
    ffn += [("W2", out_coord, 0, 1.0), ("W2", out_coord, 1, -1.0)]
    return LayerPairPlan("sum", None, ffn=ffn, n_units=2)


# ----------------------------------------------------------------------------
# assembly


def assemble_layer(dims: Dims, plans: Iterable[LayerPairPlan], tag: str = "") -> Layer:
    """Materialise plans (at most one attention part per head) into one encoder layer."""
    plans = list(plans)
    q = [dict() for _ in range(dims.h)]
    k = [dict() for _ in range(dims.h)]
    v = [dict() for _ in range(dims.h)]
    used_heads: set[int] = set()
    w1, b1, w2, b2 = {}, {}, {}, {}
    offset = 0
    for p in plans:
        if p.attn:
            if p.head in used_heads:
                raise CapacityError("heads", f"head {p.head} assigned twice in one layer")
            used_heads.add(p.head)
            s = p.head - 1
            for m, r, c, val in p.attn:
                if m == "V":
                    lr = r - s * dims.d_v
                    if not 0 <= lr < dims.d_v:
                        raise CapacityError("value-block", f"head {p.head} cannot write coordinate {r}")
                    v[s][(lr, c)] = v[s].get((lr, c), 0.0) + val
                else:
                    if r >= dims.d_k:
                        raise CapacityError("d_k", f"query/key row {r} needs d_k >= {r + 1}")
                    (q if m == "Q" else k)[s][(r, c)] = val
        for m, r, c, val in p.ffn:
            if m == "W1":
                w1[(r + offset, c)] = val
            elif m == "b1":
                b1[r + offset] = val
            elif m == "W2":
                w2[(r, c + offset)] = w2.get((r, c + offset), 0.0) + val
            else:
                b2[r] = b2.get(r, 0.0) + val
        offset += p.n_units
    if offset > dims.d_ff:
        raise CapacityError("d_ff", f"layer needs {offset} hidden units, d_ff={dims.d_ff}")

    def mat(entries, shape):
        if not entries:
            return sparse.csr_array(shape)
        rc = np.array(list(entries.keys()), dtype=int)
        return sparse.csr_array((np.array(list(entries.values())), (rc[:, 0], rc[:, 1])), shape=shape)

    heads = [
        AttentionHead(mat(q[s], (dims.d_k, dims.d_model)), mat(k[s], (dims.d_k, dims.d_model)),
                      mat(v[s], (dims.d_v, dims.d_model)))
        for s in range(dims.h)
    ]
    vb1 = np.zeros(dims.d_ff)
    for i, val in b1.items():
        vb1[i] = val
    vb2 = np.zeros(dims.d_model)
    for i, val in b2.items():
        vb2[i] = val
    ffn = FeedForward(mat(w1, (dims.d_ff, dims.d_model)), vb1, mat(w2, (dims.d_model, dims.d_ff)), vb2)
    return Layer(heads, ffn, tag or "+".join(dict.fromkeys(p.tag for p in plans)))


def plans_to_params(dims: Dims, layer_plans: Sequence[Sequence[LayerPairPlan]], out_w=None,
                    out_b: float = 0.0, metadata: dict | None = None) -> EncoderParams:
    layers = [assemble_layer(dims, ps) if ps else Layer.identity(dims) for ps in layer_plans]
    if out_w is None:
        out_w = np.zeros(dims.d_model * dims.l)
    return EncoderParams(dims, layers, out_w, out_b, metadata or {})


def readout_vector(dims: Dims, coord: int, token: int = 1) -> np.ndarray:
    w = np.zeros(dims.d_model * dims.l)
    w[(token - 1) * dims.d_model + coord] = 1.0
    return w


# ----------------------------------------------------------------------------
# tensor-product basis functions


@dataclass(frozen=True)
class FactorSpec:
    """One univariate factor: ``const`` (1), ``identity`` (arg) or ``trunc`` ((arg - u)_+).

    ``source`` is ``("data", token, dim)`` for an input coordinate or
    ``("coord", index)`` for a coordinate of token 1 computed by earlier layers.
    ``bound`` bounds |arg| on the intended domain.
    """

    kind: str
    source: tuple
    u: float = 0.0
    bound: float = 1.0

    @property
    def magnitude(self) -> float:
        if self.kind == "const":
            return 1.0
        if self.kind == "identity":
            return self.bound
        return max(self.bound - self.u, 0.0)

    def value(self, arg):
        if self.kind == "const":
            return np.ones_like(np.asarray(arg, dtype=np.float64))
        if self.kind == "identity":
            return np.asarray(arg, dtype=np.float64)
        return np.maximum(np.asarray(arg, dtype=np.float64) - self.u, 0.0)


def factor_specs(bases: Sequence[TruncPowerBasis], idx: Sequence[int], sources: Sequence[tuple],
                 bounds: Sequence[float]) -> list[FactorSpec]:
    """Write prod_k B_{idx_k}(arg_k) as M factors per argument.

    x^j becomes j identity factors followed by M-j constants; a truncated
    power (x-u)_+^M becomes M truncated factors.
    """
    out = []
    for basis, j, src, bd in zip(bases, idx, sources, bounds):
        M = basis.degree
        kind, val = basis.kind(int(j))
        if kind == "monomial":
            jj = int(val)
            out += [FactorSpec("identity", src, 0.0, bd)] * jj + [FactorSpec("const", src, 0.0, bd)] * (M - jj)
        else:
            out += [FactorSpec("trunc", src, val, bd)] * M
    return out


@dataclass(frozen=True)
class BSchedule:
    select: tuple[float, ...]
    multiply: tuple[float, ...]

    def scaled(self, factor: float) -> "BSchedule":
        return BSchedule(tuple(b * factor for b in self.select), tuple(b * factor for b in self.multiply))


def b_schedule(factors: Sequence[FactorSpec], data_bound: float, safety: float = 2.0) -> BSchedule:
    """Margins from interval bounds: select needs B > 2 max|x|, multiply needs B > |auxB * auxA|."""
    sel, mul = [], []
    running = 1.0
    for f in factors:
        sel.append(safety * data_bound + 1.0)
        mul.append(safety * running * f.magnitude + 1.0)
        running *= f.magnitude
    return BSchedule(tuple(sel), tuple(mul))


def _factor_pairs(dims: Dims, slc: SliceAddress, f: FactorSpec, alpha: float, B_sel: float,
                  B_mul: float) -> list[LayerPairPlan]:
    if f.kind == "const":
        first = build_select(dims, slc, 1, 1, 0.0, B_sel, target="auxC", constant=True)
    elif f.source[0] == "data":
        _, token, dim = f.source
        first = build_select(dims, slc, token, dim, f.u if f.kind == "trunc" else 0.0, B_sel, target="auxC")
    else:
        first = build_read(dims, slc, f.source[1], f.u if f.kind == "trunc" else 0.0, target="auxC")
    relu = build_relu_ffn(dims, slc, identity=f.kind != "trunc", clear_source=True)
    return [
        merge(first, relu),
        merge(build_multiply(dims, slc, 1, B_mul), build_scale_shift_ffn(dims, slc, alpha, B_mul)),
    ]


def build_tensor_basis(dims: Dims, slc: SliceAddress, bases, idx: Sequence[int], alpha: float,
                       sources: Sequence[tuple] | None = None, bounds: Sequence[float] | None = None,
                       schedule: BSchedule | None = None, data_bound: float | None = None,
                       b_scale: float = 1.0) -> list[LayerPairPlan]:
    """2*M*K layer pairs leaving alpha * prod_k B_{idx_k}(arg_k) in token 1's auxB of ``slc``.

    Default arguments are the data coordinates x_1^(1), ..., x_1^(K) of token 1.
    ``b_scale`` multiplies the automatic margin schedule (values below 1 can
    break the margin preconditions; used to test that violations are detected).
    """
    K = len(idx)
    if isinstance(bases, TruncPowerBasis):
        bases = [bases] * K
    if sources is None:
        if K > dims.d:
            raise CapacityError("arity", f"{K} arguments but tokens have dimension {dims.d}")
        sources = [("data", 1, k) for k in range(1, K + 1)]
    if bounds is None:
        bounds = [data_bound if data_bound is not None else 1.0] * K
    if data_bound is None:
        data_bound = max(bounds)
    factors = factor_specs(bases, idx, sources, bounds)
    if schedule is None:
        schedule = b_schedule(factors, data_bound).scaled(b_scale)
    if len(schedule.select) != len(factors) or len(schedule.multiply) != len(factors):
        raise ValueError(f"B schedule covers {len(schedule.select)} factors, need {len(factors)}")
    if any(b <= 0 for b in schedule.select + schedule.multiply):
        raise ValueError("B schedule entries must be positive")
    plans = []
    for i, f in enumerate(factors):
        a = alpha if i == len(factors) - 1 else 1.0
        plans += _factor_pairs(dims, slc, f, a, schedule.select[i], schedule.multiply[i])
    return plans


def build_parallel_heads(dims: Dims, specs: Sequence[tuple], copy: int = 1, **kw) -> list[list[LayerPairPlan]]:
    """One tensor basis function per head, computed simultaneously in copy ``copy``.

    ``specs`` holds one ``(bases, idx, alpha)`` per head; returns per-layer plan lists.
    """
    if len(specs) != dims.h:
        raise ValueError(f"{len(specs)} specs for {dims.h} heads")
    per_head = [build_tensor_basis(dims, dims.slice(s + 1, copy), b, idx, a, **kw)
                for s, (b, idx, a) in enumerate(specs)]
    n = {len(p) for p in per_head}
    if len(n) != 1:
        raise ValueError("all heads must use the same number of factors")
    return [list(step) for step in zip(*per_head)]


def summed_heads_network(dims: Dims, specs: Sequence[tuple], data_bound: float = 1.0, schedule=None) -> EncoderParams:
    """Parallel basis functions followed by the summing layer; output is f(x) = sum_s alpha_s prod_k B."""
    layer_plans = build_parallel_heads(dims, specs, data_bound=data_bound, schedule=schedule)
    slices = [dims.slice(s, 1) for s in range(1, dims.h + 1)]
    out = slices[-1].aux_c
    layer_plans.append([build_sum_layer(dims, slices, out)])
    M = specs[0][0].degree if isinstance(specs[0][0], TruncPowerBasis) else specs[0][0][0].degree
    meta = {"construction": "summed-heads", "output_coord": out, "M": M, "K": len(specs[0][1])}
    return plans_to_params(dims, layer_plans, readout_vector(dims, out), metadata=meta)


# ----------------------------------------------------------------------------
# hierarchical composition models


def default_d_ff(h: int) -> int:
    """Hidden width: 8 units per head for the parallel scale-shift step."""
    return max(10, 8 * h, 2 * h + 2)


def _int_root(h: int, K: int) -> int:
    t = int(round(h ** (1.0 / K)))
    while t**K > h:
        t -= 1
    while (t + 1) ** K <= h:
        t += 1
    return t


@dataclass
class BlockInfo:
    """One composite node compiled into a contiguous layer range of one copy."""

    level: int
    j: int
    node: Composite
    copy: int
    fit: SplineFit
    sources: list[tuple]
    bounds: list[float]
    children: list  # child BlockInfo or Leaf
    layer_start: int
    out_coord: int


@dataclass
class CompiledHCM:
    params: EncoderParams
    blocks: list[BlockInfo]
    A: float
    A_bar: float
    layers_per_block: int
    L_n: int

    @property
    def root(self) -> BlockInfo:
        return self.blocks[-1]

    def approximant(self, X) -> np.ndarray:
        """Spline approximants composed in plain numpy (the oracle for the network output)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cache: dict[int, np.ndarray] = {}
        for b in self.blocks:
            args = [X[:, c.index - 1] if isinstance(c, Leaf) else cache[id(c)] for c in b.children]
            cache[id(b)] = b.fit(np.stack(args, axis=1))
        return cache[id(self.root)]

    def block_arguments(self, X) -> dict[int, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        vals: dict[int, np.ndarray] = {}
        args: dict[int, np.ndarray] = {}
        for b in self.blocks:
            a = [X[:, c.index - 1] if isinstance(c, Leaf) else vals[id(c)] for c in b.children]
            args[id(b)] = np.stack(a, axis=1)
            vals[id(b)] = b.fit(args[id(b)])
        return args

    def with_root_coefficients(self, alpha) -> EncoderParams:
        """Same network with the root block's linear coefficients replaced."""
        alpha = np.asarray(alpha, dtype=np.float64)
        root = self.root
        if alpha.shape != root.fit.coefficients.shape:
            raise ValueError(f"expected {root.fit.coefficients.size} coefficients, got {alpha.size}")
        dims = self.params.dims
        plans = _block_layer_plans(dims, root, alpha, self.layers_per_block, self._data_bound)
        layers = list(self.params.layers)
        for off, ps in enumerate(plans):
            layers[root.layer_start + off] = assemble_layer(dims, ps) if ps else Layer.identity(dims)
        return EncoderParams(dims, layers, self.params.out_w, self.params.out_b, dict(self.params.metadata))

    @property
    def _data_bound(self) -> float:
        return self.A

    def root_feature_probe(self) -> tuple[int, list[int]]:
        """(layer index r, token-1 coordinates) where the root's per-head products sit before summation."""
        n_used = len(self.root.fit.coefficients)
        dims = self.params.dims
        r = self.root.layer_start + self.layers_per_block - 1  # state before the sum layer
        return r, [dims.slice(s, self.root.copy).aux_b for s in range(1, n_used + 1)]


def _block_layer_plans(dims: Dims, b: BlockInfo, alphas, layers_per_block: int,
                       data_bound: float) -> list[list[LayerPairPlan]]:
    n_used = len(alphas)
    head_plans = [
        build_tensor_basis(dims, dims.slice(s + 1, b.copy), b.fit.bases, b.fit.indices[s], float(alphas[s]),
                           sources=b.sources, bounds=b.bounds, data_bound=data_bound)
        for s in range(n_used)
    ]
    steps = [list(step) for step in zip(*head_plans)]
    while len(steps) < layers_per_block - 1:
        steps.append([])
    slices = [dims.slice(s + 1, b.copy) for s in range(n_used)]
    steps.append([build_sum_layer(dims, slices, b.out_coord)])
    return steps


def compiled_nnz_bound(q_max: int, K_max: int, I: int, h: int) -> int:
    return 144 * (q_max + 1) * K_max * I * h


def compile_hcm(hcm: HCMNode, d: int, l: int, h: int, A: float = 1.0, I: int | None = None, d_k: int = 2,
                d_ff: int | None = None, grid_points: int | None = None, check_points: int = 2000,
                seed: int = 0) -> CompiledHCM:
    """Encoder whose output is the composed spline approximant of ``hcm`` on [-A, A]^{d*l}.

    Every composite node becomes one block of ``2 * M_max * K_max + 1`` layer
    pairs working in its own copy of the coding; the block's h heads each
    compute one tensor-product basis function; input arguments use [-A, A], composed ones [-A_bar-1, A_bar+1].
    """
    block_list = blocks(hcm)
    if not block_list:
        raise CapacityError("hcm", "a bare leaf has no smooth function to compile")
    n_blocks = len(block_list)
    I = n_blocks if I is None else I
    if I < n_blocks:
        raise CapacityError("I", f"I={I} copies but the model has {n_blocks} composite nodes")
    if d_k < 2:
        raise CapacityError("d_k", "d_k must be >= 2")
    d_ff = default_d_ff(h) if d_ff is None else d_ff
    if d_ff < default_d_ff(h):
        raise CapacityError("d_ff", f"d_ff={d_ff} < {default_d_ff(h)} needed for {h} parallel heads")
    dims = Dims(d, l, h, I, d_k, d_ff)
    A_bar = range_bound(hcm, A)
    lo, hi = -A_bar - 1.0, A_bar + 1.0

    degrees = [max(n.g.q, 1) for _, _, n in block_list]
    M_max = max(degrees)
    q_max = max(n.g.q for _, _, n in block_list)
    K_max = max(n.g.arity for _, _, n in block_list)
    per_block = 2 * M_max * K_max + 1

    infos: list[BlockInfo] = []
    by_node: dict[int, BlockInfo] = {}
    for b, ((lev, j, node), M) in enumerate(zip(block_list, degrees), start=1):
        K = node.g.arity
        t = _int_root(h, K)
        if t < M + 1:
            raise CapacityError("h", f"h={h} gives {t} basis functions per dimension; degree {M} needs >= {M + 1}")
        # raw inputs only range over [-A, A]; composed arguments over [-A_bar-1, A_bar+1]
        bases = [equidistant_basis(M, t, -A, A) if isinstance(c, Leaf) else equidistant_basis(M, t, lo, hi)
                 for c in node.children]
        gp = grid_points or max(4 * t + 1, 2 * (M + 1) + 1)
        fit = fit_spline_ls(lambda X, g=node.g, K=K: g(*(X.T if K > 1 else [X])), bases, gp, dim=K)
        sources, bounds, children = [], [], []
        for c in node.children:
            if isinstance(c, Leaf):
                token, dim = dims.coordinate_of_input(c.index)
                sources.append(("data", token, dim))
                bounds.append(A)
                children.append(c)
            else:
                child = by_node[id(c)]
                sources.append(("coord", child.out_coord))
                bounds.append(A_bar + 1.0)
                children.append(child)
        out_coord = dims.slice(h, b).aux_c
        info = BlockInfo(lev, j, node, b, fit, sources, bounds, children, (b - 1) * per_block, out_coord)
        infos.append(info)
        by_node[id(node)] = info

    layer_plans: list[list[LayerPairPlan]] = []
    for info in infos:
        layer_plans += _block_layer_plans(dims, info, info.fit.coefficients, per_block, A)
    layer_plans += [[] for _ in range((I - n_blocks) * per_block)]

    L_n = compiled_nnz_bound(q_max, K_max, I, h)
    meta = {
        "construction": "compiled",
        "A": A, "A_bar": A_bar, "layers_per_block": per_block, "L_n": L_n,
        "blocks": [{"level": bi.level, "j": bi.j, "copy": bi.copy, "layer_start": bi.layer_start,
                    "out_coord": bi.out_coord, "n_basis": int(len(bi.fit.coefficients)),
                    "degree": bi.fit.bases[0].degree, "g": bi.node.g.name} for bi in infos],
        "output_coord": infos[-1].out_coord,
    }
    params = plans_to_params(dims, layer_plans, readout_vector(dims, infos[-1].out_coord), metadata=meta)
    compiled = CompiledHCM(params, infos, A, A_bar, per_block, L_n)

    rng = np.random.default_rng(seed)
    Xc = rng.uniform(-A, A, size=(check_points, d * l))
    args = compiled.block_arguments(Xc)
    for info in infos:
        a = args[id(info)]
        if np.any(np.abs(a) > A_bar + 1.0):
            raise CapacityError(
                "h", f"block {info.level}/{info.j}: intermediate approximant left [-A_bar-1, A_bar+1] "
                f"(max |value| {np.abs(a).max():.4g} > {A_bar + 1:.4g}); increase h")
    return compiled


# ----------------------------------------------------------------------------
# parameter audits


def remark6_total_bound(M: int, d: int, h: int, l: int, d_k: int, d_ff: int) -> int:
    return 235 * M * max(l, d, d_k, d_ff) ** 3 * h**2


def remark6_nnz_bound(M: int, d: int, h: int) -> int:
    return 144 * M * d * h


def audit_params(params: EncoderParams, M: int, d: int, h: int, l: int, d_k: int, d_ff: int) -> dict:
    total = total_parameters(params)
    nnz = count_nonzero(params)
    tb = remark6_total_bound(M, d, h, l, d_k, d_ff)
    nb = remark6_nnz_bound(M, d, h)
    return {
        "total_parameters": total,
        "total_bound": tb,
        "total_pass": total <= tb,
        "nonzero": nnz,
        "nonzero_bound": nb,
        "nonzero_pass": nnz <= nb,
        "pass": total <= tb and nnz <= nb,
    }
