"""Hardmax-attention Transformer encoder: input coding, forward pass, parameter accounting.

Token states are stored as arrays of shape ``(l, d_model)``; batched evaluation
uses ``(n, l, d_model)``.  Weight matrices are kept as ``scipy.sparse`` CSR
arrays because every constructed network is overwhelmingly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "DimensionError",
    "Dims",
    "SliceAddress",
    "AttentionHead",
    "FeedForward",
    "Layer",
    "EncoderParams",
    "encode_input",
    "encode_batch",
    "attention_layer",
    "ffn_layer",
    "forward",
    "probe_batch",
    "propagate",
    "forward_batch",
    "forward_trace",
    "readout",
    "count_nonzero",
    "total_parameters",
    "truncate",
    "params_to_json",
    "params_from_json",
    "save_params",
    "load_params",
]


class DimensionError(ValueError):
    """Raised when an input or a weight has the wrong shape."""


def _csr(a) -> sparse.csr_array:
    if sparse.issparse(a):
        return sparse.csr_array(a, dtype=np.float64)
    return sparse.csr_array(np.asarray(a, dtype=np.float64))


def _nnz(a) -> int:
    if sparse.issparse(a):
        return int(a.count_nonzero())
    return int(np.count_nonzero(a))


@dataclass(frozen=True)
class Dims:
    """Architecture sizes.  ``h`` heads, ``I`` copies of the coding per head."""

    d: int
    l: int
    h: int = 1
    I: int = 1
    d_k: int = 2
    d_ff: int = 8

    def __post_init__(self):
        for name in ("d", "l", "h", "I", "d_k", "d_ff"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def width(self) -> int:
        return self.d + self.l + 4

    @property
    def n_slices(self) -> int:
        return self.h * self.I

    @property
    def d_model(self) -> int:
        return self.h * self.I * self.width

    @property
    def d_v(self) -> int:
        return self.d_model // self.h

    def slice(self, head: int = 1, copy: int = 1) -> "SliceAddress":
        return SliceAddress(self, head, copy)

    def coordinate_of_input(self, index: int) -> tuple[int, int]:
        """Map a 1-based coordinate of the flattened input in R^{d*l} to (token, dim)."""
        if not 1 <= index <= self.d * self.l:
            raise DimensionError(f"input coordinate {index} outside 1..{self.d * self.l}")
        return (index - 1) // self.d + 1, (index - 1) % self.d + 1


@dataclass(frozen=True)
class SliceAddress:
    """One width-(d+l+4) block of the token coding.

    Slices are linearised head-major with the copy index varying fastest, so
    head ``s`` owns the contiguous value block ``[(s-1)*d_v, s*d_v)``.
    All coordinate accessors return 0-based positions in ``d_model``.
    """

    dims: Dims
    head: int = 1
    copy: int = 1

    def __post_init__(self):
        if not 1 <= self.head <= self.dims.h:
            raise DimensionError(f"head {self.head} outside 1..{self.dims.h}")
        if not 1 <= self.copy <= self.dims.I:
            raise DimensionError(f"copy {self.copy} outside 1..{self.dims.I}")

    @property
    def index(self) -> int:
        """1-based slice number k in 1..h*I."""
        return (self.head - 1) * self.dims.I + self.copy

    @property
    def base_offset(self) -> int:
        return (self.index - 1) * self.dims.width

    def data(self, k: int) -> int:
        if not 1 <= k <= self.dims.d:
            raise DimensionError(f"data slot {k} outside 1..{self.dims.d}")
        return self.base_offset + k - 1

    @property
    def const(self) -> int:
        return self.base_offset + self.dims.d

    def pos(self, j: int) -> int:
        if not 1 <= j <= self.dims.l:
            raise DimensionError(f"position slot {j} outside 1..{self.dims.l}")
        return self.base_offset + self.dims.d + j

    @property
    def aux_a(self) -> int:
        return self.base_offset + self.dims.d + self.dims.l + 1

    @property
    def aux_b(self) -> int:
        return self.base_offset + self.dims.d + self.dims.l + 2

    @property
    def aux_c(self) -> int:
        return self.base_offset + self.dims.d + self.dims.l + 3

    def roles(self) -> dict[str, list[int]]:
        d, l = self.dims.d, self.dims.l
        return {
            "data": [self.data(k) for k in range(1, d + 1)],
            "const": [self.const],
            "position": [self.pos(j) for j in range(1, l + 1)],
            "auxA": [self.aux_a],
            "auxB": [self.aux_b],
            "auxC": [self.aux_c],
        }

    def coords(self) -> range:
        return range(self.base_offset, self.base_offset + self.dims.width)


@dataclass
class AttentionHead:
    W_Q: Any
    W_K: Any
    W_V: Any

    def __post_init__(self):
        self.W_Q, self.W_K, self.W_V = _csr(self.W_Q), _csr(self.W_K), _csr(self.W_V)
        if self.W_Q.shape != self.W_K.shape:
            raise DimensionError(f"W_Q {self.W_Q.shape} and W_K {self.W_K.shape} differ")

    def nnz(self) -> int:
        return _nnz(self.W_Q) + _nnz(self.W_K) + _nnz(self.W_V)

    @classmethod
    def zeros(cls, dims: Dims) -> "AttentionHead":
        return cls(
            sparse.csr_array((dims.d_k, dims.d_model)),
            sparse.csr_array((dims.d_k, dims.d_model)),
            sparse.csr_array((dims.d_v, dims.d_model)),
        )


@dataclass
class FeedForward:
    W_1: Any
    b_1: Any
    W_2: Any
    b_2: Any

    def __post_init__(self):
        self.W_1, self.W_2 = _csr(self.W_1), _csr(self.W_2)
        self.b_1 = np.asarray(self.b_1, dtype=np.float64).ravel()
        self.b_2 = np.asarray(self.b_2, dtype=np.float64).ravel()
        d_ff, d_model = self.W_1.shape
        if self.W_2.shape != (d_model, d_ff):
            raise DimensionError(f"W_2 has shape {self.W_2.shape}, expected {(d_model, d_ff)}")
        if self.b_1.shape != (d_ff,) or self.b_2.shape != (d_model,):
            raise DimensionError("bias shapes inconsistent with W_1/W_2")

    def nnz(self) -> int:
        return _nnz(self.W_1) + _nnz(self.b_1) + _nnz(self.W_2) + _nnz(self.b_2)

    @classmethod
    def zeros(cls, dims: Dims) -> "FeedForward":
        return cls(
            sparse.csr_array((dims.d_ff, dims.d_model)),
            np.zeros(dims.d_ff),
            sparse.csr_array((dims.d_model, dims.d_ff)),
            np.zeros(dims.d_model),
        )


@dataclass
class Layer:
    """One (multi-head attention, pointwise feedforward) pair."""

    heads: list[AttentionHead]
    ffn: FeedForward
    tag: str = ""

    def nnz(self) -> int:
        return sum(hd.nnz() for hd in self.heads) + self.ffn.nnz()

    @cached_property
    def _stacked(self):
        wq = sparse.vstack([hd.W_Q for hd in self.heads], format="csr")
        wk = sparse.vstack([hd.W_K for hd in self.heads], format="csr")
        wv = sparse.vstack([hd.W_V for hd in self.heads], format="csr")
        return wq, wk, wv

    @classmethod
    def identity(cls, dims: Dims, tag: str = "identity") -> "Layer":
        return cls([AttentionHead.zeros(dims) for _ in range(dims.h)], FeedForward.zeros(dims), tag)


@dataclass
class EncoderParams:
    """The full parameter vector: N layers plus the linear read-out ``w``, ``b``."""

    dims: Dims
    layers: list[Layer]
    out_w: np.ndarray
    out_b: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out_w = np.asarray(self.out_w, dtype=np.float64).ravel()
        self.out_b = float(self.out_b)
        self.validate()

    @property
    def N(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        dm, dims = self.dims.d_model, self.dims
        if self.out_w.shape != (dm * dims.l,):
            raise DimensionError(f"out_w has length {self.out_w.size}, expected {dm * dims.l}")
        for r, layer in enumerate(self.layers, start=1):
            if len(layer.heads) != dims.h:
                raise DimensionError(f"layer {r}: {len(layer.heads)} heads, expected {dims.h}")
            for s, hd in enumerate(layer.heads, start=1):
                if hd.W_Q.shape[1] != dm or hd.W_V.shape != (dims.d_v, dm):
                    raise DimensionError(f"layer {r} head {s}: weight shapes inconsistent with d_model={dm}")
            if layer.ffn.W_1.shape[1] != dm:
                raise DimensionError(f"layer {r}: W_1 has {layer.ffn.W_1.shape[1]} columns, expected {dm}")


# ----------------------------------------------------------------------------
# forward pass


def _coding_template(dims: Dims) -> np.ndarray:
    """z_0 with all data slots zero, shape (l, d_model)."""
    z = np.zeros((dims.l, dims.d_model))
    for k in range(1, dims.n_slices + 1):
        base = (k - 1) * dims.width
        z[:, base + dims.d] = 1.0
        z[np.arange(dims.l), base + dims.d + 1 + np.arange(dims.l)] = 1.0
        z[:, base + dims.d + dims.l + 2] = 1.0
    return z


def _check_tokens(x, dims: Dims) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and x.size == dims.d * dims.l:
        x = x.reshape(dims.l, dims.d)
    if x.ndim != 2 or x.shape[0] != dims.l:
        raise DimensionError(f"expected {dims.l} tokens of dimension {dims.d}, got array of shape {x.shape}")
    if x.shape[1] != dims.d:
        raise DimensionError(f"token 1 has dimension {x.shape[1]}, expected {dims.d}")
    return x


def encode_input(x, dims: Dims) -> np.ndarray:
    """Code ``x`` (l tokens in R^d, or the flat vector in R^{d*l}) into z_0."""
    if isinstance(x, (list, tuple)) and len(x) == dims.l:
        for j, tok in enumerate(x, start=1):
            if np.size(tok) != dims.d:
                raise DimensionError(f"token {j} has dimension {np.size(tok)}, expected {dims.d}")
    x = _check_tokens(x, dims)
    z = _coding_template(dims)
    for k in range(dims.n_slices):
        base = k * dims.width
        z[:, base : base + dims.d] = x
    return z


def encode_batch(X, dims: Dims) -> np.ndarray:
    """Batch version of :func:`encode_input`; ``X`` has shape (n, d*l) or (n, l, d)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] != dims.d * dims.l:
            raise DimensionError(f"expected rows of length {dims.d * dims.l}, got {X.shape[1]}")
        X = X.reshape(-1, dims.l, dims.d)
    if X.ndim != 3 or X.shape[1:] != (dims.l, dims.d):
        raise DimensionError(f"batch shape {X.shape} inconsistent with l={dims.l}, d={dims.d}")
    Z = np.broadcast_to(_coding_template(dims), (X.shape[0], dims.l, dims.d_model)).copy()
    for k in range(dims.n_slices):
        base = k * dims.width
        Z[:, :, base : base + dims.d] = X
    return Z


def _right_mul(Z2: np.ndarray, W) -> np.ndarray:
    """Z2 @ W.T for a sparse or dense W."""
    return np.asarray((W @ Z2.T).T)


def _attention_batch(Z: np.ndarray, wq, wk, wv, h: int) -> np.ndarray:
    n, l, dm = Z.shape
    Z2 = Z.reshape(n * l, dm)
    d_k = wq.shape[0] // h
    d_v = wv.shape[0] // h
    Q = _right_mul(Z2, wq).reshape(n, l, h, d_k)
    K = _right_mul(Z2, wk).reshape(n, l, h, d_k)
    V = _right_mul(Z2, wv).reshape(n, l, h, d_v)
    scores = np.einsum("nihk,njhk->nhij", Q, K)
    # np.argmax returns the first maximiser: ties go to the smallest token index.
    jhat = np.argmax(scores, axis=-1)  # (n, h, i)
    best = np.take_along_axis(scores, jhat[..., None], axis=-1)[..., 0]
    n_idx = np.arange(n)[:, None, None]
    h_idx = np.arange(h)[None, :, None]
    Vsel = V[n_idx, jhat, h_idx]  # (n, h, i, d_v)
    ybar = Vsel * best[..., None]
    return Z + ybar.transpose(0, 2, 1, 3).reshape(n, l, dm)


def _ffn_batch(Y: np.ndarray, ffn: FeedForward) -> np.ndarray:
    n, l, dm = Y.shape
    Y2 = Y.reshape(n * l, dm)
    hidden = np.maximum(_right_mul(Y2, ffn.W_1) + ffn.b_1, 0.0)
    out = Y2 + _right_mul(hidden, ffn.W_2) + ffn.b_2
    return out.reshape(n, l, dm)


def attention_layer(z: np.ndarray, heads: Sequence[AttentionHead]) -> np.ndarray:
    """Multi-head hardmax attention with residual connection on one token matrix."""
    z = np.asarray(z, dtype=np.float64)
    h = len(heads)
    if z.ndim != 2 or z.shape[1] % h:
        raise DimensionError(f"token matrix of shape {z.shape} incompatible with {h} heads")
    for s, hd in enumerate(heads, start=1):
        if hd.W_Q.shape[1] != z.shape[1] or hd.W_V.shape != (z.shape[1] // h, z.shape[1]):
            raise DimensionError(f"head {s} shapes {hd.W_Q.shape}, {hd.W_V.shape} do not fit d_model={z.shape[1]}")
    wq = sparse.vstack([hd.W_Q for hd in heads], format="csr")
    wk = sparse.vstack([hd.W_K for hd in heads], format="csr")
    wv = sparse.vstack([hd.W_V for hd in heads], format="csr")
    return _attention_batch(z[None], wq, wk, wv, h)[0]


def ffn_layer(y: np.ndarray, ffn: FeedForward) -> np.ndarray:
    """Pointwise one-hidden-layer ReLU network with residual connection."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != ffn.W_1.shape[1]:
        raise DimensionError(f"token matrix of shape {y.shape} incompatible with W_1 {ffn.W_1.shape}")
    return _ffn_batch(y[None], ffn)[0]


def _run_layers(Z: np.ndarray, params: EncoderParams, keep: bool):
    trace = [Z] if keep else None
    for layer in params.layers:
        wq, wk, wv = layer._stacked
        Z = _attention_batch(Z, wq, wk, wv, params.dims.h)
        Z = _ffn_batch(Z, layer.ffn)
        if keep:
            trace.append(Z)
    return Z, trace


def readout(params: EncoderParams, z_last: np.ndarray) -> np.ndarray | float:
    """Linear head ``z_N . w + b`` for one token matrix or a batch."""
    z_last = np.asarray(z_last)
    if z_last.ndim == 2:
        return float(z_last.reshape(-1) @ params.out_w + params.out_b)
    return z_last.reshape(z_last.shape[0], -1) @ params.out_w + params.out_b


def forward(params: EncoderParams, x) -> float:
    """f_theta(x) for a single input."""
    z0 = encode_input(x, params.dims)
    zN, _ = _run_layers(z0[None], params, keep=False)
    return readout(params, zN[0])


def forward_batch(params: EncoderParams, X, chunk: int = 2048) -> np.ndarray:
    """f_theta on every row of ``X`` (shape (n, d*l)), evaluated in chunks."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        Z = encode_batch(X[start : start + chunk], params.dims)
        zN, _ = _run_layers(Z, params, keep=False)
        out[start : start + chunk] = readout(params, zN)
    return out


def forward_trace(params: EncoderParams, x) -> list[np.ndarray]:
    """All states z_0, ..., z_N for a single input."""
    z0 = encode_input(x, params.dims)
    _, trace = _run_layers(z0[None], params, keep=True)
    return [t[0] for t in trace]


def trace_batch(params: EncoderParams, X) -> list[np.ndarray]:
    """All states z_0, ..., z_N for a batch (each of shape (n, l, d_model))."""
    Z = encode_batch(X, params.dims)
    _, trace = _run_layers(Z, params, keep=True)
    return trace


def propagate(params: EncoderParams, Z) -> np.ndarray:
    """Run all layers on prepared states ``Z`` of shape (n, l, d_model) or (l, d_model)."""
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 2
    out, _ = _run_layers(Z[None] if single else Z, params, keep=False)
    return out[0] if single else out


def probe_batch(params: EncoderParams, X, layer: int, token: int, coords, chunk: int = 2048) -> np.ndarray:
    """Coordinates ``coords`` of ``token`` in the state z_layer, for every row of ``X``."""
    if not 0 <= layer <= params.N:
        raise ValueError(f"layer {layer} outside 0..{params.N}")
    X = np.asarray(X, dtype=np.float64)
    coords = np.asarray(coords, dtype=int)
    out = np.empty((X.shape[0], coords.size))
    head = EncoderParams(params.dims, params.layers[:layer], params.out_w, params.out_b, params.metadata)
    for start in range(0, X.shape[0], chunk):
        Z, _ = _run_layers(encode_batch(X[start : start + chunk], params.dims), head, keep=False)
        out[start : start + chunk] = Z[:, token - 1, coords]
    return out


def count_nonzero(params: EncoderParams) -> int:
    """||theta||_0 over all attention, feedforward and read-out weights."""
    return sum(layer.nnz() for layer in params.layers) + _nnz(params.out_w) + int(params.out_b != 0)


def total_parameters(params: EncoderParams) -> int:
    """Number of scalar parameters (zero or not) in the architecture."""
    dims = params.dims
    per_layer = dims.h * (2 * dims.d_k * dims.d_model + dims.d_v * dims.d_model)
    per_layer += 2 * dims.d_ff * dims.d_model + dims.d_ff + dims.d_model
    return params.N * per_layer + dims.d_model * dims.l + 1


def truncate(v, beta: float):
    """Clamp to [-beta, beta]."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    out = np.clip(v, -beta, beta)
    return float(out) if np.isscalar(v) else out


# ----------------------------------------------------------------------------
# JSON serialisation

FORMAT_TAG = "hardmax-encoder/1"
_SPARSE_THRESHOLD = 0.9


def _encode_array(a) -> Any:
    if sparse.issparse(a):
        a = sparse.coo_array(a)
        if a.shape[0] * a.shape[1] and a.nnz / (a.shape[0] * a.shape[1]) > 1 - _SPARSE_THRESHOLD:
            return a.toarray().tolist()
        keep = a.data != 0
        return {
            "shape": list(a.shape),
            "sparse": [[int(r), int(c), float(v)] for r, c, v in zip(a.row[keep], a.col[keep], a.data[keep])],
        }
    a = np.asarray(a)
    if a.size and np.count_nonzero(a) / a.size <= 1 - _SPARSE_THRESHOLD:
        idx = np.flatnonzero(a)
        return {"shape": list(a.shape), "sparse": [[int(i), float(a[i])] for i in idx]}
    return a.tolist()


def _decode_array(obj, matrix: bool):
    if isinstance(obj, dict):
        shape = tuple(obj["shape"])
        if matrix:
            trip = np.array(obj["sparse"], dtype=np.float64).reshape(-1, 3)
            return sparse.csr_array(
                (trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=shape
            )
        out = np.zeros(shape)
        for i, v in obj["sparse"]:
            out[int(i)] = v
        return out
    arr = np.asarray(obj, dtype=np.float64)
    return arr


def params_to_json(params: EncoderParams) -> dict:
    dims = params.dims
    return {
        "format": FORMAT_TAG,
        "dims": {"d": dims.d, "l": dims.l, "h": dims.h, "I": dims.I, "d_k": dims.d_k, "d_ff": dims.d_ff},
        "layers": [
            {
                "tag": layer.tag,
                "heads": [
                    {"W_Q": _encode_array(hd.W_Q), "W_K": _encode_array(hd.W_K), "W_V": _encode_array(hd.W_V)}
                    for hd in layer.heads
                ],
                "ffn": {
                    "W_1": _encode_array(layer.ffn.W_1),
                    "b_1": _encode_array(layer.ffn.b_1),
                    "W_2": _encode_array(layer.ffn.W_2),
                    "b_2": _encode_array(layer.ffn.b_2),
                },
            }
            for layer in params.layers
        ],
        "out_w": _encode_array(params.out_w),
        "out_b": params.out_b,
        "metadata": params.metadata,
    }


def params_from_json(doc: dict) -> EncoderParams:
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported format tag {doc.get('format')!r}")
    dims = Dims(**doc["dims"])
    layers = []
    for ld in doc["layers"]:
        heads = [
            AttentionHead(_decode_array(hd["W_Q"], True), _decode_array(hd["W_K"], True), _decode_array(hd["W_V"], True))
            for hd in ld["heads"]
        ]
        f = ld["ffn"]
        ffn = FeedForward(
            _decode_array(f["W_1"], True), _decode_array(f["b_1"], False),
            _decode_array(f["W_2"], True), _decode_array(f["b_2"], False),
        )
        layers.append(Layer(heads, ffn, ld.get("tag", "")))
    return EncoderParams(dims, layers, _decode_array(doc["out_w"], False), doc["out_b"], doc.get("metadata", {}))


def save_params(params: EncoderParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path) -> EncoderParams:
    return params_from_json(json.loads(Path(path).read_text()))
