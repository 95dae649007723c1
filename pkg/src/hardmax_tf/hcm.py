"""Hierarchical composition models: trees of smooth low-arity functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "SmoothFn",
    "Leaf",
    "Composite",
    "HCMNode",
    "HCMLayout",
    "HCMInstance",
    "eval_hcm",
    "eval_hcm_batch",
    "layout",
    "blocks",
    "range_bound",
    "node_ranges",
    "lipschitz_spot_check",
    "builtin_library",
    "get_instance",
]

Interval = tuple[float, float]


@dataclass(frozen=True)
class SmoothFn:
    """A (p, C)-smooth function R^K -> R with declared metadata.

    ``fn`` is vectorised over the leading axis: it takes K arrays (one per
    argument) and returns an array.  ``interval`` optionally maps K input
    intervals to an enclosing output interval; without it the Lipschitz
    constant gives a (looser) enclosure.
    """

    fn: Callable[..., np.ndarray]
    arity: int
    p: float
    lipschitz: float
    c9: float = 1.0
    interval: Callable[..., Interval] | None = None
    name: str = ""

    def __post_init__(self):
        if self.arity < 1:
            raise ValueError("arity must be >= 1")
        if self.p <= 0:
            raise ValueError("smoothness p must be positive")
        if self.lipschitz < 1:
            raise ValueError("Lipschitz constant must be >= 1")

    @property
    def q(self) -> int:
        """Integer part of p in the decomposition p = q + s with s in (0, 1]."""
        return math.ceil(self.p) - 1

    def __call__(self, *args):
        return self.fn(*args)

    def enclose(self, boxes: Sequence[Interval]) -> Interval:
        if self.interval is not None:
            lo, hi = self.interval(*boxes)
            return float(lo), float(hi)
        centers = [0.5 * (a + b) for a, b in boxes]
        radius = math.sqrt(sum((0.5 * (b - a)) ** 2 for a, b in boxes))
        mid = float(self.fn(*[np.asarray(c) for c in centers]))
        return mid - self.lipschitz * radius, mid + self.lipschitz * radius


@dataclass(frozen=True)
class Leaf:
    """m(x) = x^(index), index 1-based in 1..d*l."""

    index: int

    @property
    def level(self) -> int:
        return 0

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("leaf index is 1-based")


@dataclass(frozen=True)
class Composite:
    g: SmoothFn
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.g.arity != len(self.children):
            raise ValueError(f"{self.g.name or 'g'} has arity {self.g.arity} but {len(self.children)} children")

    @property
    def level(self) -> int:
        return 1 + max(c.level for c in self.children)


HCMNode = Union[Leaf, Composite]


def _max_leaf(node: HCMNode) -> int:
    if isinstance(node, Leaf):
        return node.index
    return max(_max_leaf(c) for c in node.children)


def eval_hcm_batch(node: HCMNode, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if _max_leaf(node) > X.shape[1]:
        raise IndexError(f"leaf index {_max_leaf(node)} exceeds input dimension {X.shape[1]}")
    return _eval(node, X)


def _eval(node: HCMNode, X: np.ndarray) -> np.ndarray:
    if isinstance(node, Leaf):
        return X[:, node.index - 1]
    return np.asarray(node.g(*[_eval(c, X) for c in node.children]), dtype=np.float64) * np.ones(X.shape[0])


def eval_hcm(node: HCMNode, x) -> float:
    return float(eval_hcm_batch(node, np.asarray(x, dtype=np.float64)[None, :])[0])


@dataclass(frozen=True)
class HCMLayout:
    counts: dict[int, int]  # level -> N~_i
    arities: dict[int, list[int]]  # level -> [K_1^(i), ..., K_{N~_i}^(i)]

    @property
    def level(self) -> int:
        return max(self.counts, default=0)

    @property
    def total_blocks(self) -> int:
        return sum(self.counts.values())

    def satisfies_recursion(self) -> bool:
        """N~_kappa = 1 and N~_i = sum_j K_j^(i+1)."""
        if not self.counts:
            return True
        kappa = self.level
        if self.counts[kappa] != 1:
            return False
        return all(self.counts.get(i, 0) == sum(self.arities.get(i + 1, [])) for i in range(1, kappa))


def blocks(node: HCMNode) -> list[tuple[int, int, Composite]]:
    """Composite nodes as (level, j, node), level by level, j 1-based in left-to-right order."""
    per_level: dict[int, list[Composite]] = {}

    def visit(n):
        if isinstance(n, Composite):
            for c in n.children:
                visit(c)
            per_level.setdefault(n.level, []).append(n)

    visit(node)
    out = []
    for lev in sorted(per_level):
        out += [(lev, j, n) for j, n in enumerate(per_level[lev], start=1)]
    return out


def layout(node: HCMNode) -> HCMLayout:
    counts: dict[int, int] = {}
    arities: dict[int, list[int]] = {}
    for lev, _, n in blocks(node):
        counts[lev] = counts.get(lev, 0) + 1
        arities.setdefault(lev, []).append(n.g.arity)
    return HCMLayout(counts, arities)


def node_ranges(node: HCMNode, A: float) -> dict[int, Interval]:
    """Interval enclosure of every node's value on [-A, A]^{d*l}, keyed by id(node)."""
    out: dict[int, Interval] = {}

    def visit(n) -> Interval:
        if isinstance(n, Leaf):
            r = (-A, A)
        else:
            r = n.g.enclose([visit(c) for c in n.children])
        out[id(n)] = r
        return r

    visit(node)
    return out


def range_bound(node: HCMNode, A: float) -> float:
    """A_bar >= A such that every submodel maps [-A, A]^{d*l} into [-A_bar, A_bar]."""
    if A < 1:
        raise ValueError("A must be >= 1")
    return max([A] + [max(abs(lo), abs(hi)) for lo, hi in node_ranges(node, A).values()])


def lipschitz_spot_check(g: SmoothFn, box: Sequence[Interval], n_pairs: int = 2000, seed: int = 0) -> float:
    """Largest observed |g(x)-g(z)| / ||x-z|| over random pairs in ``box``; compare to g.lipschitz."""
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    x = rng.uniform(lo, hi, size=(n_pairs, g.arity))
    z = rng.uniform(lo, hi, size=(n_pairs, g.arity))
    num = np.abs(np.asarray(g(*x.T)) - np.asarray(g(*z.T)))
    den = np.linalg.norm(x - z, axis=1)
    return float(np.max(num / den))


# ----------------------------------------------------------------------------
# catalogue


@dataclass(frozen=True)
class HCMInstance:
    name: str
    node: HCMNode
    d: int
    l: int
    A: float
    closed_form: Callable[[np.ndarray], np.ndarray]
    description: str = ""
    params: dict = field(default_factory=dict)

    @property
    def ambient_dim(self) -> int:
        return self.d * self.l

    @property
    def constraints(self) -> frozenset[tuple[float, int]]:
        return frozenset((n.g.p, n.g.arity) for _, _, n in blocks(self.node))

    def __call__(self, X) -> np.ndarray:
        return eval_hcm_batch(self.node, X)


def _mono_interval(f):
    """Enclosure of a monotone increasing univariate function."""
    return lambda box: (float(f(box[0])), float(f(box[1])))


def _sin_interval(freq: float, amp: float = 1.0, shift: float = 0.0):
    def enclose(box):
        a, b = box
        if (b - a) * freq >= 2 * math.pi:
            return shift - abs(amp), shift + abs(amp)
        xs = np.linspace(a, b, 2001)
        v = shift + amp * np.sin(freq * xs)
        # sampled extrema plus a Lipschitz margin for the sampling gap
        pad = abs(amp) * freq * (b - a) / 2000
        return float(v.min() - pad), float(v.max() + pad)

    return enclose


def _product_interval(a, b):
    vals = [a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]
    return min(vals), max(vals)


def _sum_interval(a, b):
    return a[0] + b[0], a[1] + b[1]


def _smooth1d(freq: float = 2.0, d: int = 1, l: int = 1, A: float = 1.0, coord: int = 1):
    g = SmoothFn(lambda a: np.sin(freq * a), 1, 2.0, max(1.0, freq), freq * freq,
                 lambda box: _sin_interval(freq)(box), f"sin({freq}a)")
    return HCMInstance("smooth1d", Composite(g, (Leaf(coord),)), d, l, A,
                       lambda X: np.sin(freq * X[:, coord - 1]),
                       "level-1 univariate sin target (p=2, K=1)",
                       dict(freq=freq, d=d, l=l, A=A, coord=coord))


def _smooth2d(d: int = 2, l: int = 1, A: float = 1.0, coords=(1, 2)):
    def fn(a, b):
        return np.sin(a + 0.5 * b) + 0.5 * np.cos(1.5 * b) * a

    def enclose(ba, bb):
        return -1.0 - 0.5 * max(abs(ba[0]), abs(ba[1])), 1.0 + 0.5 * max(abs(ba[0]), abs(ba[1]))

    g = SmoothFn(fn, 2, 2.0, 3.0, 4.0, enclose, "sin(a+b/2)+cos(1.5b)a/2")
    i, j = coords
    return HCMInstance("smooth2d", Composite(g, (Leaf(i), Leaf(j))), d, l, A,
                       lambda X: np.sin(X[:, i - 1] + 0.5 * X[:, j - 1]) + 0.5 * np.cos(1.5 * X[:, j - 1]) * X[:, i - 1],
                       "level-1 bivariate non-additive target (p=2, K=2)",
                       dict(d=d, l=l, A=A, coords=list(coords)))


def _additive2(d: int = 2, l: int = 1, A: float = 1.0):
    def enclose(ba, bb):
        slo, shi = _sin_interval(1.0)(ba)
        sq = _product_interval(bb, bb)
        sq_lo = 0.0 if bb[0] <= 0.0 <= bb[1] else min(bb[0] ** 2, bb[1] ** 2)
        return slo + 0.5 * sq_lo, shi + 0.5 * sq[1]

    g = SmoothFn(lambda a, b: np.sin(a) + 0.5 * b * b, 2, 2.0, 2.0, 1.0, enclose, "sin(a)+b^2/2")
    return HCMInstance("additive2", Composite(g, (Leaf(1), Leaf(2))), d, l, A,
                       lambda X: np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2,
                       "level-1 additive model of two smooth univariate terms (K=2)",
                       dict(d=d, l=l, A=A))


def _composition2(d: int = 2, l: int = 2, A: float = 1.0):
    inner1 = SmoothFn(lambda a, b: 0.5 * (a + b), 2, 2.0, 1.0, 1.0, lambda ba, bb: (0.5 * (ba[0] + bb[0]), 0.5 * (ba[1] + bb[1])), "(a+b)/2")
    inner2 = SmoothFn(lambda a, b: np.sin(a - b), 2, 2.0, 1.5, 1.0, lambda ba, bb: (-1.0, 1.0), "sin(a-b)")
    outer = SmoothFn(lambda u, v: u * v + 0.5 * u, 2, 2.0, 2.5, 2.0,
                     lambda bu, bv: tuple(np.add(_product_interval(bu, bv), (0.5 * bu[0], 0.5 * bu[1]))), "uv+u/2")
    node = Composite(outer, (Composite(inner1, (Leaf(1), Leaf(2))), Composite(inner2, (Leaf(3), Leaf(4)))))

    def closed(X):
        u = 0.5 * (X[:, 0] + X[:, 1])
        v = np.sin(X[:, 2] - X[:, 3])
        return u * v + 0.5 * u

    return HCMInstance("composition2", node, d, l, A, closed, "level-2 composition of bivariate functions",
                       dict(d=d, l=l, A=A))


def _bump_link(z, power: float = 1.0):
    t = np.tanh(z)
    return 0.5 + 0.4 * np.sign(t) * np.abs(t) ** power


def _classification2(d: int = 2, l: int = 2, A: float = 1.0, coords=(1, 2), scale: float = 0.5,
                     power: float = 3.0, wiggle: float = 0.4, freq: float = 4.0):
    """Aposteriori probability with a curved, rippled decision boundary in two coordinates.

    ``power`` > 1 flattens m around 1/2 (a weak margin, where plug-in
    classification is hardest); the ripple keeps the boundary only partly
    resolved by coarse spline spaces.
    """

    def boundary(a, b):
        return a + 0.8 * b * b - 0.4 + wiggle * np.sin(freq * b)

    def fn(a, b):
        return _bump_link(scale * boundary(a, b), power)

    lo, hi = float(_bump_link(-10.0 * scale, power)), float(_bump_link(10.0 * scale, power))
    g = SmoothFn(fn, 2, 2.0, 2.5, 4.0, lambda ba, bb: (lo, hi),
                 f"0.5+0.4*sgn*|tanh({scale}(a+0.8b^2-0.4+{wiggle}sin({freq}b)))|^{power}")
    i, j = coords

    def closed(X):
        return _bump_link(scale * boundary(X[:, i - 1], X[:, j - 1]), power)

    return HCMInstance("classification2", Composite(g, (Leaf(i), Leaf(j))), d, l, A, closed,
                       "weak-margin aposteriori probability, p=2, K=2",
                       dict(d=d, l=l, A=A, coords=list(coords), scale=scale, power=power,
                            wiggle=wiggle, freq=freq))


def _highdim(d: int = 4, l: int = 5, A: float = 1.0, coords=(6, 17), scale: float = 0.5, power: float = 3.0,
             wiggle: float = 0.4, freq: float = 4.0):
    inst = _classification2(d=d, l=l, A=A, coords=coords, scale=scale, power=power, wiggle=wiggle, freq=freq)
    return HCMInstance("highdim", inst.node, d, l, A, inst.closed_form,
                       "classification2 embedded in d*l=20 ambient coordinates",
                       dict(d=d, l=l, A=A, coords=list(coords), scale=scale, power=power,
                            wiggle=wiggle, freq=freq))


def _realizable2(d: int = 2, l: int = 2, A: float = 1.0, coef=(0.5, 0.25, 0.1, 0.05)):
    """Bilinear aposteriori probability; it lies in every tensor spline space of degree >= 1."""
    c0, ca, cb, cab = coef

    def fn(a, b):
        return c0 + ca * a + cb * b + cab * a * b

    def enclose(ba, bb):
        v = [fn(x, y) for x in ba for y in bb]
        return min(v), max(v)

    g = SmoothFn(fn, 2, 2.0, max(1.0, abs(ca) + abs(cb) + 2 * abs(cab)), 1.0, enclose, "bilinear")
    return HCMInstance("realizable2", Composite(g, (Leaf(1), Leaf(2))), d, l, A,
                       lambda X: fn(X[:, 0], X[:, 1]),
                       "bilinear aposteriori probability realizable by every scaffold",
                       dict(d=d, l=l, A=A, coef=list(coef)))


def _identity(d: int = 1, l: int = 1, A: float = 1.0):
    g = SmoothFn(lambda a: a, 1, 2.0, 1.0, 1.0, lambda box: box, "a")
    return HCMInstance("identity", Composite(g, (Leaf(1),)), d, l, A, lambda X: X[:, 0],
                       "smooth identity wrapped around one leaf", dict(d=d, l=l, A=A))


def _constant(c: float = 0.3, d: int = 1, l: int = 1, A: float = 1.0):
    g = SmoothFn(lambda a: c + 0.0 * a, 1, 2.0, 1.0, abs(c), lambda box: (c, c), f"{c}")
    return HCMInstance("constant", Composite(g, (Leaf(1),)), d, l, A, lambda X: np.full(X.shape[0], c),
                       "constant target", dict(c=c, d=d, l=l, A=A))


_CATALOG = {
    "smooth1d": _smooth1d,
    "smooth2d": _smooth2d,
    "additive2": _additive2,
    "composition2": _composition2,
    "classification2": _classification2,
    "highdim": _highdim,
    "realizable2": _realizable2,
    "identity": _identity,
    "constant": _constant,
}


def get_instance(name: str, **params) -> HCMInstance:
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown HCM {name!r}; available: {sorted(_CATALOG)}") from None
    for key in ("coords", "coef"):
        if key in params:
            params[key] = tuple(params[key])
    return factory(**params)


def builtin_library() -> dict[str, HCMInstance]:
    return {name: factory() for name, factory in _CATALOG.items()}
