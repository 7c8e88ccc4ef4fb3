"""Scaled polynomial bases, quadrature rules, and moment computation.

Bases are monomials in the per-axis normalized coordinates
((x - x_c)/h_x)^a ((t - t_c)/h_t)^b, which makes every basis (and hence every
moment-type degree of freedom built on it) invariant under translations and
per-axis dilations of its domain.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

GRADING_RATIO = 0.15
GRADING_LAYERS = 30


@dataclasses.dataclass(frozen=True)
class Interval:
    """A nonempty open interval (lo, hi)."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"empty interval ({self.lo}, {self.hi})")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)


def exponents_1d(p: int) -> tuple[tuple[int, ...], ...]:
    return tuple((a,) for a in range(p + 1))


def exponents_2d(p: int) -> tuple[tuple[int, ...], ...]:
    """Graded ordering (by total degree, x-exponent descending within degree).

    The first dim P_{p-1} entries are exactly the P_{p-1} exponents.
    """
    return tuple((d - b, b) for d in range(p + 1) for b in range(d + 1))


def dim_poly_2d(p: int) -> int:
    return (p + 1) * (p + 2) // 2


@dataclasses.dataclass(frozen=True)
class ScaledMonomialBasis:
    """Monomial basis in centered, per-axis scaled coordinates."""

    degree: int
    center: tuple[float, ...]
    scale: tuple[float, ...]
    exponents: tuple[tuple[int, ...], ...]

    @property
    def dimension(self) -> int:
        return len(self.exponents)

    @property
    def ndim(self) -> int:
        return len(self.center)

    def local_coords(self, *coords: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(
            (np.asarray(c, dtype=float) - c0) / s
            for c, c0, s in zip(coords, self.center, self.scale)
        )

    def eval(self, *coords: np.ndarray) -> np.ndarray:
        """Values of all basis functions at the given points, shape (npts, dim)."""
        loc = np.broadcast_arrays(*(np.atleast_1d(c) for c in self.local_coords(*coords)))
        npts = loc[0].shape[0]
        vals = np.ones((npts, self.dimension))
        exps = np.array(self.exponents)
        for axis in range(self.ndim):
            vals *= loc[axis].reshape(npts, 1) ** exps[:, axis]
        return vals

    def index_of(self, exp: tuple[int, ...]) -> int:
        return self.exponents.index(exp)

    def deriv_matrix(self, axis: int) -> np.ndarray:
        """Matrix C with d_axis m_j = sum_i C[i, j] m_i (same basis)."""
        lookup = {e: i for i, e in enumerate(self.exponents)}
        C = np.zeros((self.dimension, self.dimension))
        for j, e in enumerate(self.exponents):
            k = e[axis]
            if k > 0:
                tgt = list(e)
                tgt[axis] = k - 1
                C[lookup[tuple(tgt)], j] = k / self.scale[axis]
        return C

    def monomial_integrals(self) -> np.ndarray:
        """Exact integrals of each basis function over its own domain."""
        out = np.ones(self.dimension)
        for j, e in enumerate(self.exponents):
            for axis in range(self.ndim):
                out[j] *= self.scale[axis] * _centered_power_integral(e[axis])
        return out

    def gram(self) -> np.ndarray:
        """Exact L2 Gram matrix of the basis over its own domain."""
        n = self.dimension
        G = np.ones((n, n))
        for axis in range(self.ndim):
            exps = np.array([e[axis] for e in self.exponents])
            s = exps[:, None] + exps[None, :]
            G *= self.scale[axis] * _centered_power_integral_array(s)
        return G


def _centered_power_integral(m: int) -> float:
    """Integral of s^m over (-1/2, 1/2)."""
    if m % 2:
        return 0.0
    return 0.5**m / (m + 1)


def _centered_power_integral_array(m: np.ndarray) -> np.ndarray:
    out = 0.5**m / (m + 1)
    out[m % 2 == 1] = 0.0
    return out


def basis_1d(p: int, iv: Interval) -> ScaledMonomialBasis:
    if p < 0:
        raise ValueError("p must be >= 0")
    return ScaledMonomialBasis(
        degree=p,
        center=(iv.center,),
        scale=(iv.length,),
        exponents=exponents_1d(p),
    )


def basis_2d(p: int, x_iv: Interval, t_iv: Interval) -> ScaledMonomialBasis:
    if p < 1:
        raise ValueError("p must be >= 1")
    return ScaledMonomialBasis(
        degree=p,
        center=(x_iv.center, t_iv.center),
        scale=(x_iv.length, t_iv.length),
        exponents=exponents_2d(p),
    )


def shift_matrix_1d(src: ScaledMonomialBasis, dst: ScaledMonomialBasis) -> np.ndarray:
    """Matrix M with src_j = sum_i M[i, j] dst_i for 1D monomial bases.

    Requires dst.degree >= src.degree. With s the dst local coordinate,
    the src coordinate is u0 + u1*s, and src_j = (u0 + u1 s)^j expands
    binomially.
    """
    if dst.degree < src.degree:
        raise ValueError("target basis degree too low for exact expansion")
    u1 = dst.scale[0] / src.scale[0]
    u0 = (dst.center[0] - src.center[0]) / src.scale[0]
    M = np.zeros((dst.dimension, src.dimension))
    for j in range(src.dimension):
        for i in range(j + 1):
            M[i, j] = math.comb(j, i) * u0 ** (j - i) * u1**i
    return M


@dataclasses.dataclass(frozen=True)
class QuadratureRule:
    """Nodes (shape (n,) in 1D or (n, 2) in 2D) and positive weights."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def measure(self) -> float:
        return float(np.sum(self.weights))

    def integrate(self, f: Callable | np.ndarray) -> float:
        vals = self._values(f)
        return float(self.weights @ vals)

    def _values(self, f: Callable | np.ndarray) -> np.ndarray:
        if callable(f):
            if self.nodes.ndim == 1:
                return np.asarray(f(self.nodes), dtype=float)
            return np.asarray(f(self.nodes[:, 0], self.nodes[:, 1]), dtype=float)
        vals = np.asarray(f, dtype=float)
        if vals.shape[0] != self.nodes.shape[0]:
            raise ValueError("value array does not match rule nodes")
        return vals


def gauss_rule(n: int, iv: Interval) -> QuadratureRule:
    """Gauss-Legendre rule with n nodes, exact for degree <= 2n-1 on iv."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * iv.length
    return QuadratureRule(nodes=iv.center + half * x, weights=half * w)


def graded_rule(
    iv: Interval,
    singular_end: str = "lo",
    layers: int = GRADING_LAYERS,
    n: int = 10,
    ratio: float = GRADING_RATIO,
) -> QuadratureRule:
    """Composite Gauss rule on geometrically shrinking subintervals.

    Subinterval lengths shrink by `ratio` toward `singular_end`, and each
    graded layer is integrated by a two-panel composite Gauss rule (halving
    the per-layer span keeps the per-layer error far below the target for
    endpoint singularities such as t^{-0.45}). layers=1 reduces to a plain
    Gauss rule on iv.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if singular_end not in ("lo", "hi"):
        raise ValueError("singular_end must be 'lo' or 'hi'")
    offsets = [iv.length * ratio**k for k in range(layers - 1, 0, -1)]
    if singular_end == "lo":
        raw = [iv.lo] + [iv.lo + d for d in offsets] + [iv.hi]
    else:
        raw = [iv.lo] + [iv.hi - d for d in reversed(offsets)] + [iv.hi]
    # drop cuts that collapse at floating-point resolution near the endpoint
    # (panels a few ulps wide put Gauss nodes onto the singular point itself)
    eps = np.finfo(float).eps
    layer_cuts = [raw[0]]
    for c in raw[1:]:
        prev = layer_cuts[-1]
        if c - prev > 64.0 * eps * max(abs(prev), abs(c)):
            layer_cuts.append(c)
    if layer_cuts[-1] < iv.hi:
        layer_cuts[-1] = iv.hi
    if layers == 1:
        cuts = layer_cuts
    else:
        cuts = [layer_cuts[0]]
        for a, b in zip(layer_cuts[:-1], layer_cuts[1:]):
            mid = 0.5 * (a + b)
            if a < mid < b:
                cuts.append(mid)
            cuts.append(b)
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        sub = gauss_rule(n, Interval(a, b))
        nodes.append(sub.nodes)
        weights.append(sub.weights)
    return QuadratureRule(nodes=np.concatenate(nodes), weights=np.concatenate(weights))


def tensor_rule(rule_x: QuadratureRule, rule_t: QuadratureRule) -> QuadratureRule:
    """Tensor product of two 1D rules; nodes ordered x-major, t-minor."""
    xs, ts = rule_x.nodes, rule_t.nodes
    wx, wt = rule_x.weights, rule_t.weights
    X, T = np.meshgrid(xs, ts, indexing="ij")
    W = np.outer(wx, wt)
    return QuadratureRule(
        nodes=np.column_stack([X.ravel(), T.ravel()]),
        weights=W.ravel(),
    )


def rect_rule(x_iv: Interval, t_iv: Interval, nx: int, nt: int | None = None) -> QuadratureRule:
    return tensor_rule(gauss_rule(nx, x_iv), gauss_rule(nt or nx, t_iv))


def moments(
    f: Callable | np.ndarray,
    basis: ScaledMonomialBasis,
    rule: QuadratureRule,
) -> np.ndarray:
    """Measure-normalized moments (1/|D|) integral_D f m_i for each m_i."""
    fvals = rule._values(f)
    if rule.nodes.ndim == 1:
        bvals = basis.eval(rule.nodes)
    else:
        bvals = basis.eval(rule.nodes[:, 0], rule.nodes[:, 1])
    return (rule.weights * fvals) @ bvals / rule.measure
