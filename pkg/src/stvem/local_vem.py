"""Element-local virtual element machinery.

Functions in the local space are known only through their moments: bulk
moments against P_{p-1}(K), per-time-like-facet moments against P_{p_k}(F),
and bottom-trace moments against P_p(Kx). Everything the scheme needs is
expressed through three computable projectors assembled here as matrices
acting on DoF vectors:

* ``PiN`` - the energy-type projector onto P_p(K), defined by matching
  x-stiffness pairings (realized through integration by parts, which only
  touches bulk and facet moments), bulk pairings against time-only
  polynomials, and the bottom average.
* ``PiStar`` - the time-derivative-compatible projector onto P_p(K), defined
  by bulk moments up to degree p-1 and bottom-trace moments up to degree p.
* ``Pi0`` - plain L2 projectors onto P_{p-1}(K) (bulk) and onto each facet's
  polynomial space.

Polynomial coefficient vectors always refer to the element's scaled monomial
basis (graded ordering), so the matrices are invariant under per-axis
dilation and translation of the element; measure factors enter only through
explicit |K|, |F|, |Kx| weights. That invariance is what the reference-element
cache exploits.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .polybasis import (
    Interval,
    ScaledMonomialBasis,
    basis_1d,
    basis_2d,
    gauss_rule,
    moments,
    shift_matrix_1d,
    tensor_rule,
)

# number of from-scratch local operator builds (used to verify that the
# reference-element cache reduces work to one build per topology class)
N_LOCAL_BUILDS = 0


@dataclasses.dataclass(frozen=True)
class FacetSpec:
    """One time-like facet on a side of an element."""

    t_iv: Interval
    moment_degree: int
    h_Fx: float


@dataclasses.dataclass(frozen=True)
class LocalElement:
    """Element geometry plus the facet partition of its two straight sides."""

    x_iv: Interval
    t_iv: Interval
    degree: int
    left: tuple[FacetSpec, ...]
    right: tuple[FacetSpec, ...]

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValueError("element degree must be >= 1")
        for side in (self.left, self.right):
            if not side:
                raise ValueError("each side needs at least one facet")
            cover = sum(f.t_iv.length for f in side)
            if abs(cover - self.t_iv.length) > 1e-10 * self.t_iv.length:
                raise ValueError("facets do not cover the element side")
            for f in side:
                if f.moment_degree < self.degree:
                    raise ValueError(
                        "facet moment degree below element degree violates the "
                        "maximum strategy"
                    )

    @property
    def hx(self) -> float:
        return self.x_iv.length

    @property
    def ht(self) -> float:
        return self.t_iv.length

    @property
    def area(self) -> float:
        return self.hx * self.ht

    @property
    def facets(self) -> tuple[FacetSpec, ...]:
        return self.left + self.right


def square_element(degree: int, facet_degree: int | None = None) -> LocalElement:
    """Unit-square element with one facet per side (convenience for tests)."""
    iv = Interval(0.0, 1.0)
    fd = degree if facet_degree is None else facet_degree
    f = FacetSpec(iv, fd, 1.0)
    return LocalElement(iv, iv, degree, (f,), (f,))


@dataclasses.dataclass(frozen=True)
class LocalDofSet:
    """Index layout of an element's DoF vector: bulk moments, then each
    time-like facet's moments (left side bottom-to-top, then right side),
    then the bottom-trace moments."""

    degree: int
    bulk_count: int
    facet_counts: tuple[int, ...]
    space_count: int

    @property
    def total(self) -> int:
        return self.bulk_count + sum(self.facet_counts) + self.space_count

    @property
    def bulk(self) -> slice:
        return slice(0, self.bulk_count)

    def facet(self, k: int) -> slice:
        start = self.bulk_count + sum(self.facet_counts[:k])
        return slice(start, start + self.facet_counts[k])

    @property
    def space(self) -> slice:
        return slice(self.total - self.space_count, self.total)


def dof_layout(elem: LocalElement) -> LocalDofSet:
    p = elem.degree
    return LocalDofSet(
        degree=p,
        bulk_count=p * (p + 1) // 2,
        facet_counts=tuple(f.moment_degree + 1 for f in elem.facets),
        space_count=p + 1,
    )


def dof_evaluate(f, elem: LocalElement, layout: LocalDofSet | None = None, n=None):
    """Measure-normalized moments of a smooth function: its DoF vector.

    Quadrature-based; `n` is the Gauss node count per axis (default high
    enough that smooth data is integrated to near machine precision).
    """
    layout = layout or dof_layout(elem)
    p = elem.degree
    n = n if n is not None else max(p + 10, 14)
    dofs = np.zeros(layout.total)
    basis2 = basis_2d(p, elem.x_iv, elem.t_iv)
    rule2 = tensor_rule(gauss_rule(n, elem.x_iv), gauss_rule(n, elem.t_iv))
    dofs[layout.bulk] = moments(f, basis2, rule2)[: layout.bulk_count]
    for k, fc in enumerate(elem.facets):
        x_pos = elem.x_iv.lo if k < len(elem.left) else elem.x_iv.hi
        fb = basis_1d(fc.moment_degree, fc.t_iv)
        rule = gauss_rule(n, fc.t_iv)
        dofs[layout.facet(k)] = moments(lambda t: f(np.full_like(t, x_pos), t), fb, rule)
    sb = basis_1d(p, elem.x_iv)
    rule = gauss_rule(n, elem.x_iv)
    a_t = elem.t_iv.lo
    dofs[layout.space] = moments(lambda x: f(x, np.full_like(x, a_t)), sb, rule)
    return dofs


@dataclasses.dataclass
class ProjectorSet:
    """DoF-to-polynomial-coefficient maps plus the bases they refer to."""

    elem: LocalElement
    layout: LocalDofSet
    basis2: ScaledMonomialBasis
    space_basis: ScaledMonomialBasis
    facet_bases: tuple[ScaledMonomialBasis, ...]
    D: np.ndarray  # DoF values of the P_p monomial basis
    PiN: np.ndarray
    PiStar: np.ndarray
    Pi0_bulk: np.ndarray
    Pi0_facet: tuple[np.ndarray, ...]
    TraceB: np.ndarray  # DoFs -> bottom-trace coefficients in space basis
    TBpoly: np.ndarray  # P_p coefficients -> bottom-trace coefficients
    TTpoly: np.ndarray  # P_p coefficients -> top-trace coefficients
    Kxx: np.ndarray  # x-stiffness Gram of the P_p basis
    G2: np.ndarray  # L2 Gram of the P_p basis (with measure)
    Dx: np.ndarray
    Dt: np.ndarray


def _trace_maps(basis2: ScaledMonomialBasis) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient maps from P_p(K) to its bottom/top traces in the space
    basis (the scaled x-monomials of the element)."""
    p = basis2.degree
    dim = basis2.dimension
    tb = np.zeros((p + 1, dim))
    tt = np.zeros((p + 1, dim))
    for j, (a, b) in enumerate(basis2.exponents):
        tb[a, j] = (-0.5) ** b
        tt[a, j] = 0.5**b
    return tb, tt


def build_projectors(elem: LocalElement) -> ProjectorSet:
    """Assemble D, PiN, PiStar, Pi0 and the trace maps for one element."""
    p = elem.degree
    layout = dof_layout(elem)
    basis2 = basis_2d(p, elem.x_iv, elem.t_iv)
    dim = basis2.dimension
    nb = layout.bulk_count
    area, hx = elem.area, elem.hx

    G2 = basis2.gram()
    G2n = G2 / area
    Dx = basis2.deriv_matrix(0)
    Dt = basis2.deriv_matrix(1)
    Kxx = Dx.T @ G2 @ Dx

    space_basis = basis_1d(p, elem.x_iv)
    Gs_n = space_basis.gram() / hx
    TBpoly, TTpoly = _trace_maps(basis2)

    t_basis_full = basis_1d(p, elem.t_iv)
    facet_bases = []
    facet_shift = []  # tau_K^b expansions in each facet basis
    facet_xi = []  # side coordinate (-1/2 left, +1/2 right)
    for k, fc in enumerate(elem.facets):
        fb = basis_1d(fc.moment_degree, fc.t_iv)
        facet_bases.append(fb)
        facet_shift.append(shift_matrix_1d(t_basis_full, fb))
        facet_xi.append(-0.5 if k < len(elem.left) else 0.5)

    # DoF values of the monomials: D[i, j] = dof_i(m_j)
    exps = np.array(basis2.exponents)
    a_exp, b_exp = exps[:, 0], exps[:, 1]
    D = np.zeros((layout.total, dim))
    D[layout.bulk] = G2n[:nb]
    for k, fb in enumerate(facet_bases):
        GFn = fb.gram() / fb.scale[0]
        traces = facet_shift[k][:, b_exp] * facet_xi[k] ** a_exp  # coeffs of m_j|_F
        D[layout.facet(k)] = GFn @ traces
    D[layout.space] = Gs_n @ TBpoly

    # PiN: x-stiffness rows (by parts), time-only bulk rows, bottom average
    GN = np.zeros((dim, dim))
    BN = np.zeros((dim, layout.total))
    row = 0
    Dxx = Dx @ Dx
    for i in range(dim):
        if a_exp[i] == 0:
            continue
        GN[row] = Kxx[i]
        BN[row, layout.bulk] = -area * Dxx[:nb, i]
        for k, fc in enumerate(elem.facets):
            n_out = -1.0 if k < len(elem.left) else 1.0
            # coefficients of (d_x m_i)|_F as powers of tau_K
            c = np.zeros(p + 1)
            np.add.at(c, b_exp, Dx[:, i] * facet_xi[k] ** a_exp)
            BN[row, layout.facet(k)] += n_out * fc.t_iv.length * (facet_shift[k] @ c)
        row += 1
    for c_pow in range(p):
        i = basis2.index_of((0, c_pow))
        GN[row] = area * G2n[i]
        BN[row, layout.bulk.start + i] = area
        row += 1
    smean = space_basis.monomial_integrals() / hx
    GN[row] = hx * (smean @ TBpoly)
    BN[row, layout.space.start] = hx
    assert row + 1 == dim
    PiN = np.linalg.solve(GN, BN)

    # PiStar: bulk moments up to p-1 plus bottom-trace moments up to p
    GM = np.zeros((dim, dim))
    BM = np.zeros((dim, layout.total))
    GM[:nb] = area * G2n[:nb]
    BM[:nb, layout.bulk] = area * np.eye(nb)
    GM[nb:] = hx * (Gs_n @ TBpoly)
    BM[nb:, layout.space] = hx * np.eye(p + 1)
    PiStar = np.linalg.solve(GM, BM)

    # plain L2 projectors read directly off the moments
    Pi0_bulk = np.zeros((nb, layout.total))
    Pi0_bulk[:, layout.bulk] = np.linalg.inv(G2n[:nb, :nb])
    Pi0_facet = []
    for k, fb in enumerate(facet_bases):
        GFn = fb.gram() / fb.scale[0]
        block = np.zeros((layout.facet_counts[k], layout.total))
        block[:, layout.facet(k)] = np.linalg.inv(GFn)
        Pi0_facet.append(block)
    TraceB = np.zeros((p + 1, layout.total))
    TraceB[:, layout.space] = np.linalg.inv(Gs_n)

    return ProjectorSet(
        elem=elem,
        layout=layout,
        basis2=basis2,
        space_basis=space_basis,
        facet_bases=tuple(facet_bases),
        D=D,
        PiN=PiN,
        PiStar=PiStar,
        Pi0_bulk=Pi0_bulk,
        Pi0_facet=tuple(Pi0_facet),
        TraceB=TraceB,
        TBpoly=TBpoly,
        TTpoly=TTpoly,
        Kxx=Kxx,
        G2=G2,
        Dx=Dx,
        Dt=Dt,
    )


def build_PiN(elem: LocalElement, layout: LocalDofSet | None = None) -> np.ndarray:
    return build_projectors(elem).PiN


def build_PiStar(elem: LocalElement, layout: LocalDofSet | None = None) -> np.ndarray:
    return build_projectors(elem).PiStar


def build_Pi0(elem: LocalElement, layout: LocalDofSet | None = None):
    ops = build_projectors(elem)
    return ops.Pi0_bulk, ops.Pi0_facet


@dataclasses.dataclass
class LocalMatrices:
    """All element matrices of the discrete bilinear form (rows = test)."""

    ops: ProjectorSet
    A_proj: np.ndarray  # x-stiffness of the PiN projections
    S: np.ndarray  # raw stabilization (SPD on the whole DoF space)
    SC: np.ndarray  # stabilization on the PiN complement
    Ah: np.ndarray  # nu * (A_proj + SC)
    Tmat: np.ndarray  # time-derivative pairing c_H (dt PiStar u, v)
    U_self: np.ndarray  # whole-bottom upwind self block
    M_bulk: np.ndarray  # bulk mass matrix of P_{p-1}(K)
    nu: float
    c_H: float

    @property
    def elem(self) -> LocalElement:
        return self.ops.elem

    @property
    def layout(self) -> LocalDofSet:
        return self.ops.layout

    def load_vector(self, f_bulk_integrals: np.ndarray) -> np.ndarray:
        """Load entries (f, Pi0_{p-1} phi_i)_K from the raw integrals
        of f against the bulk basis."""
        return self.ops.Pi0_bulk.T @ f_bulk_integrals


def local_forms(
    elem: LocalElement,
    layout: LocalDofSet | None = None,
    nu: float = 1.0,
    c_H: float = 1.0,
    ops: ProjectorSet | None = None,
) -> LocalMatrices:
    global N_LOCAL_BUILDS
    N_LOCAL_BUILDS += 1
    if ops is None:
        ops = build_projectors(elem)
    layout = ops.layout
    p = elem.degree
    nb = layout.bulk_count
    hx, ht = elem.hx, elem.ht

    A_proj = ops.PiN.T @ ops.Kxx @ ops.PiN

    S = p**2 / hx**2 * (ops.Pi0_bulk.T @ ops.G2[:nb, :nb] @ ops.Pi0_bulk)
    for k, fc in enumerate(elem.facets):
        GF = ops.facet_bases[k].gram()
        S += p / fc.h_Fx * (ops.Pi0_facet[k].T @ GF @ ops.Pi0_facet[k])
    Gs = ops.space_basis.gram()
    S += p * ht / hx**2 * (ops.TraceB.T @ Gs @ ops.TraceB)

    comp = np.eye(layout.total) - ops.D @ ops.PiN
    SC = comp.T @ S @ comp
    Ah = nu * (A_proj + SC)

    Tmat = np.zeros((layout.total, layout.total))
    Tmat[layout.bulk] = c_H * elem.area * (ops.Dt @ ops.PiStar)[:nb]

    U_self = c_H * (ops.TraceB.T @ Gs @ (ops.TBpoly @ ops.PiStar))

    return LocalMatrices(
        ops=ops,
        A_proj=A_proj,
        S=S,
        SC=SC,
        Ah=Ah,
        Tmat=Tmat,
        U_self=U_self,
        M_bulk=ops.G2[:nb, :nb],
        nu=nu,
        c_H=c_H,
    )


@dataclasses.dataclass
class UpwindBlocks:
    """Contributions of one space-like facet Ex (test side: the element above).

    self_block: c_H (PiStar u|K+ at the bottom time, v trace)_{Ex}
    couple_block: -c_H (PiStar u|K- at its top time, v trace)_{Ex}, None at t=0
    load: c_H (u0, v trace)_{Ex}, None unless t=0 with u0 given
    """

    self_block: np.ndarray
    couple_block: np.ndarray | None
    load: np.ndarray | None


def upwind_blocks(
    x_iv: Interval,
    plus: ProjectorSet,
    minus: ProjectorSet | None,
    c_H: float = 1.0,
    u0=None,
    n_quad: int | None = None,
) -> UpwindBlocks:
    """Upwind matrices for a space-like facet with x-extent ``x_iv``.

    ``plus`` is the element above the facet (test side), ``minus`` the one
    below, or None on the initial-time boundary, where ``u0`` (a callable)
    feeds the load instead.
    """
    p_plus = plus.elem.degree
    ex_deg = p_plus if minus is None else max(p_plus, minus.elem.degree)
    ex_basis = basis_1d(ex_deg, x_iv)
    Gex = ex_basis.gram()
    Wp = shift_matrix_1d(plus.space_basis, ex_basis)
    trace_plus = plus.TBpoly @ plus.PiStar
    test_map = plus.TraceB.T @ Wp.T @ Gex

    self_block = c_H * (test_map @ (Wp @ trace_plus))
    couple_block = None
    load = None
    if minus is not None:
        Wm = shift_matrix_1d(minus.space_basis, ex_basis)
        trace_minus = minus.TTpoly @ minus.PiStar
        couple_block = -c_H * (test_map @ (Wm @ trace_minus))
    elif u0 is not None:
        n = n_quad if n_quad is not None else max(p_plus + 10, 14)
        rule = gauss_rule(n, x_iv)
        u0_ints = x_iv.length * moments(u0, ex_basis, rule)
        load = c_H * (plus.TraceB.T @ (Wp.T @ u0_ints))
    return UpwindBlocks(self_block, couple_block, load)
