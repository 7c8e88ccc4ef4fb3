"""Global degrees of freedom, assembly, and linear solvers.

DoF layout: interior time-like facet moments are shared by the two adjacent
elements; boundary facet moments are constrained to the L2 projection of the
Dirichlet datum; bulk and bottom-trace moments are private to their element.
Global numbering is slab-contiguous, which makes the coupled system block
lower triangular over slabs (upwind terms only reach backward in time), so it
can be solved either monolithically or slab by slab with identical results.

Local matrices are produced through a reference-element cache: elements that
share a topology flag differ only by a per-axis dilation and translation, so
each class is built once on the unit square and rescaled per element with the
exact scaling laws of the operators (checked to 1e-12 in the tests).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import os
from collections.abc import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import local_vem
from .geometry import SpaceTimeMesh
from .local_vem import (
    FacetSpec,
    LocalDofSet,
    LocalElement,
    LocalMatrices,
    ProjectorSet,
    dof_layout,
    local_forms,
    upwind_blocks,
)
from .polybasis import (
    Interval,
    basis_1d,
    basis_2d,
    gauss_rule,
    moments,
    rect_rule,
    shift_matrix_1d,
)


class SolverError(RuntimeError):
    """Raised when a sparse factorization or solve fails; `where` names the
    slab index for slab-sequential solves, or "monolithic"."""

    def __init__(self, where: str, message: str):
        super().__init__(f"linear solve failed at {where}: {message}")
        self.where = where


# ---------------------------------------------------------------------------
# Problem data


@dataclasses.dataclass
class ProblemData:
    """Coefficients and data of the heat equation c_H u_t - nu u_xx = f.

    The ``*_moments`` hooks, when given, replace quadrature with exact
    integrals: ``f_moments(elem, nb)`` returns the raw integrals of f against
    the first ``nb`` bulk monomials; ``u0_moments(x_iv, basis)`` the raw
    integrals of the initial datum against a 1D basis on ``x_iv``;
    ``g_moments(x_pos, basis)`` the measure-normalized moments of the boundary
    datum at ``x_pos`` against a 1D time basis.
    """

    nu: float = 1.0
    c_H: float = 1.0
    f: Callable | None = None
    u0: Callable | None = None
    g: Callable | None = None
    f_moments: Callable | None = None
    u0_moments: Callable | None = None
    g_moments: Callable | None = None
    quad_n: int | None = None

    def bulk_integrals(self, elem: LocalElement, nb: int) -> np.ndarray | None:
        if self.f_moments is not None:
            return np.asarray(self.f_moments(elem, nb), dtype=float)
        if self.f is None:
            return None
        n = self.quad_n if self.quad_n is not None else elem.degree + 8
        rule = rect_rule(elem.x_iv, elem.t_iv, n)
        basis = basis_2d(elem.degree, elem.x_iv, elem.t_iv)
        return elem.area * moments(self.f, basis, rule)[:nb]

    def initial_integrals(self, x_iv: Interval, basis) -> np.ndarray | None:
        if self.u0_moments is not None:
            return np.asarray(self.u0_moments(x_iv, basis), dtype=float)
        if self.u0 is None:
            return None
        n = self.quad_n if self.quad_n is not None else basis.degree + 10
        rule = gauss_rule(n, x_iv)
        return x_iv.length * moments(self.u0, basis, rule)

    def boundary_moments(self, x_pos: float, basis) -> np.ndarray:
        if self.g_moments is not None:
            return np.asarray(self.g_moments(x_pos, basis), dtype=float)
        if self.g is None:
            return np.zeros(basis.dimension)
        n = self.quad_n if self.quad_n is not None else basis.degree + 10
        iv = Interval(basis.center[0] - basis.scale[0] / 2, basis.center[0] + basis.scale[0] / 2)
        rule = gauss_rule(n, iv)
        return moments(lambda t: self.g(np.full_like(t, x_pos), t), basis, rule)


# ---------------------------------------------------------------------------
# Global DoF map


@dataclasses.dataclass
class GlobalDofMap:
    mesh: SpaceTimeMesh
    local_elements: dict[int, LocalElement]
    layouts: dict[int, LocalDofSet]
    elem_indices: dict[int, np.ndarray]
    facet_offsets: dict[int, int]
    space_offsets: dict[int, int]
    slab_ranges: list[tuple[int, int]]
    n_total: int
    free_mask: np.ndarray
    boundary_facet_ids: list[int]

    @property
    def n_free(self) -> int:
        return int(np.sum(self.free_mask))


def local_element_of(mesh: SpaceTimeMesh, eid: int) -> LocalElement:
    e = mesh.elements[eid]
    lf = tuple(
        FacetSpec(f.t_iv, f.moment_degree, f.h_Fx) for f in mesh.left_facets(eid)
    )
    rf = tuple(
        FacetSpec(f.t_iv, f.moment_degree, f.h_Fx) for f in mesh.right_facets(eid)
    )
    return LocalElement(e.x_iv, e.t_iv, e.degree, lf, rf)


def build_dof_map(mesh: SpaceTimeMesh) -> GlobalDofMap:
    local_elements = {eid: local_element_of(mesh, eid) for eid in mesh.leaf_ids}
    layouts = {eid: dof_layout(le) for eid, le in local_elements.items()}

    slab_elems: list[list[int]] = [[] for _ in range(mesh.slab_count)]
    for eid in mesh.leaf_ids:
        slab_elems[mesh.elements[eid].slab].append(eid)
    slab_facets: list[list[int]] = [[] for _ in range(mesh.slab_count)]
    for f in mesh.time_facets:
        slab_facets[mesh.elements[f.owner].slab].append(f.id)

    bulk_offsets: dict[int, int] = {}
    space_offsets: dict[int, int] = {}
    facet_offsets: dict[int, int] = {}
    slab_ranges: list[tuple[int, int]] = []
    pos = 0
    for s in range(mesh.slab_count):
        start = pos
        for eid in sorted(slab_elems[s]):
            bulk_offsets[eid] = pos
            pos += layouts[eid].bulk_count
            space_offsets[eid] = pos
            pos += layouts[eid].space_count
        for fid in sorted(slab_facets[s]):
            facet_offsets[fid] = pos
            pos += mesh.time_facets[fid].moment_degree + 1
        slab_ranges.append((start, pos))
    n_total = pos

    elem_indices: dict[int, np.ndarray] = {}
    for eid, lay in layouts.items():
        idx = np.empty(lay.total, dtype=np.int64)
        idx[lay.bulk] = bulk_offsets[eid] + np.arange(lay.bulk_count)
        for k, f in enumerate(mesh.elem_time_facets(eid)):
            nm = f.moment_degree + 1
            idx[lay.facet(k)] = facet_offsets[f.id] + np.arange(nm)
        idx[lay.space] = space_offsets[eid] + np.arange(lay.space_count)
        elem_indices[eid] = idx

    free_mask = np.ones(n_total, dtype=bool)
    boundary = []
    for f in mesh.time_facets:
        if f.is_boundary:
            boundary.append(f.id)
            off = facet_offsets[f.id]
            free_mask[off : off + f.moment_degree + 1] = False

    return GlobalDofMap(
        mesh=mesh,
        local_elements=local_elements,
        layouts=layouts,
        elem_indices=elem_indices,
        facet_offsets=facet_offsets,
        space_offsets=space_offsets,
        slab_ranges=slab_ranges,
        n_total=n_total,
        free_mask=free_mask,
        boundary_facet_ids=boundary,
    )


# ---------------------------------------------------------------------------
# Reference-element cache


def _normalized_element(elem: LocalElement) -> LocalElement:
    """Map an element to the unit square, preserving the facet pattern."""
    unit = Interval(0.0, 1.0)
    t0, ht, hx = elem.t_iv.lo, elem.ht, elem.hx

    def norm_side(side):
        return tuple(
            FacetSpec(
                Interval((f.t_iv.lo - t0) / ht, (f.t_iv.hi - t0) / ht),
                f.moment_degree,
                f.h_Fx / hx,
            )
            for f in side
        )

    return LocalElement(unit, unit, elem.degree, norm_side(elem.left), norm_side(elem.right))


def _rescaled_local(ref: LocalMatrices, elem: LocalElement, nu: float, c_H: float) -> LocalMatrices:
    """Local matrices for ``elem`` from its class reference via scaling laws:
    all x-stiffness-type forms scale by ht/hx, the time pairing and upwind by
    hx, the projector matrices not at all."""
    hx, ht, area = elem.hx, elem.ht, elem.area
    g = ht / hx
    r = ref.ops
    ops = ProjectorSet(
        elem=elem,
        layout=r.layout,
        basis2=basis_2d(elem.degree, elem.x_iv, elem.t_iv),
        space_basis=basis_1d(elem.degree, elem.x_iv),
        facet_bases=tuple(
            basis_1d(f.moment_degree, f.t_iv) for f in elem.facets
        ),
        D=r.D,
        PiN=r.PiN,
        PiStar=r.PiStar,
        Pi0_bulk=r.Pi0_bulk,
        Pi0_facet=r.Pi0_facet,
        TraceB=r.TraceB,
        TBpoly=r.TBpoly,
        TTpoly=r.TTpoly,
        Kxx=g * r.Kxx,
        G2=area * r.G2,
        Dx=r.Dx / hx,
        Dt=r.Dt / ht,
    )
    return LocalMatrices(
        ops=ops,
        A_proj=g * ref.A_proj,
        S=g * ref.S,
        SC=g * ref.SC,
        Ah=(nu * g) * ref.Ah,
        Tmat=(c_H * hx) * ref.Tmat,
        U_self=(c_H * hx) * ref.U_self,
        M_bulk=area * ref.M_bulk,
        nu=nu,
        c_H=c_H,
    )


class ReferenceCache:
    """One from-scratch local build per topology class; every other element
    of the class gets exactly rescaled copies.

    Entries are keyed by the class signature (not the per-mesh flag integer),
    so one cache can be carried through a whole refinement study and builds
    accumulate only when genuinely new classes appear."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: dict[tuple, LocalMatrices] = {}

    @property
    def n_builds(self) -> int:
        return len(self._store)

    def local(self, elem: LocalElement, key: tuple, nu: float, c_H: float) -> LocalMatrices:
        if not self.enabled:
            return local_forms(elem, nu=nu, c_H=c_H)
        ref = self._store.get(key)
        if ref is None:
            ref = local_forms(_normalized_element(elem))
            self._store[key] = ref
        return _rescaled_local(ref, elem, nu, c_H)


def cached_local(
    cache: ReferenceCache,
    dof_map: GlobalDofMap,
    eid: int,
    nu: float = 1.0,
    c_H: float = 1.0,
) -> LocalMatrices:
    key = dof_map.mesh.topo_key(eid)
    return cache.local(dof_map.local_elements[eid], key, nu, c_H)


def _thread_count() -> int:
    value = os.environ.get("STVEM_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def _local_batch(
    cache: ReferenceCache, dof_map: GlobalDofMap, eids: list[int], nu: float, c_H: float
) -> dict[int, LocalMatrices]:
    workers = _thread_count()
    if workers == 1 or len(eids) < 4:
        return {eid: cached_local(cache, dof_map, eid, nu, c_H) for eid in eids}
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as ex:
        mats = list(ex.map(lambda e: cached_local(cache, dof_map, e, nu, c_H), eids))
    return dict(zip(eids, mats))


# ---------------------------------------------------------------------------
# Assembly


@dataclasses.dataclass
class AssembledSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    known: np.ndarray  # prescribed values on the constrained DoFs
    dof_map: GlobalDofMap


def assemble(
    mesh: SpaceTimeMesh,
    dof_map: GlobalDofMap,
    problem: ProblemData,
    cache: ReferenceCache | None = None,
) -> AssembledSystem:
    cache = cache if cache is not None else ReferenceCache(enabled=True)
    n = dof_map.n_total
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    b = np.zeros(n)

    def add_block(ridx: np.ndarray, cidx: np.ndarray, block: np.ndarray) -> None:
        rows.append(np.repeat(ridx, len(cidx)))
        cols.append(np.tile(cidx, len(ridx)))
        vals.append(block.ravel())

    # facets grouped by the slab of the element above them
    facets_above: dict[int, list] = {}
    for sf in mesh.space_facets:
        facets_above.setdefault(sf.above_elem, []).append(sf)

    slab_elems: list[list[int]] = [[] for _ in range(mesh.slab_count)]
    for eid in mesh.leaf_ids:
        slab_elems[mesh.elements[eid].slab].append(eid)

    prev: dict[int, LocalMatrices] = {}
    for s in range(mesh.slab_count):
        eids = sorted(slab_elems[s])
        current = _local_batch(cache, dof_map, eids, problem.nu, problem.c_H)
        for eid in eids:
            lm = current[eid]
            idx = dof_map.elem_indices[eid]
            add_block(idx, idx, lm.Ah + lm.Tmat)
            fints = problem.bulk_integrals(lm.elem, lm.layout.bulk_count)
            if fints is not None:
                b[idx] += lm.load_vector(fints)
            for sf in facets_above.get(eid, ()):
                minus_id = sf.below_elem
                if minus_id is None:
                    ops_minus = None
                else:
                    lm_minus = current.get(minus_id) or prev.get(minus_id)
                    if lm_minus is None:  # below element in an older slab
                        lm_minus = cached_local(
                            cache, dof_map, minus_id, problem.nu, problem.c_H
                        )
                    ops_minus = lm_minus.ops
                ub = upwind_blocks(sf.x_iv, lm.ops, ops_minus, problem.c_H)
                add_block(idx, idx, ub.self_block)
                if minus_id is not None:
                    add_block(idx, dof_map.elem_indices[minus_id], ub.couple_block)
                else:
                    ex_basis = basis_1d(lm.elem.degree, sf.x_iv)
                    u0_ints = problem.initial_integrals(sf.x_iv, ex_basis)
                    if u0_ints is not None:
                        W = shift_matrix_1d(lm.ops.space_basis, ex_basis)
                        b[idx] += problem.c_H * (lm.ops.TraceB.T @ (W.T @ u0_ints))
        prev = current

    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()

    known = np.zeros(n)
    for fid in dof_map.boundary_facet_ids:
        f = mesh.time_facets[fid]
        fb = basis_1d(f.moment_degree, f.t_iv)
        off = dof_map.facet_offsets[fid]
        known[off : off + f.moment_degree + 1] = problem.boundary_moments(f.x_pos, fb)

    return AssembledSystem(matrix=A, rhs=b, known=known, dof_map=dof_map)


# ---------------------------------------------------------------------------
# Solvers


def solve_monolithic(system: AssembledSystem) -> np.ndarray:
    free = np.flatnonzero(system.dof_map.free_mask)
    x = system.known.copy()
    rhs = system.rhs - system.matrix @ x
    A_ff = system.matrix[free][:, free].tocsc()
    try:
        x[free] = spla.splu(A_ff).solve(rhs[free])
    except RuntimeError as exc:
        raise SolverError("monolithic", str(exc)) from exc
    return x


def solve_by_slabs(system: AssembledSystem) -> np.ndarray:
    dof_map = system.dof_map
    x = system.known.copy()
    A = system.matrix
    for s, (lo, hi) in enumerate(dof_map.slab_ranges):
        free_s = lo + np.flatnonzero(dof_map.free_mask[lo:hi])
        if free_s.size == 0:
            continue
        A_rows = A[free_s]
        rhs = system.rhs[free_s] - A_rows @ x
        A_ss = A_rows[:, free_s].tocsc()
        try:
            x[free_s] = spla.splu(A_ss).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"slab {s}", str(exc)) from exc
    return x


def dump_slab_systems(system: AssembledSystem, directory) -> list[str]:
    """Write each slab's free-DoF submatrix as 'row col value' text files."""
    import pathlib

    out = pathlib.Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s, (lo, hi) in enumerate(system.dof_map.slab_ranges):
        free_s = lo + np.flatnonzero(system.dof_map.free_mask[lo:hi])
        block = system.matrix[free_s][:, free_s].tocoo()
        path = out / f"slab_{s}.txt"
        with open(path, "w") as fh:
            fh.write(f"# slab {s}: {block.shape[0]} x {block.shape[1]}\n")
            for i, j, v in zip(block.row, block.col, block.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
        paths.append(str(path))
    return paths


# ---------------------------------------------------------------------------
# Driver


@dataclasses.dataclass
class Solution:
    mesh: SpaceTimeMesh
    dof_map: GlobalDofMap
    problem: ProblemData
    values: np.ndarray
    cache: ReferenceCache

    @property
    def n_dofs(self) -> int:
        return self.dof_map.n_free

    def element_dofs(self, eid: int) -> np.ndarray:
        return self.values[self.dof_map.elem_indices[eid]]

    def local(self, eid: int) -> LocalMatrices:
        return cached_local(
            self.cache, self.dof_map, eid, self.problem.nu, self.problem.c_H
        )


def assemble_and_solve(
    mesh: SpaceTimeMesh,
    problem: ProblemData,
    mode: str = "slab",
    cache_enabled: bool = True,
    dump_dir=None,
    cache: ReferenceCache | None = None,
) -> Solution:
    dof_map = build_dof_map(mesh)
    if cache is None:
        cache = ReferenceCache(enabled=cache_enabled)
    system = assemble(mesh, dof_map, problem, cache)
    if dump_dir is not None:
        dump_slab_systems(system, dump_dir)
    if mode == "monolithic":
        x = solve_monolithic(system)
    elif mode == "slab":
        x = solve_by_slabs(system)
    else:
        raise ValueError(f"unknown solve mode: {mode!r}")
    return Solution(mesh=mesh, dof_map=dof_map, problem=problem, values=x, cache=cache)


# ---------------------------------------------------------------------------
# Symmetric energy system (used by the error functional of elliptic type)


@dataclasses.dataclass
class EnergySolve:
    values: np.ndarray
    used_fallback: bool


def assemble_energy_matrix(
    dof_map: GlobalDofMap, cache: ReferenceCache, nu: float = 1.0
) -> sp.csr_matrix:
    """The symmetric form sum_K [nu-weighted x-stiffness + stabilization]."""
    n = dof_map.n_total
    rows, cols, vals = [], [], []
    for eid in sorted(dof_map.local_elements):
        lm = cached_local(cache, dof_map, eid, nu, 1.0)
        idx = dof_map.elem_indices[eid]
        rows.append(np.repeat(idx, len(idx)))
        cols.append(np.tile(idx, len(idx)))
        vals.append(lm.Ah.ravel())
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()


def solve_energy_system(
    matrix: sp.csr_matrix, free_mask: np.ndarray, rhs: np.ndarray
) -> EnergySolve:
    """Solve the SPD energy system with homogeneous constrained DoFs; fall
    back to a least-squares solve (flagged) if the factorization fails."""
    free = np.flatnonzero(free_mask)
    x = np.zeros(matrix.shape[0])
    A_ff = matrix[free][:, free].tocsc()
    try:
        x[free] = spla.splu(A_ff).solve(rhs[free])
        return EnergySolve(values=x, used_fallback=False)
    except RuntimeError:
        sol = spla.lsqr(A_ff, rhs[free], atol=1e-14, btol=1e-14)
        x[free] = sol[0]
        return EnergySolve(values=x, used_fallback=True)
