"""Prismatic space-time meshes with hanging facets.

Elements are axis-aligned boxes (x-interval) x (t-interval). Local refinement
splits an element into four congruent children without re-meshing neighbors,
so element sides may be covered by several time-like facets (hanging facets).
The mesh also maintains the two bookkeeping labels that make assembly cheap:
time-slab indices (maximal bands no element straddles) and topology flags
(equivalence classes up to per-axis dilation and translation, plus degrees).
"""

from __future__ import annotations

import dataclasses
from bisect import bisect_right

from .polybasis import Interval

REL_TOL = 1e-12


@dataclasses.dataclass
class Element:
    id: int
    x_iv: Interval
    t_iv: Interval
    degree: int
    parent: int | None = None
    children: tuple[int, ...] = ()
    slab: int = -1
    topo_flag: int = -1

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
    def is_leaf(self) -> bool:
        return not self.children


@dataclasses.dataclass
class TimeLikeFacet:
    """Facet at fixed x, extended in time.

    The facet normal n_F points in +x when `left_elem` exists (interior facets
    and right-boundary facets), in -x otherwise (left-boundary facets), so it
    is always outward for boundary facets.
    """

    id: int
    x_pos: float
    t_iv: Interval
    left_elem: int | None
    right_elem: int | None
    moment_degree: int = -1
    h_Fx: float = 0.0

    @property
    def is_boundary(self) -> bool:
        return self.left_elem is None or self.right_elem is None

    @property
    def owner(self) -> int:
        if self.left_elem is not None:
            return self.left_elem
        assert self.right_elem is not None
        return self.right_elem

    @property
    def normal_sign(self) -> int:
        return 1 if self.left_elem is not None else -1


@dataclasses.dataclass
class SpaceLikeFacet:
    """Bottom facet of `above_elem` at fixed t; below_elem is None iff t = 0."""

    id: int
    t_pos: float
    x_iv: Interval
    below_elem: int | None
    above_elem: int
    moment_degree: int = -1


def _cluster(values, tol):
    """Map each value to a cluster representative (values within tol merge)."""
    svals = sorted(set(values))
    rep = {}
    groups: list[list[float]] = []
    for v in svals:
        if groups and v - groups[-1][-1] <= tol:
            groups[-1].append(v)
        else:
            groups.append([v])
    for grp in groups:
        for v in grp:
            rep[v] = grp[0]
    return rep


def _overlap_sweep(lo_sides, hi_sides, tol):
    """Pair up interval overlaps between two lists of (elem_id, Interval).

    Both lists must tile the same union; yields (id_a, id_b, Interval).
    """
    a = sorted(lo_sides, key=lambda s: s[1].lo)
    b = sorted(hi_sides, key=lambda s: s[1].lo)
    i = j = 0
    while i < len(a) and j < len(b):
        ia, ib = a[i][1], b[j][1]
        lo, hi = max(ia.lo, ib.lo), min(ia.hi, ib.hi)
        if hi - lo > tol:
            yield a[i][0], b[j][0], Interval(lo, hi)
        if ia.hi <= ib.hi + tol:
            i += 1
        if ib.hi <= ia.hi + tol:
            j += 1


class SpaceTimeMesh:
    """Prismatic mesh over Omega x (0, T) with full refinement tree."""

    def __init__(self, domain_x: Interval, domain_t: Interval, elements: list[Element]):
        self.domain_x = domain_x
        self.domain_t = domain_t
        self.elements = elements
        self.time_facets: list[TimeLikeFacet] = []
        self.space_facets: list[SpaceLikeFacet] = []
        self.slab_cuts: list[float] = []
        self.slab_count = 0
        self.topo_class_table: dict[tuple, int] = {}
        self.topo_sigs: dict[int, tuple] = {}
        self.tol = REL_TOL * max(domain_x.length, domain_t.length)
        # per-leaf facet ids, rebuilt by finalize()
        self._left_facets: dict[int, list[int]] = {}
        self._right_facets: dict[int, list[int]] = {}
        self._bottom_facets: dict[int, list[int]] = {}
        self.finalize()

    # ---- queries ----------------------------------------------------------

    @property
    def leaf_ids(self) -> list[int]:
        return [e.id for e in self.elements if e.is_leaf]

    def leaves(self) -> list[Element]:
        return [e for e in self.elements if e.is_leaf]

    @property
    def n_leaves(self) -> int:
        return sum(1 for e in self.elements if e.is_leaf)

    @property
    def n_topo_classes(self) -> int:
        return len(self.topo_class_table)

    def topo_key(self, elem_id: int) -> tuple:
        """The element's full class signature (stable across refinements,
        unlike the per-mesh integer flag), used as reference-cache key."""
        return self.topo_sigs[elem_id]

    def left_facets(self, elem_id: int) -> list[TimeLikeFacet]:
        return [self.time_facets[i] for i in self._left_facets[elem_id]]

    def right_facets(self, elem_id: int) -> list[TimeLikeFacet]:
        return [self.time_facets[i] for i in self._right_facets[elem_id]]

    def elem_time_facets(self, elem_id: int) -> list[TimeLikeFacet]:
        """Element's time-like facets in local order: left side then right side,
        each bottom-to-top."""
        return self.left_facets(elem_id) + self.right_facets(elem_id)

    def bottom_facets(self, elem_id: int) -> list[SpaceLikeFacet]:
        return [self.space_facets[i] for i in self._bottom_facets[elem_id]]

    def vertices(self) -> set[tuple[float, float]]:
        xs = _cluster(
            [v for e in self.leaves() for v in (e.x_iv.lo, e.x_iv.hi)], self.tol
        )
        ts = _cluster(
            [v for e in self.leaves() for v in (e.t_iv.lo, e.t_iv.hi)], self.tol
        )
        pts = set()
        for e in self.leaves():
            for x in (e.x_iv.lo, e.x_iv.hi):
                for t in (e.t_iv.lo, e.t_iv.hi):
                    pts.add((xs[x], ts[t]))
        return pts

    # ---- construction -----------------------------------------------------

    def finalize(self) -> None:
        self._build_facets()
        assign_facet_degrees(self)
        compute_slabs(self)
        compute_topo_flags(self)
        self._validate()

    def _build_facets(self) -> None:
        leaves = self.leaves()
        tol = self.tol
        self.time_facets = []
        self.space_facets = []
        self._left_facets = {e.id: [] for e in leaves}
        self._right_facets = {e.id: [] for e in leaves}
        self._bottom_facets = {e.id: [] for e in leaves}

        xrep = _cluster(
            [v for e in leaves for v in (e.x_iv.lo, e.x_iv.hi)], tol
        )
        by_right_side: dict[float, list] = {}
        by_left_side: dict[float, list] = {}
        for e in leaves:
            by_right_side.setdefault(xrep[e.x_iv.hi], []).append((e.id, e.t_iv))
            by_left_side.setdefault(xrep[e.x_iv.lo], []).append((e.id, e.t_iv))
        x_lo = xrep[self.domain_x.lo] if self.domain_x.lo in xrep else self.domain_x.lo
        x_hi = xrep[self.domain_x.hi] if self.domain_x.hi in xrep else self.domain_x.hi

        def new_tfacet(x_pos, t_iv, left, right):
            fid = len(self.time_facets)
            if left is not None and right is not None:
                h_Fx = min(self.elements[left].hx, self.elements[right].hx)
            elif left is not None:
                h_Fx = self.elements[left].hx
            else:
                h_Fx = self.elements[right].hx
            self.time_facets.append(
                TimeLikeFacet(fid, x_pos, t_iv, left, right, h_Fx=h_Fx)
            )
            if left is not None:
                self._right_facets[left].append(fid)
            if right is not None:
                self._left_facets[right].append(fid)
            return fid

        for xc in sorted(set(xrep.values())):
            lefts = by_right_side.get(xc, [])
            rights = by_left_side.get(xc, [])
            if abs(xc - x_lo) <= tol:
                for eid, t_iv in rights:
                    new_tfacet(xc, t_iv, None, eid)
            elif abs(xc - x_hi) <= tol:
                for eid, t_iv in lefts:
                    new_tfacet(xc, t_iv, eid, None)
            else:
                covered = 0.0
                for le, re_, ovl in _overlap_sweep(lefts, rights, tol):
                    new_tfacet(xc, ovl, le, re_)
                    covered += ovl.length
                need = sum(iv.length for _, iv in lefts)
                need_r = sum(iv.length for _, iv in rights)
                if abs(covered - need) > 1e3 * tol or abs(covered - need_r) > 1e3 * tol:
                    raise RuntimeError(f"facet cover mismatch at x = {xc}")

        trep = _cluster(
            [v for e in leaves for v in (e.t_iv.lo, e.t_iv.hi)], tol
        )
        by_top: dict[float, list] = {}
        by_bottom: dict[float, list] = {}
        for e in leaves:
            by_top.setdefault(trep[e.t_iv.hi], []).append((e.id, e.x_iv))
            by_bottom.setdefault(trep[e.t_iv.lo], []).append((e.id, e.x_iv))
        t_lo = trep[self.domain_t.lo] if self.domain_t.lo in trep else self.domain_t.lo

        def new_sfacet(t_pos, x_iv, below, above):
            fid = len(self.space_facets)
            self.space_facets.append(SpaceLikeFacet(fid, t_pos, x_iv, below, above))
            self._bottom_facets[above].append(fid)
            return fid

        for tc in sorted(set(trep.values())):
            aboves = by_bottom.get(tc, [])
            if not aboves:
                continue
            if abs(tc - t_lo) <= tol:
                for eid, x_iv in aboves:
                    new_sfacet(tc, x_iv, None, eid)
            else:
                belows = by_top.get(tc, [])
                covered = 0.0
                for be, ae, ovl in _overlap_sweep(belows, aboves, tol):
                    new_sfacet(tc, ovl, be, ae)
                    covered += ovl.length
                need = sum(iv.length for _, iv in aboves)
                if abs(covered - need) > 1e3 * tol:
                    raise RuntimeError(f"space-like facet cover mismatch at t = {tc}")

        for e in leaves:
            self._left_facets[e.id].sort(key=lambda i: self.time_facets[i].t_iv.lo)
            self._right_facets[e.id].sort(key=lambda i: self.time_facets[i].t_iv.lo)
            self._bottom_facets[e.id].sort(key=lambda i: self.space_facets[i].x_iv.lo)

    def _validate(self) -> None:
        area = sum(e.area for e in self.leaves())
        total = self.domain_x.length * self.domain_t.length
        if abs(area - total) > 1e-12 * total:
            raise RuntimeError("leaf elements do not tile the domain")
        for e in self.leaves():
            side = sum(f.t_iv.length for f in self.left_facets(e.id))
            side_r = sum(f.t_iv.length for f in self.right_facets(e.id))
            bot = sum(f.x_iv.length for f in self.bottom_facets(e.id))
            if (
                abs(side - e.ht) > 1e3 * self.tol
                or abs(side_r - e.ht) > 1e3 * self.tol
                or abs(bot - e.hx) > 1e3 * self.tol
            ):
                raise RuntimeError(f"element {e.id} sides not covered by facets")


# ---- operations ------------------------------------------------------------


def assign_facet_degrees(mesh: SpaceTimeMesh) -> None:
    """Maximum strategy: interior time-like facets get max of the neighbor
    degrees, boundary facets their owner's degree, space-like facets the
    degree of the element above."""
    for f in mesh.time_facets:
        if f.is_boundary:
            f.moment_degree = mesh.elements[f.owner].degree
        else:
            f.moment_degree = max(
                mesh.elements[f.left_elem].degree, mesh.elements[f.right_elem].degree
            )
    for s in mesh.space_facets:
        s.moment_degree = mesh.elements[s.above_elem].degree


def compute_slabs(mesh: SpaceTimeMesh) -> int:
    """Keep the time cuts no element straddles; label elements by band."""
    leaves = mesh.leaves()
    tol = mesh.tol
    trep = _cluster(
        [v for e in leaves for v in (e.t_iv.lo, e.t_iv.hi)]
        + [mesh.domain_t.lo, mesh.domain_t.hi],
        tol,
    )
    cands = sorted(set(trep.values()))
    kept = []
    for c in cands:
        if any(e.t_iv.lo < c - tol and e.t_iv.hi > c + tol for e in leaves):
            continue
        kept.append(c)
    mesh.slab_cuts = kept
    mesh.slab_count = len(kept) - 1
    for e in leaves:
        s = bisect_right(kept, e.t_iv.center) - 1
        e.slab = min(max(s, 0), mesh.slab_count - 1)
    return mesh.slab_count


def topo_signature(mesh: SpaceTimeMesh, elem_id: int) -> tuple:
    """Signature identifying an element's reference class.

    Two elements share a class when one is a translation of the other with
    the same degree data: same widths (h_Kx, h_Kt), same facet partition of
    each straight side (with moment degrees and the per-facet width ratios
    h_Fx / h_Kx entering the stabilization weights), and same bottom
    partition. A hanging node on a side or on the bottom makes the element
    a different "shape" (an extra vertex) and hence a different class. A
    top-side split on a neighbor never reclassifies it: the top side
    carries no local data (upwind information enters an element through
    its bottom). One local-matrix build serves a whole class, so the class
    count -- not the element count -- drives assembly cost.
    """
    e = mesh.elements[elem_id]
    x0, t0, hx, ht = e.x_iv.lo, e.t_iv.lo, e.hx, e.ht

    def side_sig(facets):
        return tuple(
            (
                round((f.t_iv.lo - t0) / ht, 12),
                round((f.t_iv.hi - t0) / ht, 12),
                f.moment_degree,
                round(f.h_Fx / hx, 12),
            )
            for f in facets
        )

    bottom_sig = tuple(
        (
            round((s.x_iv.lo - x0) / hx, 12),
            round((s.x_iv.hi - x0) / hx, 12),
            s.moment_degree,
        )
        for s in mesh.bottom_facets(elem_id)
    )
    return (
        e.degree,
        round(hx, 14),
        round(ht, 14),
        side_sig(mesh.left_facets(elem_id)),
        side_sig(mesh.right_facets(elem_id)),
        bottom_sig,
    )


def compute_topo_flags(mesh: SpaceTimeMesh) -> int:
    """Assign equivalence-class flags; flag ids follow the canonical sorted
    order of signatures so they do not depend on element insertion order."""
    sigs = {eid: topo_signature(mesh, eid) for eid in mesh.leaf_ids}
    table = {sig: k + 1 for k, sig in enumerate(sorted(set(sigs.values())))}
    for eid, sig in sigs.items():
        mesh.elements[eid].topo_flag = table[sig]
    mesh.topo_class_table = table
    mesh.topo_sigs = sigs
    return len(table)


def refine(mesh: SpaceTimeMesh, marked) -> SpaceTimeMesh:
    """Split each marked leaf into 4 congruent children; neighbors keep their
    geometry, so hanging facets appear where refinement levels differ."""
    marked = sorted(set(marked))
    for eid in marked:
        e = mesh.elements[eid]
        if not e.is_leaf:
            raise ValueError(f"element {eid} is not a leaf")
    for eid in marked:
        e = mesh.elements[eid]
        xm, tm = e.x_iv.center, e.t_iv.center
        kids = []
        for x_iv in (Interval(e.x_iv.lo, xm), Interval(xm, e.x_iv.hi)):
            for t_iv in (Interval(e.t_iv.lo, tm), Interval(tm, e.t_iv.hi)):
                cid = len(mesh.elements)
                mesh.elements.append(
                    Element(cid, x_iv, t_iv, e.degree, parent=eid)
                )
                kids.append(cid)
        e.children = tuple(kids)
    mesh.finalize()
    return mesh


# ---- constructors ----------------------------------------------------------


def cartesian_mesh(
    omega: Interval, t_final: float, nx: int, nt: int, degree: int = 1
) -> SpaceTimeMesh:
    if nx < 1 or nt < 1:
        raise ValueError("nx and nt must be >= 1")
    xs = [omega.lo + omega.length * i / nx for i in range(nx + 1)]
    ts = [t_final * j / nt for j in range(nt + 1)]
    return _tensor_mesh(omega, t_final, xs, ts, [degree] * nt)


def graded_mesh_t(
    omega: Interval,
    t_final: float,
    h_x: float,
    sigma_t: float,
    levels: int,
    degree_rule=None,
) -> SpaceTimeMesh:
    """Uniform in x, geometrically graded toward t = 0; one element per layer
    per column; degree grows by 1 from the bottom layer upward by default."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 < sigma_t < 1.0:
        raise ValueError("sigma_t must lie in (0, 1)")
    nx = round(omega.length / h_x)
    if nx < 1 or abs(nx * h_x - omega.length) > 1e-9 * omega.length:
        raise ValueError("h_x must divide the spatial domain")
    xs = [omega.lo + omega.length * i / nx for i in range(nx + 1)]
    ts = [0.0] + [t_final * sigma_t**k for k in range(levels - 1, 0, -1)] + [t_final]
    _check_layers(ts, t_final)
    degrees = list(degree_rule) if degree_rule is not None else list(range(1, levels + 1))
    if len(degrees) != levels:
        raise ValueError("degree_rule must give one degree per layer")
    return _tensor_mesh(omega, t_final, xs, ts, degrees)


def graded_mesh_xt(
    omega: Interval,
    t_final: float,
    sigma_x: float,
    sigma_t: float,
    levels: int,
    degree_rule=None,
) -> SpaceTimeMesh:
    """Tensor mesh geometrically graded toward x = both endpoints and t = 0;
    degrees increase per time layer from the bottom."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    half = 0.5 * omega.length
    xcuts = {omega.lo + half * sigma_x**j for j in range(levels)}
    xcuts |= {omega.hi - half * sigma_x**j for j in range(levels)}
    xs = [omega.lo] + sorted(xcuts) + [omega.hi]
    ts = [0.0] + [t_final * sigma_t**k for k in range(levels - 1, 0, -1)] + [t_final]
    _check_layers(ts, t_final)
    degrees = list(degree_rule) if degree_rule is not None else list(range(1, levels + 1))
    if len(degrees) != levels:
        raise ValueError("degree_rule must give one degree per layer")
    return _tensor_mesh(omega, t_final, xs, ts, degrees)


def _check_layers(ts, t_final):
    for a, b in zip(ts[:-1], ts[1:]):
        if b - a < 1e-14 * t_final:
            raise ValueError("degenerate time layer")


def _tensor_mesh(omega, t_final, xs, ts, layer_degrees) -> SpaceTimeMesh:
    elements = []
    for j in range(len(ts) - 1):
        for i in range(len(xs) - 1):
            elements.append(
                Element(
                    len(elements),
                    Interval(xs[i], xs[i + 1]),
                    Interval(ts[j], ts[j + 1]),
                    layer_degrees[j],
                )
            )
    return SpaceTimeMesh(omega, Interval(0.0, t_final), elements)


# ---- export / import -------------------------------------------------------

MESH_FORMAT = "stvem-mesh/1"


def dump_mesh(mesh: SpaceTimeMesh) -> str:
    lines = [MESH_FORMAT]
    lines.append(
        f"domain {mesh.domain_x.lo!r} {mesh.domain_x.hi!r} "
        f"{mesh.domain_t.lo!r} {mesh.domain_t.hi!r}"
    )
    leaves = mesh.leaves()
    lines.append(f"elements {len(leaves)}")
    for e in leaves:
        lines.append(
            f"{e.id} {e.x_iv.lo!r} {e.x_iv.hi!r} {e.t_iv.lo!r} {e.t_iv.hi!r} "
            f"{e.degree} {e.slab} {e.topo_flag}"
        )
    lines.append(f"time_facets {len(mesh.time_facets)}")
    for f in mesh.time_facets:
        left = "-" if f.left_elem is None else f.left_elem
        right = "-" if f.right_elem is None else f.right_elem
        lines.append(
            f"{f.id} {f.x_pos!r} {f.t_iv.lo!r} {f.t_iv.hi!r} {left} {right} "
            f"{f.moment_degree} {f.h_Fx!r}"
        )
    lines.append(f"space_facets {len(mesh.space_facets)}")
    for s in mesh.space_facets:
        below = "-" if s.below_elem is None else s.below_elem
        lines.append(
            f"{s.id} {s.t_pos!r} {s.x_iv.lo!r} {s.x_iv.hi!r} {below} "
            f"{s.above_elem} {s.moment_degree}"
        )
    return "\n".join(lines) + "\n"


def load_mesh(text: str) -> SpaceTimeMesh:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0].strip() != MESH_FORMAT:
        raise ValueError(f"unknown mesh format header {lines[0]!r}")
    tok = lines[1].split()
    assert tok[0] == "domain"
    domain_x = Interval(float(tok[1]), float(tok[2]))
    domain_t = Interval(float(tok[3]), float(tok[4]))
    n = int(lines[2].split()[1])
    elements = []
    id_map = {}
    for k in range(n):
        tok = lines[3 + k].split()
        id_map[int(tok[0])] = k
        elements.append(
            Element(
                k,
                Interval(float(tok[1]), float(tok[2])),
                Interval(float(tok[3]), float(tok[4])),
                int(tok[5]),
            )
        )
    return SpaceTimeMesh(domain_x, domain_t, elements)
