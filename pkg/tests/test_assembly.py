"""Tests for the global DoF map, assembly, cache, and solvers.

The central oracle is the patch test: on meshes with hanging nodes and mixed
degrees, a global space-time polynomial of degree min_K p_K solves the
discrete system exactly (its interpolant's DoF vector satisfies every
equation), so the solver must return it to near machine precision.
"""

from __future__ import annotations

import os

import numpy as np
import pytest
import scipy.sparse as sp

from stvem import local_vem
from stvem.assembly import (
    ProblemData,
    ReferenceCache,
    AssembledSystem,
    assemble,
    assemble_and_solve,
    assemble_energy_matrix,
    build_dof_map,
    cached_local,
    dump_slab_systems,
    local_element_of,
    solve_by_slabs,
    solve_energy_system,
    solve_monolithic,
    SolverError,
)
from stvem.geometry import cartesian_mesh, refine
from stvem.local_vem import dof_evaluate, local_forms
from stvem.polybasis import Interval, basis_1d, gauss_rule, moments


def poly_problem(u, f):
    return ProblemData(
        nu=1.0,
        c_H=1.0,
        f=f,
        u0=lambda x: u(x, np.zeros_like(x)),
        g=lambda x, t: u(x, t),
    )


def hanging_mesh(degree=2):
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 2, 2, degree=degree)
    mesh = refine(mesh, [0])
    mesh = refine(mesh, [mesh.leaf_ids[-1]])
    return mesh


def max_dof_error(sol, u):
    err = 0.0
    for eid in sol.mesh.leaf_ids:
        w = dof_evaluate(u, sol.dof_map.local_elements[eid])
        err = max(err, np.abs(sol.element_dofs(eid) - w).max())
    return err


# ---------------------------------------------------------------------------
# DoF map


def test_dof_counts_single_element():
    dm = build_dof_map(cartesian_mesh(Interval(0, 1), 1.0, 1, 1, degree=1))
    assert dm.n_total == 7
    assert dm.n_free == 3  # two boundary facets x two moments constrained


def test_dof_counts_two_elements_share_facet():
    dm = build_dof_map(cartesian_mesh(Interval(0, 1), 1.0, 2, 1, degree=1))
    assert dm.n_total == 12
    assert dm.n_free == 8


def test_shared_facet_indices_agree_between_neighbors():
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 2, 1, degree=2)
    dm = build_dof_map(mesh)
    left, right = 0, 1
    lay_l, lay_r = dm.layouts[left], dm.layouts[right]
    # right side of the left element is its second facet block; left side of
    # the right element is its first
    f_left = mesh.elem_time_facets(left)
    f_right = mesh.elem_time_facets(right)
    shared_l = [k for k, f in enumerate(f_left) if not f.is_boundary][0]
    shared_r = [k for k, f in enumerate(f_right) if not f.is_boundary][0]
    idx_l = dm.elem_indices[left][lay_l.facet(shared_l)]
    idx_r = dm.elem_indices[right][lay_r.facet(shared_r)]
    np.testing.assert_array_equal(idx_l, idx_r)


def test_slab_contiguous_numbering():
    mesh = hanging_mesh()
    dm = build_dof_map(mesh)
    assert dm.slab_ranges[0][0] == 0
    assert dm.slab_ranges[-1][1] == dm.n_total
    for (a, b), (c, d) in zip(dm.slab_ranges, dm.slab_ranges[1:]):
        assert b == c
    for eid in mesh.leaf_ids:
        s = mesh.elements[eid].slab
        lo, hi = dm.slab_ranges[s]
        idx = dm.elem_indices[eid]
        own = np.concatenate(
            [
                idx[dm.layouts[eid].bulk],
                idx[dm.layouts[eid].space],
            ]
        )
        assert own.min() >= lo and own.max() < hi


def test_boundary_facets_constrained():
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 3, 2, degree=1)
    dm = build_dof_map(mesh)
    n_bdry_moments = sum(
        mesh.time_facets[fid].moment_degree + 1 for fid in dm.boundary_facet_ids
    )
    assert dm.n_total - dm.n_free == n_bdry_moments
    for fid in dm.boundary_facet_ids:
        assert mesh.time_facets[fid].is_boundary


# ---------------------------------------------------------------------------
# Patch tests (exact reproduction of global polynomials)


def test_patch_test_p1_uniform():
    u = lambda x, t: 0.25 + 0.5 * x - 0.125 * t
    f = lambda x, t: np.full_like(x, -0.125)  # u_t - u_xx
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 3, 2, degree=1)
    sol = assemble_and_solve(mesh, poly_problem(u, f))
    assert max_dof_error(sol, u) < 1e-11


def test_patch_test_p2_hanging_nodes():
    u = lambda x, t: 1 + 2 * x - x**2 + t * (1 - x)
    f = lambda x, t: (1 - x) + 2.0
    sol = assemble_and_solve(hanging_mesh(degree=2), poly_problem(u, f))
    assert max_dof_error(sol, u) < 1e-11


def test_patch_test_mixed_degrees():
    u = lambda x, t: x**2 - x * t + 0.5 * t**2 - 0.3 * x
    f = lambda x, t: (-x + t) - 2.0
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 2, 2, degree=2)
    for eid in mesh.leaf_ids[:2]:
        mesh.elements[eid].degree = 3
    mesh.finalize()
    mesh = refine(mesh, [mesh.leaf_ids[-1]])
    sol = assemble_and_solve(mesh, poly_problem(u, f))
    assert max_dof_error(sol, u) < 1e-10


def test_patch_test_with_material_coefficients():
    nu, c_H = 0.7, 2.5
    u = lambda x, t: x * (1 - x) + 0.2 * t
    f = lambda x, t: c_H * 0.2 + nu * 2.0 + 0 * x
    mesh = hanging_mesh(degree=2)
    prob = ProblemData(
        nu=nu,
        c_H=c_H,
        f=f,
        u0=lambda x: u(x, np.zeros_like(x)),
        g=lambda x, t: u(x, t),
    )
    sol = assemble_and_solve(mesh, prob)
    assert max_dof_error(sol, u) < 1e-11


# ---------------------------------------------------------------------------
# Solvers


def test_slab_and_monolithic_agree():
    u = lambda x, t: np.sin(np.pi * x) * np.exp(-t)
    f = lambda x, t: (np.pi**2 - 1) * np.exp(-t) * np.sin(np.pi * x)
    mesh = hanging_mesh(degree=2)
    prob = ProblemData(f=f, u0=lambda x: np.sin(np.pi * x))
    a = assemble_and_solve(mesh, prob, mode="slab")
    b = assemble_and_solve(mesh, prob, mode="monolithic")
    scale = np.abs(b.values).max()
    assert np.abs(a.values - b.values).max() < 1e-9 * scale


def test_unknown_mode_rejected():
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 1, 1)
    with pytest.raises(ValueError):
        assemble_and_solve(mesh, ProblemData(), mode="banana")


def test_zero_data_zero_solution():
    sol = assemble_and_solve(hanging_mesh(), ProblemData())
    assert np.abs(sol.values).max() == 0.0


def test_solver_error_names_slab():
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 2, 2, degree=1)
    dm = build_dof_map(mesh)
    n = dm.n_total
    bad = AssembledSystem(
        matrix=sp.csr_matrix((n, n)), rhs=np.zeros(n), known=np.zeros(n), dof_map=dm
    )
    with pytest.raises(SolverError, match="slab 0"):
        solve_by_slabs(bad)
    with pytest.raises(SolverError, match="monolithic"):
        solve_monolithic(bad)


def test_dirichlet_moments_imposed():
    g = lambda x, t: np.where(x > 0.5, t**2, 0.0)
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 2, 2, degree=2)
    prob = ProblemData(g=g)
    sol = assemble_and_solve(mesh, prob)
    dm = sol.dof_map
    for fid in dm.boundary_facet_ids:
        f = mesh.time_facets[fid]
        fb = basis_1d(f.moment_degree, f.t_iv)
        rule = gauss_rule(12, f.t_iv)
        expect = moments(lambda t: g(np.full_like(t, f.x_pos), t), fb, rule)
        off = dm.facet_offsets[fid]
        got = sol.values[off : off + f.moment_degree + 1]
        np.testing.assert_allclose(got, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# Reference cache


def test_cache_matches_direct_build():
    mesh = hanging_mesh(degree=2)
    dm = build_dof_map(mesh)
    cache = ReferenceCache(enabled=True)
    for eid in mesh.leaf_ids:
        lm_c = cached_local(cache, dm, eid, nu=1.3, c_H=0.7)
        lm_d = local_forms(dm.local_elements[eid], nu=1.3, c_H=0.7)
        for name in ("Ah", "Tmat", "S", "SC", "A_proj", "U_self", "M_bulk"):
            a, b = getattr(lm_c, name), getattr(lm_d, name)
            assert np.abs(a - b).max() <= 1e-12 * max(np.abs(b).max(), 1.0), name
        for name in ("PiN", "PiStar", "D", "TraceB", "Pi0_bulk", "Kxx", "G2", "Dx", "Dt"):
            a, b = getattr(lm_c.ops, name), getattr(lm_d.ops, name)
            assert np.abs(a - b).max() <= 1e-12 * max(np.abs(b).max(), 1.0), name
    assert cache.n_builds == mesh.n_topo_classes


def test_cache_on_off_identical_solution_and_build_counts():
    u = lambda x, t: np.sin(np.pi * x) * np.exp(-t)
    f = lambda x, t: (np.pi**2 - 1) * np.exp(-t) * np.sin(np.pi * x)
    mesh = hanging_mesh(degree=1)
    prob = ProblemData(f=f, u0=lambda x: np.sin(np.pi * x))
    before = local_vem.N_LOCAL_BUILDS
    off = assemble_and_solve(mesh, prob, cache_enabled=False)
    builds_off = local_vem.N_LOCAL_BUILDS - before
    before = local_vem.N_LOCAL_BUILDS
    on = assemble_and_solve(mesh, prob, cache_enabled=True)
    builds_on = local_vem.N_LOCAL_BUILDS - before
    scale = np.abs(off.values).max()
    assert np.abs(on.values - off.values).max() <= 1e-12 * scale
    assert builds_on == mesh.n_topo_classes
    assert builds_off == mesh.n_leaves
    assert on.cache.n_builds == mesh.n_topo_classes


def test_cartesian_mesh_single_class_single_build():
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 4, 4, degree=1)
    assert mesh.n_topo_classes == 1
    before = local_vem.N_LOCAL_BUILDS
    assemble_and_solve(mesh, ProblemData(f=lambda x, t: x))
    assert local_vem.N_LOCAL_BUILDS - before == 1


# ---------------------------------------------------------------------------
# Threads


def test_thread_count_does_not_change_result():
    u = lambda x, t: np.sin(np.pi * x) * np.exp(-t)
    f = lambda x, t: (np.pi**2 - 1) * np.exp(-t) * np.sin(np.pi * x)
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 4, 4, degree=1)
    prob = ProblemData(f=f, u0=lambda x: np.sin(np.pi * x))
    serial = assemble_and_solve(mesh, prob)
    old = os.environ.get("STVEM_THREADS")
    os.environ["STVEM_THREADS"] = "3"
    try:
        threaded = assemble_and_solve(mesh, prob)
    finally:
        if old is None:
            del os.environ["STVEM_THREADS"]
        else:
            os.environ["STVEM_THREADS"] = old
    np.testing.assert_array_equal(serial.values, threaded.values)


# ---------------------------------------------------------------------------
# Energy system


def test_energy_matrix_spd_and_solve():
    mesh = hanging_mesh(degree=1)
    dm = build_dof_map(mesh)
    cache = ReferenceCache()
    A = assemble_energy_matrix(dm, cache, nu=1.0)
    assert (abs(A - A.T)).max() < 1e-12
    free = np.flatnonzero(dm.free_mask)
    dense = A[free][:, free].toarray()
    eigs = np.linalg.eigvalsh(dense)
    assert eigs.min() > 0
    rhs = np.zeros(dm.n_total)
    rhs[free] = 1.0
    res = solve_energy_system(A, dm.free_mask, rhs)
    assert not res.used_fallback
    np.testing.assert_allclose(dense @ res.values[free], rhs[free], atol=1e-10)


def test_energy_solve_fallback_flag():
    n = 4
    A = sp.csr_matrix((n, n))
    mask = np.ones(n, dtype=bool)
    res = solve_energy_system(A, mask, np.zeros(n))
    assert res.used_fallback


# ---------------------------------------------------------------------------
# Slab matrix dump


def test_dump_slab_systems(tmp_path):
    mesh = cartesian_mesh(Interval(0, 1), 1.0, 2, 2, degree=1)
    dm = build_dof_map(mesh)
    system = assemble(mesh, dm, ProblemData())
    paths = dump_slab_systems(system, tmp_path)
    assert len(paths) == mesh.slab_count
    text = open(paths[0]).read().strip().splitlines()
    assert text[0].startswith("# slab 0")
    i, j, v = text[1].split()
    int(i), int(j), float(v)
