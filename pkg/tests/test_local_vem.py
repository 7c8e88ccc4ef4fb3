"""Tests for the element-local projectors, stabilization, and upwind blocks.

Oracle strategy: polynomial reproduction uses DoF vectors computed by
independent high-order quadrature (``dof_evaluate``), never the D matrix the
projectors are built from; the defining relations of each projector are
re-evaluated against quadrature on explicit non-polynomial functions; scalar
values (DoF counts, the stabilization on constants, simple moment vectors)
are frozen by hand.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvem import local_vem
from stvem.local_vem import (
    FacetSpec,
    LocalElement,
    build_projectors,
    dof_evaluate,
    dof_layout,
    local_forms,
    square_element,
    upwind_blocks,
)
from stvem.polybasis import Interval, basis_2d, gauss_rule, tensor_rule


def split_side(t_iv: Interval, fractions, degree, h_Fx) -> tuple[FacetSpec, ...]:
    cuts = [t_iv.lo] + [t_iv.lo + f * t_iv.length for f in fractions] + [t_iv.hi]
    degs = degree if isinstance(degree, (list, tuple)) else [degree] * (len(cuts) - 1)
    return tuple(
        FacetSpec(Interval(a, b), d, h_Fx) for a, b, d in zip(cuts, cuts[1:], degs)
    )


def make_element(x_iv, t_iv, p, left_fracs=(), right_fracs=(), facet_deg=None):
    fd = facet_deg if facet_deg is not None else p
    return LocalElement(
        x_iv,
        t_iv,
        p,
        split_side(t_iv, left_fracs, fd, x_iv.length),
        split_side(t_iv, right_fracs, fd, x_iv.length),
    )


def random_element(rng: np.random.Generator, p: int) -> LocalElement:
    x0, t0 = rng.uniform(-1.0, 1.0, size=2)
    hx, ht = rng.uniform(0.05, 2.0, size=2)
    x_iv, t_iv = Interval(x0, x0 + hx), Interval(t0, t0 + ht)

    def side() -> tuple[FacetSpec, ...]:
        n = int(rng.integers(1, 4))
        fracs = np.sort(rng.uniform(0.15, 0.85, size=n - 1))
        specs = split_side(t_iv, fracs, p, hx)
        return tuple(
            FacetSpec(f.t_iv, p + int(rng.integers(0, 2)), hx * rng.uniform(0.3, 1.0))
            for f in specs
        )

    return LocalElement(x_iv, t_iv, p, side(), side())


def random_poly(rng: np.random.Generator, elem: LocalElement, degree: int):
    basis = basis_2d(degree, elem.x_iv, elem.t_iv)
    coeffs = rng.uniform(-1.0, 1.0, size=basis.dimension)
    return basis, coeffs, lambda x, t: basis.eval(x, t) @ coeffs


# ---------------------------------------------------------------------------
# DoF layout and evaluation


def test_dof_counts_plain_p1():
    assert dof_layout(square_element(1)).total == 7


def test_dof_counts_plain_p2():
    assert dof_layout(square_element(2)).total == 12


def test_dof_counts_split_side_p1():
    elem = make_element(Interval(0, 1), Interval(0, 1), 1, left_fracs=(0.5,))
    lay = dof_layout(elem)
    assert lay.total == 9
    assert lay.facet_counts == (2, 2, 2)


def test_dof_layout_slices_cover():
    elem = make_element(Interval(0, 1), Interval(0, 2), 2, right_fracs=(0.3, 0.7))
    lay = dof_layout(elem)
    idx = list(range(lay.bulk.start, lay.bulk.stop))
    for k in range(len(lay.facet_counts)):
        idx += list(range(lay.facet(k).start, lay.facet(k).stop))
    idx += list(range(lay.space.start, lay.space.stop))
    assert idx == list(range(lay.total))


def test_dof_evaluate_frozen_linear():
    elem = square_element(1)
    dofs = dof_evaluate(lambda x, t: x, elem)
    expected = np.array([0.5, 0.0, 0.0, 1.0, 0.0, 0.5, 1.0 / 12.0])
    np.testing.assert_allclose(dofs, expected, atol=1e-14)


def test_dof_evaluate_constant_is_basis_means():
    elem = make_element(Interval(0.2, 0.7), Interval(0.1, 0.9), 2, left_fracs=(0.4,))
    dofs = dof_evaluate(lambda x, t: np.ones_like(x), elem)
    ops = build_projectors(elem)
    lay = ops.layout
    expect = np.zeros(lay.total)
    expect[lay.bulk] = (ops.basis2.monomial_integrals() / elem.area)[: lay.bulk_count]
    for k, fb in enumerate(ops.facet_bases):
        expect[lay.facet(k)] = fb.monomial_integrals() / fb.scale[0]
    expect[lay.space] = ops.space_basis.monomial_integrals() / elem.hx
    np.testing.assert_allclose(dofs, expect, atol=1e-14)


def test_facet_degree_below_element_degree_rejected():
    with pytest.raises(ValueError):
        make_element(Interval(0, 1), Interval(0, 1), 2, facet_deg=1)


def test_side_cover_validation():
    good = FacetSpec(Interval(0.0, 0.5), 1, 1.0)
    with pytest.raises(ValueError):
        LocalElement(Interval(0, 1), Interval(0, 1), 1, (good,), (good, good))


# ---------------------------------------------------------------------------
# Projectors: polynomial reproduction (independent quadrature DoFs)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_polynomial_reproduction_random_hanging_elements(p):
    rng = np.random.default_rng(1000 + p)
    for trial in range(5):
        elem = random_element(rng, p)
        ops = build_projectors(elem)
        basis, coeffs, q = random_poly(rng, elem, p)
        w = dof_evaluate(q, elem, n=p + 12)
        scale = np.abs(coeffs).max()
        assert np.abs(ops.PiN @ w - coeffs).max() <= 1e-11 * scale
        assert np.abs(ops.PiStar @ w - coeffs).max() <= 1e-11 * scale


@pytest.mark.parametrize("p", [1, 2, 3])
def test_pi0_and_trace_reproduction(p):
    rng = np.random.default_rng(2000 + p)
    elem = random_element(rng, p)
    ops = build_projectors(elem)
    basis, coeffs, q = random_poly(rng, elem, p)
    w = dof_evaluate(q, elem, n=p + 12)
    nb = ops.layout.bulk_count
    # bulk L2 projection of q onto P_{p-1}: normal equations in the full basis
    G = ops.G2
    proj = np.linalg.solve(G[:nb, :nb], G[:nb] @ coeffs)
    assert np.abs(ops.Pi0_bulk @ w - proj).max() < 1e-10
    # bottom trace in the space basis
    trace = ops.TBpoly @ coeffs
    assert np.abs(ops.TraceB @ w - trace).max() < 1e-10
    # facet L2 projections reproduce the exact facet trace of q
    for k, fb in enumerate(ops.facet_bases):
        x_pos = elem.x_iv.lo if k < len(elem.left) else elem.x_iv.hi
        rule = gauss_rule(p + 8, elem.facets[k].t_iv)
        vals_exact = q(np.full_like(rule.nodes, x_pos), rule.nodes)
        vals_proj = fb.eval(rule.nodes) @ (ops.Pi0_facet[k] @ w)
        assert np.abs(vals_exact - vals_proj).max() < 1e-10


def test_reproduction_with_higher_facet_degrees():
    elem = make_element(
        Interval(0, 0.5), Interval(0, 0.25), 2, left_fracs=(0.5,), facet_deg=3
    )
    ops = build_projectors(elem)
    rng = np.random.default_rng(7)
    basis, coeffs, q = random_poly(rng, elem, 2)
    w = dof_evaluate(q, elem)
    assert np.abs(ops.PiN @ w - coeffs).max() < 1e-11
    assert np.abs(ops.PiStar @ w - coeffs).max() < 1e-11


@settings(max_examples=20, deadline=None)
@given(
    p=st.integers(min_value=1, max_value=3),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_reproduction_property(p, seed):
    rng = np.random.default_rng(seed)
    elem = random_element(rng, p)
    ops = build_projectors(elem)
    basis, coeffs, q = random_poly(rng, elem, p)
    w = dof_evaluate(q, elem, n=p + 12)
    scale = max(np.abs(coeffs).max(), 1.0)
    assert np.abs(ops.PiN @ w - coeffs).max() <= 1e-10 * scale
    assert np.abs(ops.PiStar @ w - coeffs).max() <= 1e-10 * scale


# ---------------------------------------------------------------------------
# Projector defining relations on non-polynomial data (quadrature oracle)


def test_PiN_defining_relations_vs_quadrature():
    elem = make_element(
        Interval(0.2, 0.9), Interval(0.1, 0.4), 3, left_fracs=(0.25, 0.6)
    )
    ops = build_projectors(elem)

    def f(x, t):
        return np.exp(x) * np.sin(3 * t) + x**5 * t

    def dxf(x, t):
        return np.exp(x) * np.sin(3 * t) + 5 * x**4 * t

    w = dof_evaluate(f, elem, n=24)
    proj = ops.PiN @ w
    rule = tensor_rule(gauss_rule(30, elem.x_iv), gauss_rule(30, elem.t_iv))
    X, T = rule.nodes[:, 0], rule.nodes[:, 1]
    vals = ops.basis2.eval(X, T)
    dx_vals = vals @ ops.Dx
    # x-stiffness pairings match the exact function for every test monomial
    lhs = ops.Kxx @ proj
    for i, (a, b) in enumerate(ops.basis2.exponents):
        if a == 0:
            continue
        quad = rule.weights @ (dx_vals[:, i] * dxf(X, T))
        assert abs(lhs[i] - quad) < 1e-11
    # bulk pairings against time-only polynomials up to degree p-1
    for c in range(elem.degree):
        i = ops.basis2.index_of((0, c))
        quad = rule.weights @ (vals[:, i] * f(X, T))
        assert abs((ops.G2 @ proj)[i] - quad) < 1e-11
    # bottom average
    rule_x = gauss_rule(30, elem.x_iv)
    quad = rule_x.weights @ f(rule_x.nodes, elem.t_iv.lo)
    bottom = ops.space_basis.monomial_integrals() @ (ops.TBpoly @ proj)
    assert abs(bottom - quad) < 1e-11


def test_PiStar_defining_relations_vs_quadrature():
    elem = make_element(Interval(0.0, 0.5), Interval(0.0, 0.2), 2, right_fracs=(0.5,))
    ops = build_projectors(elem)

    def f(x, t):
        return np.cos(2 * x + t) + x**4

    w = dof_evaluate(f, elem, n=24)
    star = ops.PiStar @ w
    rule = tensor_rule(gauss_rule(30, elem.x_iv), gauss_rule(30, elem.t_iv))
    X, T = rule.nodes[:, 0], rule.nodes[:, 1]
    vals = ops.basis2.eval(X, T)
    nb = ops.layout.bulk_count
    for al in range(nb):
        quad = rule.weights @ (vals[:, al] * f(X, T))
        assert abs((ops.G2 @ star)[al] - quad) < 1e-12
    rule_x = gauss_rule(30, elem.x_iv)
    sb_vals = ops.space_basis.eval(rule_x.nodes)
    trace = sb_vals @ (ops.TBpoly @ star)
    for g in range(elem.degree + 1):
        quad = rule_x.weights @ (sb_vals[:, g] * f(rule_x.nodes, elem.t_iv.lo))
        proj_val = rule_x.weights @ (sb_vals[:, g] * trace)
        assert abs(proj_val - quad) < 1e-12


def test_D_matrix_columns_are_monomial_dofs():
    elem = make_element(
        Interval(0.1, 0.6), Interval(0.3, 1.1), 3, left_fracs=(0.5,), right_fracs=(0.2,)
    )
    ops = build_projectors(elem)
    for j, (a, b) in enumerate(ops.basis2.exponents):
        mj = lambda x, t: ops.basis2.eval(x, t)[:, j]
        np.testing.assert_allclose(
            dof_evaluate(mj, elem, n=16), ops.D[:, j], atol=1e-13
        )


def test_trace_identity_TBpoly_PiStar_equals_TraceB():
    for p in (1, 2, 3):
        rng = np.random.default_rng(3000 + p)
        ops = build_projectors(random_element(rng, p))
        assert np.abs(ops.TBpoly @ ops.PiStar - ops.TraceB).max() < 1e-11


# ---------------------------------------------------------------------------
# Local matrices


def test_raw_stabilization_on_constants_unit_square():
    lm = local_forms(square_element(1))
    w = dof_evaluate(lambda x, t: np.ones_like(x), lm.elem)
    # p^2/hx^2*|K| + sum_F p/h_Fx*|F| + p*ht/hx with p=1 on the unit square
    assert abs(w @ lm.S @ w - 4.0) < 1e-12


def test_raw_stabilization_on_constants_scaled():
    elem = make_element(Interval(0, 0.5), Interval(0, 0.25), 2)
    lm = local_forms(elem)
    w = dof_evaluate(lambda x, t: np.ones_like(x), elem)
    # 4/0.25*0.125 + 2*(2/0.5*0.25) + 2*0.25/0.5 = 2 + 2 + 1
    assert abs(w @ lm.S @ w - 5.0) < 1e-12


def test_S_symmetric_positive_definite():
    rng = np.random.default_rng(11)
    for p in (1, 2):
        elem = random_element(rng, p)
        lm = local_forms(elem)
        assert np.abs(lm.S - lm.S.T).max() < 1e-12 * np.abs(lm.S).max()
        assert np.linalg.eigvalsh(lm.S).min() > 0


@pytest.mark.parametrize("p", [1, 2, 3])
def test_Ah_symmetric_psd_kernel_is_time_polynomials(p):
    elem = make_element(
        Interval(0.0, 0.5), Interval(0.0, 1.0), p, left_fracs=(0.5,)
    )
    lm = local_forms(elem)
    n = lm.layout.total
    assert np.abs(lm.Ah - lm.Ah.T).max() < 1e-11 * np.abs(lm.Ah).max()
    eigs = np.linalg.eigvalsh(lm.Ah)
    scale = eigs.max()
    assert eigs.min() > -1e-12 * scale
    assert int(np.sum(np.abs(eigs) < 1e-10 * scale)) == p + 1
    # time-only monomials are exactly the null directions
    for b in range(p + 1):
        j = lm.ops.basis2.index_of((0, b))
        assert np.abs(lm.Ah @ lm.ops.D[:, j]).max() < 1e-11 * scale


def test_consistency_A_proj_exact_for_polynomials():
    rng = np.random.default_rng(5)
    elem = random_element(rng, 2)
    lm = local_forms(elem, nu=1.0)
    basis, cp, qp = random_poly(rng, elem, 2)
    basis, cq, qq = random_poly(rng, elem, 2)
    wp, wq = dof_evaluate(qp, elem), dof_evaluate(qq, elem)
    exact = cp @ lm.ops.Kxx @ cq
    # SC vanishes on polynomial DoF vectors, so Ah equals the exact pairing
    assert abs(wp @ lm.Ah @ wq - exact) < 1e-10 * max(abs(exact), 1.0)
    assert abs(wp @ lm.SC @ wq) < 1e-10 * max(abs(exact), 1.0)


def test_Tmat_exact_for_polynomials():
    rng = np.random.default_rng(6)
    elem = random_element(rng, 2)
    lm = local_forms(elem, c_H=1.7)
    basis, cu, qu = random_poly(rng, elem, 2)
    basis, cv, qv = random_poly(rng, elem, 2)
    wu, wv = dof_evaluate(qu, elem), dof_evaluate(qv, elem)
    Dt = lm.ops.Dt
    exact = 1.7 * (cv @ lm.ops.G2 @ (Dt @ cu))
    assert abs(wv @ lm.Tmat @ wu - exact) < 1e-10 * max(abs(exact), 1.0)


def test_scaling_laws():
    p = 2
    unit = make_element(Interval(0, 1), Interval(0, 1), p, left_fracs=(0.5,))
    hx, ht = 0.125, 0.5
    phys = make_element(
        Interval(0.3, 0.3 + hx), Interval(0.7, 0.7 + ht), p, left_fracs=(0.5,)
    )
    lu = local_forms(unit, nu=1.0, c_H=1.0)
    lp = local_forms(phys, nu=1.0, c_H=1.0)
    for name in ("Ah", "A_proj", "S", "SC"):
        a, b = getattr(lp, name), getattr(lu, name) * (ht / hx)
        assert np.abs(a - b).max() <= 1e-12 * max(np.abs(b).max(), 1.0)
    assert np.abs(lp.Tmat - hx * lu.Tmat).max() <= 1e-12
    assert np.abs(lp.U_self - hx * lu.U_self).max() <= 1e-12
    for name in ("PiN", "PiStar", "D", "TraceB", "Pi0_bulk"):
        a, b = getattr(lp.ops, name), getattr(lu.ops, name)
        assert np.abs(a - b).max() <= 1e-12 * max(np.abs(b).max(), 1.0)


def test_material_coefficients_enter_linearly():
    elem = square_element(2)
    base = local_forms(elem, nu=1.0, c_H=1.0)
    scaled = local_forms(elem, nu=3.0, c_H=0.25)
    np.testing.assert_allclose(scaled.Ah, 3.0 * base.Ah, atol=1e-14)
    np.testing.assert_allclose(scaled.Tmat, 0.25 * base.Tmat, atol=1e-14)
    np.testing.assert_allclose(scaled.U_self, 0.25 * base.U_self, atol=1e-14)
    np.testing.assert_allclose(scaled.S, base.S, atol=1e-14)


def test_load_vector_constant_source():
    elem = square_element(1)
    lm = local_forms(elem)
    fvec = elem.area * np.array([1.0])  # integral of f=1 against m_0
    load = lm.load_vector(fvec)
    # (1, Pi0 phi_i): the constant's projection pairs only with the bulk moment
    expect = np.zeros(lm.layout.total)
    expect[0] = 1.0
    np.testing.assert_allclose(load, expect, atol=1e-14)


def test_build_counter_increments():
    before = local_vem.N_LOCAL_BUILDS
    local_forms(square_element(1))
    assert local_vem.N_LOCAL_BUILDS == before + 1


# ---------------------------------------------------------------------------
# Upwind blocks


def test_upwind_zero_jump_for_shared_polynomial():
    p = 2
    below = make_element(Interval(0, 1), Interval(0, 1), p)
    above = make_element(Interval(0, 1), Interval(1, 1.5), p)
    om, op_ = build_projectors(below), build_projectors(above)

    def q(x, t):
        return (x - 0.3) ** 2 + 0.5 * t * x - t**2

    wm, wp = dof_evaluate(q, below), dof_evaluate(q, above)
    ub = upwind_blocks(Interval(0, 1), op_, om, c_H=1.0)
    assert np.abs(ub.self_block @ wp + ub.couple_block @ wm).max() < 1e-12
    assert ub.load is None


def test_upwind_initial_load_consistency():
    elem = make_element(Interval(0, 1), Interval(0, 1), 2)
    ops = build_projectors(elem)

    def q(x, t):
        return 1.0 + x - 0.5 * x**2 + t * (1 - x)

    w = dof_evaluate(q, elem)
    ub = upwind_blocks(Interval(0, 1), ops, None, c_H=2.0, u0=lambda x: q(x, 0.0))
    assert ub.couple_block is None
    assert np.abs(ub.self_block @ w - ub.load).max() < 1e-12


def test_upwind_hanging_interface_zero_jump():
    # two half-width elements below, one full-width element above
    p = 2
    below_l = make_element(Interval(0.0, 0.5), Interval(0.0, 0.5), p)
    below_r = make_element(Interval(0.5, 1.0), Interval(0.0, 0.5), p)
    above = make_element(Interval(0.0, 1.0), Interval(0.5, 1.0), p)
    ol, orr = build_projectors(below_l), build_projectors(below_r)
    oa = build_projectors(above)

    def q(x, t):
        return x**2 - x * t + 2 * t**2 - 1.0

    wl, wr = dof_evaluate(q, below_l), dof_evaluate(q, below_r)
    wa = dof_evaluate(q, above)
    ub_l = upwind_blocks(Interval(0.0, 0.5), oa, ol, c_H=1.0)
    ub_r = upwind_blocks(Interval(0.5, 1.0), oa, orr, c_H=1.0)
    resid = (
        ub_l.self_block @ wa
        + ub_l.couple_block @ wl
        + ub_r.self_block @ wa
        + ub_r.couple_block @ wr
    )
    assert np.abs(resid).max() < 1e-12


def test_upwind_self_blocks_tile_the_bottom():
    elem = make_element(Interval(0, 1), Interval(0, 1), 2)
    ops = build_projectors(elem)
    lm = local_forms(elem, c_H=1.3, ops=ops)
    parts = [
        upwind_blocks(Interval(0.0, 0.4), ops, None, c_H=1.3),
        upwind_blocks(Interval(0.4, 1.0), ops, None, c_H=1.3),
    ]
    total = sum(p.self_block for p in parts)
    np.testing.assert_allclose(total, lm.U_self, atol=1e-12)


def test_upwind_mixed_degrees():
    below = make_element(Interval(0, 1), Interval(0, 1), 3)
    above = make_element(Interval(0, 1), Interval(1, 2), 1, facet_deg=1)
    om, op_ = build_projectors(below), build_projectors(above)

    def q(x, t):
        return 0.25 + 0.5 * x  # in both spaces

    wm, wp = dof_evaluate(q, below), dof_evaluate(q, above)
    ub = upwind_blocks(Interval(0, 1), op_, om)
    assert np.abs(ub.self_block @ wp + ub.couple_block @ wm).max() < 1e-12
