"""Exact solutions, error measures, and the a posteriori error indicator.

The exact solutions used by the convergence studies have separable structure
(sums of Fourier modes with exponential decay in time, or a single mode with
an algebraic power of t), so every integral the error measures need factors
into 1D pieces computed in closed form:

* trigonometric x-integrals against scaled monomials, by a stable two-term
  recurrence when the phase change across the element is large and Gauss
  quadrature when it is small;
* exponential t-integrals likewise;
* algebraic t-integrals (t^gamma, gamma > -1) by exact antiderivatives on
  elements touching t = 0 and by geometrically composited Gauss panels when
  the singularity is nearby but outside.

Modes whose decay makes them invisible on an element (lambda * t_lo large)
are dropped; their contribution is below double precision.

Quadrature-based counterparts of each moment method (``*_quad``) serve as
independent oracles in the tests and as a fallback path.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .assembly import (
    ProblemData,
    Solution,
    assemble_energy_matrix,
    solve_energy_system,
)
from .local_vem import LocalElement, dof_layout
from .polybasis import (
    Interval,
    ScaledMonomialBasis,
    basis_1d,
    basis_2d,
    gauss_rule,
    graded_rule,
    moments,
    shift_matrix_1d,
    tensor_rule,
)

# a decaying mode contributes ~exp(-lambda*t_lo); below this threshold it is
# beyond double precision relative to the slowest mode
ACTIVE_MODE_EXPONENT = 40.0

# phase/decay change across an element below which the integration-by-parts
# recurrences lose accuracy to cancellation and Gauss quadrature is exact to
# machine precision instead
RECURRENCE_THRESHOLD = 2.0

_SMALL_RULE_N = 20


def _interval_of(basis: ScaledMonomialBasis, axis: int = 0) -> Interval:
    c, s = basis.center[axis], basis.scale[axis]
    return Interval(c - 0.5 * s, c + 0.5 * s)


def cos_integral(k: np.ndarray, iv: Interval) -> np.ndarray:
    """integral of cos(k x) over iv, stable for any k including 0."""
    k = np.asarray(k, dtype=float)
    return iv.length * np.cos(k * iv.center) * np.sinc(k * iv.length / (2 * np.pi))


def sin_integral(k: np.ndarray, iv: Interval) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    return iv.length * np.sin(k * iv.center) * np.sinc(k * iv.length / (2 * np.pi))


def trig_power_integrals(k: np.ndarray, iv: Interval, max_a: int):
    """S[n, a] = integral sin(k_n x) xi^a dx and C likewise for cos, with
    xi the centered coordinate of iv scaled by its length."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    h = iv.length
    n = k.shape[0]
    S = np.zeros((n, max_a + 1))
    C = np.zeros((n, max_a + 1))
    S[:, 0] = sin_integral(k, iv)
    C[:, 0] = cos_integral(k, iv)
    if max_a == 0:
        return S, C
    big = np.abs(k) * h > RECURRENCE_THRESHOLD
    if np.any(big):
        kb = k[big]
        sin_hi, sin_lo = np.sin(kb * iv.hi), np.sin(kb * iv.lo)
        cos_hi, cos_lo = np.cos(kb * iv.hi), np.cos(kb * iv.lo)
        for a in range(1, max_a + 1):
            xi_hi, xi_lo = 0.5**a, (-0.5) ** a
            S[big, a] = (-cos_hi * xi_hi + cos_lo * xi_lo) / kb + (
                a / (kb * h)
            ) * C[big, a - 1]
            C[big, a] = (sin_hi * xi_hi - sin_lo * xi_lo) / kb - (a / (kb * h)) * S[
                big, a - 1
            ]
    if np.any(~big):
        rule = gauss_rule(_SMALL_RULE_N, iv)
        xi = (rule.nodes - iv.center) / h
        powers = xi[None, :] ** np.arange(max_a + 1)[:, None]  # (a, q)
        phase = np.outer(k[~big], rule.nodes)  # (n_small, q)
        S[~big, :] = (np.sin(phase) * rule.weights) @ powers.T
        C[~big, :] = (np.cos(phase) * rule.weights) @ powers.T
    return S, C


def exp_integral(lam: np.ndarray, iv: Interval) -> np.ndarray:
    """integral of exp(-lam t) over iv for lam >= 0, stable for any lam."""
    lam = np.asarray(lam, dtype=float)
    out = np.full(lam.shape, iv.length)
    pos = lam > 0
    lp = lam[pos]
    out[pos] = -np.expm1(-lp * iv.length) * np.exp(-lp * iv.lo) / lp
    return out


def exp_power_integrals(lam: np.ndarray, iv: Interval, max_b: int) -> np.ndarray:
    """E[n, b] = integral exp(-lam_n t) tau^b dt with tau the centered scaled
    coordinate of iv."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    h = iv.length
    E = np.zeros((lam.shape[0], max_b + 1))
    E[:, 0] = exp_integral(lam, iv)
    if max_b == 0:
        return E
    big = lam * h > RECURRENCE_THRESHOLD
    if np.any(big):
        lb = lam[big]
        e_lo, e_hi = np.exp(-lb * iv.lo), np.exp(-lb * iv.hi)
        for b in range(1, max_b + 1):
            E[big, b] = (e_lo * (-0.5) ** b - e_hi * 0.5**b) / lb + (b / (lb * h)) * E[
                big, b - 1
            ]
    if np.any(~big):
        rule = gauss_rule(_SMALL_RULE_N, iv)
        tau = (rule.nodes - iv.center) / h
        powers = tau[None, :] ** np.arange(max_b + 1)[:, None]
        decay = np.exp(-np.outer(lam[~big], rule.nodes))
        E[~big, :] = (decay * rule.weights) @ powers.T
    return E


def power_integral(gamma: float, iv: Interval) -> float:
    """integral of t^gamma over iv (iv.lo >= 0, gamma > -1)."""
    g1 = gamma + 1.0
    return (iv.hi**g1 - iv.lo**g1) / g1


def power_tau_integrals(gamma: float, iv: Interval, max_b: int) -> np.ndarray:
    """P[b] = integral t^gamma tau^b dt on iv with iv.lo >= 0, gamma > -1.

    Exact antiderivatives on elements touching t = 0; Gauss on elements far
    from it; geometrically composited Gauss panels when 0 < t_lo < h/2 so
    the nearby branch point never degrades convergence.
    """
    if gamma <= -1.0:
        raise ValueError("exponent must be > -1 for integrability")
    t0, t1, h = iv.lo, iv.hi, iv.length
    tc = iv.center
    bs = np.arange(max_b + 1)
    if t0 == 0.0:
        P = np.zeros(max_b + 1)
        for b in range(max_b + 1):
            js = np.arange(b + 1)
            terms = (
                np.array([math.comb(b, int(j)) for j in js])
                * (-tc) ** (b - js)
                * t1 ** (gamma + js + 1)
                / (gamma + js + 1)
            )
            P[b] = terms.sum() / h**b
        return P
    if t0 >= 0.5 * h:
        rule = gauss_rule(24, iv)
        tau = (rule.nodes - tc) / h
        return (rule.nodes**gamma * rule.weights) @ (
            tau[:, None] ** bs[None, :]
        )
    # nearby singularity: geometric panels doubling away from t0
    cuts = [t0]
    while cuts[-1] * 2.0 < t1:
        cuts.append(cuts[-1] * 2.0)
    cuts.append(t1)
    P = np.zeros(max_b + 1)
    for a, b_end in zip(cuts[:-1], cuts[1:]):
        rule = gauss_rule(16, Interval(a, b_end))
        tau = (rule.nodes - tc) / h
        P += (rule.nodes**gamma * rule.weights) @ (tau[:, None] ** bs[None, :])
    return P


# ---------------------------------------------------------------------------
# Exact solutions


@dataclasses.dataclass
class ExactSolution:
    """Separable exact solution of the heat equation on (0,1) x (0,T).

    ``kind == "modal"``: u = sum_n c_n sin(k_n x) exp(-lam_n t), with the
    source f given by its own mode list (empty/None means f is identically
    zero). ``kind == "power"``: u = sin(pi x) t^alpha with the matching
    source; its time derivative is integrable only for alpha > 1/2 in the
    mesh-weighted sense the scheme requires.
    """

    label: str
    kind: str
    modes: np.ndarray | None = None  # columns: coefficient, wavenumber, decay rate
    f_modes: np.ndarray | None = None
    alpha: float | None = None
    u0_kind: str = "modal"  # "modal" | "zero" | "constant"
    u0_value: float = 1.0
    singular: bool = False

    # -- pointwise callables (oracles, plotting, quadrature fallback) --

    def u(self, x, t):
        x, t = np.asarray(x, float), np.asarray(t, float)
        if self.kind == "power":
            return np.sin(np.pi * x) * np.where(t > 0, t, 1.0) ** self.alpha * (t > 0)
        c, k, lam = self.modes.T
        return np.einsum(
            "n,n...->...", c, np.sin(np.multiply.outer(k, x)) * np.exp(-np.multiply.outer(lam, t))
        )

    def ux(self, x, t):
        x, t = np.asarray(x, float), np.asarray(t, float)
        if self.kind == "power":
            return np.pi * np.cos(np.pi * x) * np.where(t > 0, t, 1.0) ** self.alpha * (t > 0)
        c, k, lam = self.modes.T
        return np.einsum(
            "n,n...->...",
            c * k,
            np.cos(np.multiply.outer(k, x)) * np.exp(-np.multiply.outer(lam, t)),
        )

    @property
    def has_source(self) -> bool:
        if self.kind == "power":
            return True
        return self.f_modes is not None and len(self.f_modes) > 0

    def f(self, x, t):
        x, t = np.asarray(x, float), np.asarray(t, float)
        if self.kind == "power":
            a = self.alpha
            tt = np.where(t > 0, t, 1.0)
            return np.sin(np.pi * x) * (
                a * tt ** (a - 1) + np.pi**2 * tt**a
            ) * (t > 0)
        if not self.has_source:
            return np.zeros(np.broadcast(x, t).shape)
        c, k, lam = self.f_modes.T
        return np.einsum(
            "n,n...->...",
            c,
            np.sin(np.multiply.outer(k, x)) * np.exp(-np.multiply.outer(lam, t)),
        )

    def u0(self, x):
        x = np.asarray(x, float)
        if self.u0_kind == "zero":
            return np.zeros_like(x)
        if self.u0_kind == "constant":
            return np.full_like(x, self.u0_value)
        c, k, _ = self.modes.T
        return np.einsum("n,n...->...", c, np.sin(np.multiply.outer(k, x)))

    # -- mode bookkeeping --

    def _active(self, t_lo: float) -> np.ndarray:
        lam = self.modes[:, 2]
        return lam * max(t_lo, 0.0) <= ACTIVE_MODE_EXPONENT

    def _active_modes(self, t_lo: float):
        keep = self._active(t_lo)
        m = self.modes[keep]
        return m[:, 0], m[:, 1], m[:, 2]

    # -- closed-form moments --

    def u_bulk_moments(self, basis2: ScaledMonomialBasis) -> np.ndarray:
        """Measure-normalized moments (1/|K|) integral u m_j."""
        x_iv, t_iv = _interval_of(basis2, 0), _interval_of(basis2, 1)
        exps = np.array(basis2.exponents)
        a_exp, b_exp = exps[:, 0], exps[:, 1]
        area = x_iv.length * t_iv.length
        if self.kind == "power":
            S, _ = trig_power_integrals(np.pi, x_iv, int(a_exp.max()))
            P = power_tau_integrals(self.alpha, t_iv, int(b_exp.max()))
            return S[0, a_exp] * P[b_exp] / area
        c, k, lam = self._active_modes(t_iv.lo)
        if c.size == 0:
            return np.zeros(basis2.dimension)
        S, _ = trig_power_integrals(k, x_iv, int(a_exp.max()))
        E = exp_power_integrals(lam, t_iv, int(b_exp.max()))
        return (c[:, None] * S[:, a_exp] * E[:, b_exp]).sum(axis=0) / area

    def u_facet_moments(self, x_pos: float, fb: ScaledMonomialBasis) -> np.ndarray:
        """Normalized moments of the fixed-x trace against a time basis."""
        t_iv = _interval_of(fb)
        degs = np.arange(fb.dimension)
        if self.kind == "power":
            P = power_tau_integrals(self.alpha, t_iv, fb.degree)
            return np.sin(np.pi * x_pos) * P[degs] / t_iv.length
        c, k, lam = self._active_modes(t_iv.lo)
        if c.size == 0:
            return np.zeros(fb.dimension)
        E = exp_power_integrals(lam, t_iv, fb.degree)
        weights = c * np.sin(k * x_pos)
        return (weights[:, None] * E[:, degs]).sum(axis=0) / t_iv.length

    def u_space_moments(self, t_pos: float, sb: ScaledMonomialBasis) -> np.ndarray:
        """Normalized moments of the fixed-t trace against a space basis."""
        x_iv = _interval_of(sb)
        degs = np.arange(sb.dimension)
        if self.kind == "power":
            factor = t_pos**self.alpha if t_pos > 0 else 0.0
            S, _ = trig_power_integrals(np.pi, x_iv, sb.degree)
            return factor * S[0, degs] / x_iv.length
        c, k, lam = self._active_modes(t_pos)
        if c.size == 0:
            return np.zeros(sb.dimension)
        S, _ = trig_power_integrals(k, x_iv, sb.degree)
        weights = c * np.exp(-lam * t_pos)
        return (weights[:, None] * S[:, degs]).sum(axis=0) / x_iv.length

    def dx_pair_vector(self, basis2: ScaledMonomialBasis) -> np.ndarray:
        """b[j] = integral (d_x u)(d_x m_j) over the element of basis2."""
        x_iv, t_iv = _interval_of(basis2, 0), _interval_of(basis2, 1)
        exps = np.array(basis2.exponents)
        a_exp, b_exp = exps[:, 0], exps[:, 1]
        Dx = basis2.deriv_matrix(0)
        if self.kind == "power":
            _, C = trig_power_integrals(np.pi, x_iv, int(a_exp.max()))
            P = power_tau_integrals(self.alpha, t_iv, int(b_exp.max()))
            mix = np.pi * C[0, a_exp] * P[b_exp]
        else:
            c, k, lam = self._active_modes(t_iv.lo)
            if c.size == 0:
                return np.zeros(basis2.dimension)
            _, C = trig_power_integrals(k, x_iv, int(a_exp.max()))
            E = exp_power_integrals(lam, t_iv, int(b_exp.max()))
            mix = ((c * k)[:, None] * C[:, a_exp] * E[:, b_exp]).sum(axis=0)
        return Dx.T @ mix

    def dx_square(self, x_iv: Interval, t_iv: Interval) -> float:
        """integral |d_x u|^2 over the cell."""
        if self.kind == "power":
            xx = 0.5 * (cos_integral(np.array(0.0), x_iv) + cos_integral(2 * np.pi, x_iv))
            return float(np.pi**2 * xx * power_integral(2 * self.alpha, t_iv))
        c, k, lam = self._active_modes(t_iv.lo)
        if c.size == 0:
            return 0.0
        ck = c * k
        Xd = cos_integral(k[:, None] - k[None, :], x_iv)
        Xs = cos_integral(k[:, None] + k[None, :], x_iv)
        T = exp_integral(lam[:, None] + lam[None, :], t_iv)
        return float(np.einsum("n,m,nm,nm->", ck, ck, 0.5 * (Xd + Xs), T))

    def f_bulk_integrals(self, basis2: ScaledMonomialBasis, nb: int) -> np.ndarray:
        """Raw integrals of the source against the first nb monomials."""
        x_iv, t_iv = _interval_of(basis2, 0), _interval_of(basis2, 1)
        exps = np.array(basis2.exponents)[:nb]
        a_exp, b_exp = exps[:, 0], exps[:, 1]
        if self.kind == "power":
            a = self.alpha
            S, _ = trig_power_integrals(np.pi, x_iv, int(a_exp.max()))
            P1 = power_tau_integrals(a - 1.0, t_iv, int(b_exp.max()))
            P2 = power_tau_integrals(a, t_iv, int(b_exp.max()))
            return S[0, a_exp] * (a * P1[b_exp] + np.pi**2 * P2[b_exp])
        if not self.has_source:
            return np.zeros(nb)
        fm = self.f_modes
        keep = fm[:, 2] * max(t_iv.lo, 0.0) <= ACTIVE_MODE_EXPONENT
        c, k, lam = fm[keep, 0], fm[keep, 1], fm[keep, 2]
        if c.size == 0:
            return np.zeros(nb)
        S, _ = trig_power_integrals(k, x_iv, int(a_exp.max()))
        E = exp_power_integrals(lam, t_iv, int(b_exp.max()))
        return (c[:, None] * S[:, a_exp] * E[:, b_exp]).sum(axis=0)

    def f_square(self, x_iv: Interval, t_iv: Interval) -> float:
        """integral f^2 over the cell."""
        if self.kind == "power":
            a = self.alpha
            sin_sq = 0.5 * (
                cos_integral(np.array(0.0), x_iv) - cos_integral(2 * np.pi, x_iv)
            )
            tpart = (
                a**2 * power_integral(2 * a - 2.0, t_iv)
                + 2 * a * np.pi**2 * power_integral(2 * a - 1.0, t_iv)
                + np.pi**4 * power_integral(2 * a, t_iv)
            )
            return float(sin_sq * tpart)
        if not self.has_source:
            return 0.0
        fm = self.f_modes
        keep = fm[:, 2] * max(t_iv.lo, 0.0) <= ACTIVE_MODE_EXPONENT
        c, k, lam = fm[keep, 0], fm[keep, 1], fm[keep, 2]
        if c.size == 0:
            return 0.0
        Xd = cos_integral(k[:, None] - k[None, :], x_iv)
        Xs = cos_integral(k[:, None] + k[None, :], x_iv)
        T = exp_integral(lam[:, None] + lam[None, :], t_iv)
        return float(np.einsum("n,m,nm,nm->", c, c, 0.5 * (Xd - Xs), T))

    def u0_integrals(self, basis: ScaledMonomialBasis) -> np.ndarray:
        """Raw integrals of the solver's initial datum against a 1D basis."""
        x_iv = _interval_of(basis)
        if self.u0_kind == "zero":
            return np.zeros(basis.dimension)
        if self.u0_kind == "constant":
            return self.u0_value * basis.monomial_integrals()
        c, k, _ = self.modes.T
        S, _ = trig_power_integrals(k, x_iv, basis.degree)
        return (c[:, None] * S[:, np.arange(basis.dimension)]).sum(axis=0)

    def u0_square(self, x_iv: Interval) -> float:
        if self.u0_kind == "zero":
            return 0.0
        if self.u0_kind == "constant":
            return self.u0_value**2 * x_iv.length
        c, k, _ = self.modes.T
        Xd = cos_integral(k[:, None] - k[None, :], x_iv)
        Xs = cos_integral(k[:, None] + k[None, :], x_iv)
        return float(np.einsum("n,m,nm->", c, c, 0.5 * (Xd - Xs)))

    # -- quadrature fallback / oracle counterparts --

    def _t_rule(self, t_iv: Interval, n: int):
        if self.singular and t_iv.lo <= 1e-14:
            return graded_rule(t_iv, "lo", n=n)
        return gauss_rule(n, t_iv)

    def u_bulk_moments_quad(self, basis2: ScaledMonomialBasis, n: int | None = None):
        x_iv, t_iv = _interval_of(basis2, 0), _interval_of(basis2, 1)
        n = n if n is not None else 2 * basis2.degree + 6
        rule = tensor_rule(gauss_rule(n, x_iv), self._t_rule(t_iv, n))
        return moments(self.u, basis2, rule)

    def dx_square_quad(self, x_iv: Interval, t_iv: Interval, n: int = 20) -> float:
        rule = tensor_rule(gauss_rule(n, x_iv), self._t_rule(t_iv, n))
        return rule.integrate(
            lambda x, t: self.ux(x, t) ** 2
        )

    def dx_pair_vector_quad(self, basis2: ScaledMonomialBasis, n: int = 20):
        x_iv, t_iv = _interval_of(basis2, 0), _interval_of(basis2, 1)
        rule = tensor_rule(gauss_rule(n, x_iv), self._t_rule(t_iv, n))
        Dx = basis2.deriv_matrix(0)
        X, T = rule.nodes[:, 0], rule.nodes[:, 1]
        dxm = basis2.eval(X, T) @ Dx
        return (rule.weights * self.ux(X, T)) @ dxm

    def f_square_quad(self, x_iv: Interval, t_iv: Interval, n: int = 24) -> float:
        rule = tensor_rule(gauss_rule(n, x_iv), self._t_rule(t_iv, n))
        return rule.integrate(lambda x, t: self.f(x, t) ** 2)

    def f_bulk_integrals_quad(self, basis2: ScaledMonomialBasis, nb: int, n: int = 24):
        x_iv, t_iv = _interval_of(basis2, 0), _interval_of(basis2, 1)
        rule = tensor_rule(gauss_rule(n, x_iv), self._t_rule(t_iv, n))
        return x_iv.length * t_iv.length * moments(self.f, basis2, rule)[:nb]

    def u_facet_moments_quad(self, x_pos: float, fb: ScaledMonomialBasis, n: int = 20):
        t_iv = _interval_of(fb)
        rule = self._t_rule(t_iv, n)
        return moments(lambda t: self.u(np.full_like(t, x_pos), t), fb, rule)

    def u_space_moments_quad(self, t_pos: float, sb: ScaledMonomialBasis, n: int = 20):
        x_iv = _interval_of(sb)
        rule = gauss_rule(n, x_iv)
        return moments(lambda x: self.u(x, np.full_like(x, t_pos)), sb, rule)


def test_case(which: int, alpha: float | None = None) -> ExactSolution:
    """The three benchmark solutions: a single decaying Fourier mode, a
    solution with an algebraic power of t (reduced time regularity at t=0),
    and a 251-term Fourier series with an initial boundary layer (its source
    is identically zero; the solver's initial datum is the trace of the
    truncated series, so data and error reference describe one solution)."""
    if which == 1:
        pi = np.pi
        return ExactSolution(
            label="decaying-mode",
            kind="modal",
            modes=np.array([[1.0, pi, 1.0]]),
            f_modes=np.array([[pi**2 - 1.0, pi, 1.0]]),
            u0_kind="modal",
        )
    if which == 2:
        if alpha is None:
            raise ValueError("test case 2 needs an exponent alpha")
        if alpha <= 0.5:
            raise ValueError(
                "alpha must exceed 1/2 (the time derivative must be square "
                "integrable against the mesh weights)"
            )
        return ExactSolution(
            label=f"power-alpha-{alpha:g}",
            kind="power",
            alpha=float(alpha),
            u0_kind="zero",
            singular=True,
        )
    if which == 3:
        ns = np.arange(251)
        odd = 2 * ns + 1
        k = odd * np.pi
        return ExactSolution(
            label="series",
            kind="modal",
            modes=np.column_stack([4.0 / (odd * np.pi), k, k**2]),
            f_modes=None,
            u0_kind="modal",
            singular=True,
        )
    raise ValueError(f"unknown test case {which!r}")


def problem_data(exact: ExactSolution, nu: float = 1.0, c_H: float = 1.0) -> ProblemData:
    """Problem data for the solver with closed-form moment hooks."""
    f_mom = None
    f_call = None
    if exact.has_source:
        f_call = exact.f

        def f_mom(elem: LocalElement, nb: int):
            return exact.f_bulk_integrals(
                basis_2d(elem.degree, elem.x_iv, elem.t_iv), nb
            )

    has_u0 = exact.u0_kind != "zero"
    return ProblemData(
        nu=nu,
        c_H=c_H,
        f=f_call,
        u0=exact.u0 if has_u0 else None,
        g=None,
        f_moments=f_mom,
        u0_moments=(lambda x_iv, basis: exact.u0_integrals(basis)) if has_u0 else None,
    )


def dof_evaluate_exact(exact: ExactSolution, elem: LocalElement) -> np.ndarray:
    """DoF vector of the exact solution via the closed-form moment engine."""
    layout = dof_layout(elem)
    dofs = np.zeros(layout.total)
    basis2 = basis_2d(elem.degree, elem.x_iv, elem.t_iv)
    dofs[layout.bulk] = exact.u_bulk_moments(basis2)[: layout.bulk_count]
    for kf, fc in enumerate(elem.facets):
        x_pos = elem.x_iv.lo if kf < len(elem.left) else elem.x_iv.hi
        fb = basis_1d(fc.moment_degree, fc.t_iv)
        dofs[layout.facet(kf)] = exact.u_facet_moments(x_pos, fb)
    sb = basis_1d(elem.degree, elem.x_iv)
    dofs[layout.space] = exact.u_space_moments(elem.t_iv.lo, sb)
    return dofs


# ---------------------------------------------------------------------------
# Error measures


@dataclasses.dataclass
class ErrorReport:
    EY: float
    EU: float
    EN: float | None = None
    per_element_Y: dict[int, float] | None = None
    newton_fallback: bool = False

    @property
    def EX(self) -> float | None:
        if self.EN is None:
            return None
        return math.sqrt(self.EY**2 + self.EN**2 + self.EU**2)


def error_Y(solution: Solution, exact: ExactSolution):
    """Broken seminorm nu^(1/2) ||d_x(u - PiN u_h)|| over the mesh; returns
    (total, per-element squared contributions)."""
    nu = solution.problem.nu
    per: dict[int, float] = {}
    for eid in solution.mesh.leaf_ids:
        lm = solution.local(eid)
        elem = lm.elem
        w = lm.ops.PiN @ solution.element_dofs(eid)
        b = exact.dx_pair_vector(lm.ops.basis2)
        val = exact.dx_square(elem.x_iv, elem.t_iv) - 2.0 * (w @ b) + w @ (lm.ops.Kxx @ w)
        per[eid] = nu * max(val, 0.0)
    return math.sqrt(sum(per.values())), per


def _bottom_trace_jumps(solution: Solution, weights: np.ndarray | dict):
    """Iterate interior space-like facets yielding the jump of the PiStar
    trace of the given DoF vectors in the facet's own basis."""
    mesh = solution.mesh
    for sf in mesh.space_facets:
        if sf.below_elem is None:
            continue
        plus, minus = sf.above_elem, sf.below_elem
        lp, lmn = solution.local(plus), solution.local(minus)
        ex_deg = max(lp.elem.degree, lmn.elem.degree)
        ex_basis = basis_1d(ex_deg, sf.x_iv)
        Wp = shift_matrix_1d(lp.ops.space_basis, ex_basis)
        Wm = shift_matrix_1d(lmn.ops.space_basis, ex_basis)
        top = Wm @ (lmn.ops.TTpoly @ (lmn.ops.PiStar @ weights[minus]))
        bot = Wp @ (lp.ops.TBpoly @ (lp.ops.PiStar @ weights[plus]))
        yield sf, plus, bot - top, ex_basis


def error_U(solution: Solution, exact: ExactSolution) -> float:
    """Upwind trace error: initial and final traces of PiStar(u - u_h) plus
    the interior upwind jumps, all weighted by c_H/2 (the jump functional
    itself carries c_H)."""
    mesh = solution.mesh
    c_H = solution.problem.c_H
    diff = {
        eid: dof_evaluate_exact(exact, solution.dof_map.local_elements[eid])
        - solution.element_dofs(eid)
        for eid in mesh.leaf_ids
    }
    total = 0.0
    T = mesh.domain_t.hi
    for eid in mesh.leaf_ids:
        lm = solution.local(eid)
        if abs(lm.elem.t_iv.lo - mesh.domain_t.lo) <= mesh.tol:
            ce = lm.ops.TraceB @ diff[eid]
            total += ce @ (lm.ops.space_basis.gram() @ ce)
        if abs(lm.elem.t_iv.hi - T) <= mesh.tol:
            ce = lm.ops.TTpoly @ (lm.ops.PiStar @ diff[eid])
            total += ce @ (lm.ops.space_basis.gram() @ ce)
    for sf, plus, jump, ex_basis in _bottom_trace_jumps(solution, diff):
        total += c_H**2 * (jump @ (ex_basis.gram() @ jump))
    return math.sqrt(0.5 * c_H * total)


def error_N(solution: Solution, exact: ExactSolution):
    """Parabolic dual-norm component: solve the symmetric energy system
    a_h(w, v) = time-derivative-plus-upwind pairing of PiStar(u - u_h), then
    measure w in the projected energy seminorm. Returns (value, fallback)."""
    mesh = solution.mesh
    dm = solution.dof_map
    nu, c_H = solution.problem.nu, solution.problem.c_H
    rhs = np.zeros(dm.n_total)
    phi: dict[int, np.ndarray] = {}
    for eid in mesh.leaf_ids:
        lm = solution.local(eid)
        diff = dof_evaluate_exact(exact, dm.local_elements[eid]) - solution.element_dofs(eid)
        phi[eid] = lm.ops.PiStar @ diff
        idx = dm.elem_indices[eid]
        # (dt phi, v) = (dt phi, PiStar v) exactly, since dt phi has degree
        # p-1 and PiStar preserves moments against P_{p-1}.  Pairing against
        # the full projection (rather than the bulk moments alone) keeps the
        # summation-by-parts cancellation with the trace terms intact even on
        # strongly anisotropic elements.
        rhs[idx] += c_H * (lm.ops.PiStar.T @ (lm.ops.G2 @ (lm.ops.Dt @ phi[eid])))
    for sf in mesh.space_facets:
        plus = sf.above_elem
        lp = solution.local(plus)
        idx_p = dm.elem_indices[plus]
        ex_deg = lp.elem.degree
        p_bot = lp.ops.TBpoly @ phi[plus]
        if sf.below_elem is None:
            ex_basis = basis_1d(ex_deg, sf.x_iv)
            Wp = shift_matrix_1d(lp.ops.space_basis, ex_basis)
            rhs[idx_p] += c_H * (
                lp.ops.TraceB.T @ (Wp.T @ (ex_basis.gram() @ (Wp @ p_bot)))
            )
        else:
            lmn = solution.local(sf.below_elem)
            ex_deg = max(ex_deg, lmn.elem.degree)
            ex_basis = basis_1d(ex_deg, sf.x_iv)
            Wp = shift_matrix_1d(lp.ops.space_basis, ex_basis)
            Wm = shift_matrix_1d(lmn.ops.space_basis, ex_basis)
            p_top = lmn.ops.TTpoly @ phi[sf.below_elem]
            rhs[idx_p] += c_H * (
                lp.ops.TraceB.T
                @ (Wp.T @ (ex_basis.gram() @ (Wp @ p_bot - Wm @ p_top)))
            )
    A = assemble_energy_matrix(dm, solution.cache, nu)
    res = solve_energy_system(A, dm.free_mask, rhs)
    total = 0.0
    for eid in mesh.leaf_ids:
        lm = solution.local(eid)
        w = res.values[dm.elem_indices[eid]]
        total += nu * (w @ (lm.A_proj @ w))
    return math.sqrt(max(total, 0.0)), res.used_fallback


def compute_errors(
    solution: Solution, exact: ExactSolution, with_EN: bool = False
) -> ErrorReport:
    ey, per = error_Y(solution, exact)
    eu = error_U(solution, exact)
    en, fb = (None, False)
    if with_EN:
        en, fb = error_N(solution, exact)
    return ErrorReport(EY=ey, EU=eu, EN=en, per_element_Y=per, newton_fallback=fb)


# ---------------------------------------------------------------------------
# A posteriori indicator


@dataclasses.dataclass
class IndicatorReport:
    per_element: dict[int, float]  # eta_K^2
    term_sums: tuple[float, float, float, float, float]  # eta_1^2 .. eta_5^2

    @property
    def eta(self) -> float:
        return math.sqrt(max(sum(self.term_sums), 0.0))

    @property
    def total_sq(self) -> float:
        return sum(self.per_element.values())


def _side_trace_coeffs(coeffs: np.ndarray, basis2: ScaledMonomialBasis, xi0: float):
    """Coefficients (in powers of the element's tau) of a bulk polynomial's
    trace on the side with scaled coordinate xi0 = -1/2 or +1/2."""
    exps = np.array(basis2.exponents)
    out = np.zeros(basis2.degree + 1)
    np.add.at(out, exps[:, 1], coeffs * xi0 ** exps[:, 0])
    return out


def indicator(solution: Solution, exact: ExactSolution) -> IndicatorReport:
    """Residual-based indicator with five parts: bulk residual, flux jumps
    across time-like facets, nonconformity of the energy projection's traces,
    upwind jumps at space-like facets, and the stabilization term."""
    mesh = solution.mesh
    nu, c_H = solution.problem.nu, solution.problem.c_H
    per = {eid: 0.0 for eid in mesh.leaf_ids}
    t1 = t2 = t3 = t4 = t5 = 0.0

    pin_coeffs: dict[int, np.ndarray] = {}
    for eid in mesh.leaf_ids:
        lm = solution.local(eid)
        elem, ops = lm.elem, lm.ops
        w = solution.element_dofs(eid)
        pin_w = ops.PiN @ w
        pin_coeffs[eid] = pin_w
        # bulk residual f + nu (PiN u_h)_xx - c_H (PiStar u_h)_t
        rpoly = nu * (ops.Dx @ (ops.Dx @ pin_w)) - c_H * (ops.Dt @ (ops.PiStar @ w))
        nb = lm.layout.bulk_count
        f_sq = exact.f_square(elem.x_iv, elem.t_iv) if exact.has_source else 0.0
        f_pair = (
            exact.f_bulk_integrals(ops.basis2, nb) @ rpoly[:nb]
            if exact.has_source
            else 0.0
        )
        r_sq = f_sq + 2.0 * f_pair + rpoly @ (ops.G2 @ rpoly)
        e1 = (elem.hx / elem.degree) ** 2 / nu * max(r_sq, 0.0)
        # stabilization of the discrete solution
        e5 = nu * max(w @ (lm.SC @ w), 0.0)
        per[eid] += e1 + e5
        t1 += e1
        t5 += e5

    # flux and value jumps across time-like facets
    for f in mesh.time_facets:
        fb = basis_1d(f.moment_degree, f.t_iv)
        GF = fb.gram()
        sides = []
        for eid, xi0 in ((f.left_elem, 0.5), (f.right_elem, -0.5)):
            if eid is None:
                continue
            lm = solution.local(eid)
            ops = lm.ops
            shift = shift_matrix_1d(basis_1d(ops.basis2.degree, lm.elem.t_iv), fb)
            flux = shift @ _side_trace_coeffs(
                ops.Dx @ pin_coeffs[eid], ops.basis2, xi0
            )
            value = shift @ _side_trace_coeffs(pin_coeffs[eid], ops.basis2, xi0)
            sides.append((eid, lm.elem.degree, flux, value))
        if len(sides) == 2:
            (id_a, p_a, flux_a, val_a), (id_b, p_b, flux_b, val_b) = sides
            jf = flux_a - flux_b
            jv = val_a - val_b
            j2 = max(jf @ (GF @ jf), 0.0)
            j3 = max(jv @ (GF @ jv), 0.0)
            for eid, p in ((id_a, p_a), (id_b, p_b)):
                e2 = 0.5 * nu * (f.h_Fx / p) * j2
                e3 = 0.5 * nu * (p / f.h_Fx) * j3
                per[eid] += e2 + e3
                t2 += e2
                t3 += e3
        else:
            eid, p, _, val = sides[0]
            e3 = nu * (p / f.h_Fx) * max(val @ (GF @ val), 0.0)
            per[eid] += e3
            t3 += e3

    # upwind jumps at space-like facets (data residual at t = 0)
    for sf in mesh.space_facets:
        plus = sf.above_elem
        lp = solution.local(plus)
        if sf.below_elem is None:
            ex_basis = basis_1d(lp.elem.degree, sf.x_iv)
            Wp = shift_matrix_1d(lp.ops.space_basis, ex_basis)
            c = Wp @ (lp.ops.TraceB @ solution.element_dofs(plus))
            val = (
                c @ (ex_basis.gram() @ c)
                - 2.0 * (c @ exact.u0_integrals(ex_basis))
                + exact.u0_square(sf.x_iv)
            )
        else:
            lmn = solution.local(sf.below_elem)
            ex_basis = basis_1d(max(lp.elem.degree, lmn.elem.degree), sf.x_iv)
            Wp = shift_matrix_1d(lp.ops.space_basis, ex_basis)
            Wm = shift_matrix_1d(lmn.ops.space_basis, ex_basis)
            jump = Wp @ (
                lp.ops.TBpoly @ (lp.ops.PiStar @ solution.element_dofs(plus))
            ) - Wm @ (
                lmn.ops.TTpoly @ (lmn.ops.PiStar @ solution.element_dofs(sf.below_elem))
            )
            val = jump @ (ex_basis.gram() @ jump)
        e4 = c_H * max(val, 0.0)
        per[plus] += e4
        t4 += e4

    return IndicatorReport(per_element=per, term_sums=(t1, t2, t3, t4, t5))
