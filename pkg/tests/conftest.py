"""Shared fixtures: the benchmark studies used by the acceptance tests.

Every study fixture is session-scoped because the underlying runs cost
seconds to minutes; each one is a plain ``StudyReport`` that several
acceptance checks read (rates, effectivities, bookkeeping, inventories).

``record_criterion`` collects one pass/fail verdict per acceptance
criterion; the terminal summary prints them as a single block so the
outcome of the whole acceptance suite is readable at a glance.
"""

from __future__ import annotations

import pytest

from stvem.adaptivity import (
    AdaptiveConfig,
    StudyReport,
    adapt_loop,
    hp_sequence,
    uniform_study,
)
from stvem.analysis import test_case
from stvem.geometry import Interval, cartesian_mesh

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Callable ``(number, passed, detail)`` feeding the summary block.

    Tests record their verdict *before* asserting, so a failing criterion
    still shows up as a FAIL line instead of vanishing from the report.
    """

    def _record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:02d}: {verdict} - {detail}")


# ---------------------------------------------------------------------------
# Mesh families


def _cart(t_final: float, nx: int, nt: int, degree: int):
    return cartesian_mesh(Interval(0.0, 1.0), t_final, nx, nt, degree)


def _square_meshes(t_final: float, degree: int, sizes=(10, 20, 40, 80)):
    """Uniform n-by-n meshes starting from a 10-by-10 grid."""
    return [_cart(t_final, n, n, degree) for n in sizes]


# ---------------------------------------------------------------------------
# h-version refinement studies (lowest order)


@pytest.fixture(scope="session")
def study_t2_h_a055() -> StudyReport:
    """Reduced-time-regularity case, alpha=0.55, p=1, h_t = 2 h_x halved
    six times from h_t = 0.1."""
    meshes = [_cart(0.1, 10 * 2**i, 2 ** (i - 1), 1) for i in range(1, 7)]
    return uniform_study(test_case(2, alpha=0.55), meshes, compute_EN=False)


@pytest.fixture(scope="session")
def study_t2_h_a075() -> StudyReport:
    """Same family as :func:`study_t2_h_a055` with alpha=0.75."""
    meshes = [_cart(0.1, 10 * 2**i, 2 ** (i - 1), 1) for i in range(1, 7)]
    return uniform_study(test_case(2, alpha=0.75), meshes, compute_EN=False)


@pytest.fixture(scope="session")
def study_t2_h_a075_full() -> StudyReport:
    """First four alpha=0.75 meshes with the full error (dual-norm part
    included) as the h-version baseline for the hp comparison."""
    meshes = [_cart(0.1, 10 * 2**i, 2 ** (i - 1), 1) for i in range(1, 5)]
    return uniform_study(test_case(2, alpha=0.75), meshes, compute_EN=True)


@pytest.fixture(scope="session")
def study_t3_h() -> StudyReport:
    """Incompatible-data case, p=1, h_t = 2 h_x = 2^(1-i), i = 1..8."""
    meshes = [_cart(1.0, 2**i, 2 ** (i - 1), 1) for i in range(1, 9)]
    return uniform_study(test_case(3), meshes, compute_EN=False)


@pytest.fixture(scope="session")
def study_t3_h_full() -> StudyReport:
    """First six incompatible-data meshes with the full error as the
    h-version baseline for the hp comparison."""
    meshes = [_cart(1.0, 2**i, 2 ** (i - 1), 1) for i in range(1, 7)]
    return uniform_study(test_case(3), meshes, compute_EN=True)


# ---------------------------------------------------------------------------
# hp-version studies on geometrically graded meshes


@pytest.fixture(scope="session")
def study_hp_t2() -> StudyReport:
    """Time-graded hp family (sigma_t = 0.1, degrees 1..L) for the
    reduced-time-regularity case with alpha = 0.75, L = 1..10."""
    return uniform_study(test_case(2, alpha=0.75), hp_sequence(2, 10), compute_EN=True)


@pytest.fixture(scope="session")
def study_hp_t3() -> StudyReport:
    """Corner-graded hp family (sigma_x = sigma_t = 0.25) for the
    incompatible-data case, L = 1..12."""
    return uniform_study(test_case(3), hp_sequence(3, 12), compute_EN=True)


# ---------------------------------------------------------------------------
# Adaptive studies


@pytest.fixture(scope="session")
def study_adaptive_t2() -> StudyReport:
    """Dörfler-driven run on the reduced-time-regularity case
    (alpha = 0.55, p = 2, theta = 0.99), twelve steps from one element."""
    config = AdaptiveConfig(
        test_case=2,
        theta=0.99,
        degree=2,
        alpha=0.55,
        max_steps=12,
        compute_EN=False,
    )
    return adapt_loop(config)


@pytest.fixture(scope="session")
def study_adaptive_t3() -> StudyReport:
    """Dörfler-driven run on the incompatible-data case
    (p = 1, theta = 0.9), eleven steps from one element."""
    config = AdaptiveConfig(
        test_case=3,
        theta=0.9,
        degree=1,
        max_steps=11,
        compute_EN=False,
    )
    return adapt_loop(config)


# ---------------------------------------------------------------------------
# Uniform studies for effectivity and adaptive-versus-uniform comparisons


@pytest.fixture(scope="session")
def study_t1_p1() -> StudyReport:
    return uniform_study(test_case(1), _square_meshes(1.0, 1), compute_EN=False)


@pytest.fixture(scope="session")
def study_t1_p2() -> StudyReport:
    return uniform_study(test_case(1), _square_meshes(1.0, 2), compute_EN=False)


@pytest.fixture(scope="session")
def study_t1_p3() -> StudyReport:
    return uniform_study(test_case(1), _square_meshes(1.0, 3), compute_EN=False)


@pytest.fixture(scope="session")
def study_t2_uniform_p2() -> StudyReport:
    """Uniform p=2 counterpart of the adaptive reduced-regularity run."""
    return uniform_study(
        test_case(2, alpha=0.55), _square_meshes(0.1, 2), compute_EN=False
    )


@pytest.fixture(scope="session")
def study_t3_uniform_p2() -> StudyReport:
    return uniform_study(test_case(3), _square_meshes(1.0, 2), compute_EN=False)
