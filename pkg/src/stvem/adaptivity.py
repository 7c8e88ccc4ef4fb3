"""Dörfler marking, the SOLVE -> ESTIMATE -> MARK -> REFINE loop, and the
prescribed geometric mesh sequences for the hp studies.

The adaptive loop records one :class:`StudyRow` per solved mesh (errors,
indicator parts, effectivity, mesh statistics, wall time) and keeps the raw
per-element indicator values and marked sets so that marking minimality and
indicator bookkeeping can be audited after the fact.  Uniform-refinement
studies share the same row format via :func:`uniform_study`.
"""

from __future__ import annotations

import dataclasses
import math
import time

from .analysis import ExactSolution, compute_errors, indicator, problem_data
from .analysis import test_case as benchmark_case
from .assembly import ReferenceCache, Solution, SolverError, assemble_and_solve
from .geometry import (
    SpaceTimeMesh,
    cartesian_mesh,
    graded_mesh_t,
    graded_mesh_xt,
    refine,
)
from .polybasis import Interval


def doerfler_mark(per_element: dict[int, float], theta: float) -> list[int]:
    """Minimal-cardinality set A with sum_{K in A} eta_K^2 >= theta eta^2.

    Elements are taken greedily by decreasing indicator, ties broken by
    element id ascending (determinism); theta = 1 marks every element with a
    positive indicator. Returns the marked ids in marking order.
    """
    if not per_element:
        raise ValueError("cannot mark on an empty mesh")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    order = sorted(per_element.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(per_element.values())
    if total <= 0.0:
        return []
    if theta == 1.0:
        return [eid for eid, v in order if v > 0.0]
    target = theta * total
    marked: list[int] = []
    acc = 0.0
    for eid, v in order:
        if acc >= target:
            break
        marked.append(eid)
        acc += v
    return marked


@dataclasses.dataclass
class AdaptiveConfig:
    """Parameters of an adaptive run: benchmark case, polynomial degree,
    Dörfler parameter, and stopping rules."""

    test_case: int
    theta: float = 0.9
    degree: int = 1
    alpha: float | None = None
    max_steps: int = 25
    max_dofs: int = 200_000
    compute_EN: bool = True
    nu: float = 1.0
    c_H: float = 1.0
    t_final: float | None = None
    cache_enabled: bool = True
    mode: str = "slab"

    def __post_init__(self) -> None:
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.max_dofs < 1:
            raise ValueError(f"max_dofs must be >= 1, got {self.max_dofs}")

    def exact(self) -> ExactSolution:
        return benchmark_case(self.test_case, alpha=self.alpha)

    def final_time(self) -> float:
        if self.t_final is not None:
            return self.t_final
        return 0.1 if self.test_case == 2 else 1.0


@dataclasses.dataclass
class StudyRow:
    step: int
    n_dofs: int
    EY: float
    EN: float | None
    EU: float
    EX: float | None
    eta_parts: tuple[float, float, float, float, float]
    eta: float
    effectivity: float | None
    n_elements: int
    n_slabs: int
    n_ref_elements: int
    seconds: float


@dataclasses.dataclass
class StudyReport:
    rows: list[StudyRow]
    final_mesh: SpaceTimeMesh
    indicators: list[dict[int, float]]  # per-step eta_K^2
    marked: list[list[int]]  # marked set of every non-final step
    newton_fallback: bool = False

    def column(self, name: str) -> list:
        return [getattr(row, name) for row in self.rows]


def _solve_step(
    mesh: SpaceTimeMesh,
    exact: ExactSolution,
    *,
    nu: float,
    c_H: float,
    compute_EN: bool,
    cache: ReferenceCache,
    mode: str,
) -> tuple[Solution, "object", "object"]:
    problem = problem_data(exact, nu=nu, c_H=c_H)
    solution = assemble_and_solve(mesh, problem, mode=mode, cache=cache)
    errors = compute_errors(solution, exact, with_EN=compute_EN)
    report = indicator(solution, exact)
    return solution, errors, report


def _make_row(step, mesh, solution, errors, report, seconds, n_ref) -> StudyRow:
    eff = report.eta / errors.EY if errors.EY > 0.0 else None
    return StudyRow(
        step=step,
        n_dofs=solution.n_dofs,
        EY=errors.EY,
        EN=errors.EN,
        EU=errors.EU,
        EX=errors.EX,
        eta_parts=report.term_sums,
        eta=report.eta,
        effectivity=eff,
        n_elements=mesh.n_leaves,
        n_slabs=mesh.slab_count,
        n_ref_elements=n_ref,
        seconds=seconds,
    )


def adapt_loop(
    config: AdaptiveConfig,
    mesh0: SpaceTimeMesh | None = None,
    mesh_sink=None,
) -> StudyReport:
    """SOLVE -> ESTIMATE -> MARK -> REFINE from the given mesh (default: the
    one-element mesh of the benchmark's space-time domain).

    One row is recorded per solved mesh; the loop stops when ``max_steps``
    rows exist, the DoF budget is exhausted, or nothing is marked. Solver
    failures abort the study with the step index attached. ``mesh_sink``
    (if given) receives ``(step, mesh)`` right after each row is recorded --
    refinement mutates the mesh in place, so consumers must snapshot there.

    One reference cache is carried through the whole run, so local builds
    are paid once per distinct class across the study; each row's
    ``n_ref_elements`` is the current mesh's own class count (the number of
    reference elements that mesh needs).
    """
    exact = config.exact()
    mesh = mesh0 if mesh0 is not None else cartesian_mesh(
        Interval(0.0, 1.0), config.final_time(), 1, 1, degree=config.degree
    )
    rows: list[StudyRow] = []
    indicators: list[dict[int, float]] = []
    marked_sets: list[list[int]] = []
    fallback = False
    cache = ReferenceCache(enabled=config.cache_enabled)
    for step in range(1, config.max_steps + 1):
        tic = time.perf_counter()
        try:
            solution, errors, report = _solve_step(
                mesh,
                exact,
                nu=config.nu,
                c_H=config.c_H,
                compute_EN=config.compute_EN,
                cache=cache,
                mode=config.mode,
            )
        except SolverError as exc:
            raise SolverError(f"step {step}: {exc.where}", str(exc)) from exc
        seconds = time.perf_counter() - tic
        rows.append(
            _make_row(step, mesh, solution, errors, report, seconds, mesh.n_topo_classes)
        )
        indicators.append(dict(report.per_element))
        fallback = fallback or errors.newton_fallback
        if mesh_sink is not None:
            mesh_sink(step, mesh)
        if step == config.max_steps or solution.n_dofs >= config.max_dofs:
            break
        marked = doerfler_mark(report.per_element, config.theta)
        if not marked:
            break
        marked_sets.append(marked)
        mesh = refine(mesh, marked)
    return StudyReport(
        rows=rows,
        final_mesh=mesh,
        indicators=indicators,
        marked=marked_sets,
        newton_fallback=fallback,
    )


def uniform_study(
    exact: ExactSolution,
    meshes: list[SpaceTimeMesh],
    *,
    nu: float = 1.0,
    c_H: float = 1.0,
    compute_EN: bool = True,
    cache_enabled: bool = True,
    mode: str = "slab",
    mesh_sink=None,
) -> StudyReport:
    """Solve a prescribed mesh sequence (uniform refinements or hp meshes)
    and record the same per-step rows as the adaptive loop, sharing one
    reference cache across the sequence."""
    if not meshes:
        raise ValueError("mesh sequence is empty")
    rows: list[StudyRow] = []
    indicators: list[dict[int, float]] = []
    fallback = False
    cache = ReferenceCache(enabled=cache_enabled)
    for step, mesh in enumerate(meshes, start=1):
        tic = time.perf_counter()
        try:
            solution, errors, report = _solve_step(
                mesh,
                exact,
                nu=nu,
                c_H=c_H,
                compute_EN=compute_EN,
                cache=cache,
                mode=mode,
            )
        except SolverError as exc:
            raise SolverError(f"step {step}: {exc.where}", str(exc)) from exc
        seconds = time.perf_counter() - tic
        rows.append(
            _make_row(step, mesh, solution, errors, report, seconds, mesh.n_topo_classes)
        )
        indicators.append(dict(report.per_element))
        fallback = fallback or errors.newton_fallback
        if mesh_sink is not None:
            mesh_sink(step, mesh)
    return StudyReport(
        rows=rows,
        final_mesh=meshes[-1],
        indicators=indicators,
        marked=[],
        newton_fallback=fallback,
    )


def hp_sequence(test: int, levels: int) -> list[SpaceTimeMesh]:
    """The geometric hp mesh families: for the reduced-time-regularity case,
    fixed h_x = 0.05 with time layers graded by sigma_t = 0.1 and degrees
    1..L from the bottom layer up; for the incompatible-data case, grading
    by sigma_x = sigma_t = 0.25 toward t = 0 and both spatial endpoints with
    degrees increasing per time layer."""
    if test not in (2, 3):
        raise ValueError(f"hp sequences exist for cases 2 and 3, got {test}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    meshes = []
    for level in range(1, levels + 1):
        if test == 2:
            meshes.append(
                graded_mesh_t(Interval(0.0, 1.0), 0.1, 0.05, 0.1, level)
            )
        else:
            meshes.append(
                graded_mesh_xt(Interval(0.0, 1.0), 1.0, 0.25, 0.25, level)
            )
    return meshes


def fit_slope(n_dofs: list[float], errors: list[float], last: int = 3) -> float:
    """Least-squares slope of log(err) against log(N_dofs) over the last
    ``last`` rows."""
    if len(n_dofs) < last or len(errors) < last:
        raise ValueError(f"need at least {last} rows to fit a rate")
    xs = [math.log(float(n)) for n in n_dofs[-last:]]
    ys = [math.log(float(e)) for e in errors[-last:]]
    xm = sum(xs) / last
    ym = sum(ys) / last
    num = sum((x - xm) * (y - ym) for x, y in zip(xs, ys))
    den = sum((x - xm) ** 2 for x in xs)
    return num / den
