"""Batch study driver.

One YAML config file describes one study (uniform h-refinement, prescribed
hp sequence, adaptive loop, or a single solve). ``stvem run`` executes it
and writes three artifacts into the output directory: ``study.csv`` (one row
per solved mesh, fixed column order), ``meshes/step_k.mesh`` snapshots in
the text mesh format, and ``summary.json`` with fitted convergence rates.
``stvem rates`` recomputes the rate fits from any study CSV, and
``stvem mesh-dump`` writes the prescribed mesh sequence without solving.

Exit codes: 0 success, 2 invalid or unreadable configuration (the message
names the offending field), 3 solver failure (the message carries the
step/slab location).
"""

from __future__ import annotations

import dataclasses
import json
import math
import pathlib
import sys

import click
import yaml

from .adaptivity import (
    AdaptiveConfig,
    StudyReport,
    adapt_loop,
    uniform_study,
)
from .analysis import test_case as benchmark_case
from .assembly import SolverError
from .geometry import (
    SpaceTimeMesh,
    cartesian_mesh,
    dump_mesh,
    graded_mesh_t,
    graded_mesh_xt,
)
from .polybasis import Interval

CSV_COLUMNS = (
    "step",
    "N_dofs",
    "EY",
    "EN",
    "EU",
    "EX",
    "eta1",
    "eta2",
    "eta3",
    "eta4",
    "eta5",
    "eta",
    "effectivity",
    "n_elements",
    "n_slabs",
    "n_ref_elements",
    "seconds",
)

MODES = ("h_uniform", "hp_graded", "adaptive", "single_solve")


class ConfigError(ValueError):
    """Invalid run configuration; `field` names the offending entry."""

    def __init__(self, field: str, reason: str):
        self.field = field
        super().__init__(f"invalid config field '{field}': {reason}")


@dataclasses.dataclass
class RunConfig:
    mode: str
    test_case: int
    degree: int = 1
    alpha: float | None = None
    nx: int | None = None
    nt: int | None = None
    steps: int | None = None
    levels: int | None = None
    sigma_x: float | None = None
    sigma_t: float | None = None
    theta: float | None = None
    max_steps: int = 25
    max_dofs: int = 200_000
    t_final: float | None = None
    nu: float = 1.0
    c_H: float = 1.0
    quad_n: int | None = None
    compute_EN: bool = True
    cache_on: bool = True
    record_seconds: bool = True
    output: str | None = None

    def final_time(self) -> float:
        if self.t_final is not None:
            return self.t_final
        return 0.1 if self.test_case == 2 else 1.0


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def validate_config(raw: dict) -> RunConfig:
    """Turn a parsed YAML mapping into a RunConfig, checking mode-specific
    completeness; raises ConfigError naming the first offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in raw:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown field")
    if "mode" not in raw:
        raise ConfigError("mode", "required")
    if "test_case" not in raw:
        raise ConfigError("test_case", "required")
    cfg = RunConfig(**raw)
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
    if cfg.test_case not in (1, 2, 3):
        raise ConfigError("test_case", "must be 1, 2, or 3")
    if cfg.test_case == 2:
        if cfg.alpha is None:
            raise ConfigError("alpha", "required for test case 2")
        if not cfg.alpha > 0.5:
            raise ConfigError("alpha", "must exceed 1/2")
    if cfg.degree < 1:
        raise ConfigError("degree", "must be >= 1")
    if cfg.nu <= 0:
        raise ConfigError("nu", "must be positive")
    if cfg.c_H <= 0:
        raise ConfigError("c_H", "must be positive")
    if cfg.t_final is not None and cfg.t_final <= 0:
        raise ConfigError("t_final", "must be positive")
    if cfg.quad_n is not None and cfg.quad_n < 1:
        raise ConfigError("quad_n", "must be >= 1")
    if cfg.mode in ("h_uniform", "single_solve"):
        for name in ("nx", "nt"):
            value = getattr(cfg, name)
            if value is None or value < 1:
                raise ConfigError(name, f"required (>= 1) for mode {cfg.mode}")
    if cfg.mode == "h_uniform":
        if cfg.steps is None or cfg.steps < 1:
            raise ConfigError("steps", "required (>= 1) for mode h_uniform")
    if cfg.mode == "hp_graded":
        if cfg.test_case not in (2, 3):
            raise ConfigError("test_case", "hp_graded supports cases 2 and 3")
        if cfg.levels is None or cfg.levels < 1:
            raise ConfigError("levels", "required (>= 1) for mode hp_graded")
        for name in ("sigma_x", "sigma_t"):
            value = getattr(cfg, name)
            if value is not None and not 0.0 < value < 1.0:
                raise ConfigError(name, "must lie in (0, 1)")
    if cfg.mode == "adaptive":
        if cfg.theta is None:
            raise ConfigError("theta", "required for mode adaptive")
        if not 0.0 < cfg.theta <= 1.0:
            raise ConfigError("theta", "must lie in (0, 1]")
        if cfg.max_steps < 1:
            raise ConfigError("max_steps", "must be >= 1")
        if cfg.max_dofs < 1:
            raise ConfigError("max_dofs", "must be >= 1")
    return cfg


def load_config(path: str | pathlib.Path) -> RunConfig:
    path = pathlib.Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from exc
    return validate_config(raw)


def study_meshes(cfg: RunConfig) -> list[SpaceTimeMesh]:
    """The prescribed mesh sequence of a non-adaptive study (for adaptive
    and single-solve runs: the initial mesh)."""
    omega = Interval(0.0, 1.0)
    T = cfg.final_time()
    if cfg.mode == "h_uniform":
        return [
            cartesian_mesh(omega, T, cfg.nx * 2**i, cfg.nt * 2**i, degree=cfg.degree)
            for i in range(cfg.steps)
        ]
    if cfg.mode == "hp_graded":
        meshes = []
        for level in range(1, cfg.levels + 1):
            if cfg.test_case == 2:
                meshes.append(
                    graded_mesh_t(
                        omega, T, 0.05, cfg.sigma_t or 0.1, level
                    )
                )
            else:
                meshes.append(
                    graded_mesh_xt(
                        omega, T, cfg.sigma_x or 0.25, cfg.sigma_t or 0.25, level
                    )
                )
        return meshes
    if cfg.mode == "single_solve":
        return [cartesian_mesh(omega, T, cfg.nx, cfg.nt, degree=cfg.degree)]
    # adaptive: the loop builds its own meshes from the unit element
    return [cartesian_mesh(omega, T, 1, 1, degree=cfg.degree)]


def execute_study(cfg: RunConfig, mesh_sink=None) -> StudyReport:
    if cfg.mode == "adaptive":
        acfg = AdaptiveConfig(
            test_case=cfg.test_case,
            theta=cfg.theta,
            degree=cfg.degree,
            alpha=cfg.alpha,
            max_steps=cfg.max_steps,
            max_dofs=cfg.max_dofs,
            compute_EN=cfg.compute_EN,
            nu=cfg.nu,
            c_H=cfg.c_H,
            t_final=cfg.t_final,
            cache_enabled=cfg.cache_on,
        )
        return adapt_loop(acfg, mesh_sink=mesh_sink)
    exact = benchmark_case(cfg.test_case, alpha=cfg.alpha)
    return uniform_study(
        exact,
        study_meshes(cfg),
        nu=cfg.nu,
        c_H=cfg.c_H,
        compute_EN=cfg.compute_EN,
        cache_enabled=cfg.cache_on,
        mesh_sink=mesh_sink,
    )


# ---------------------------------------------------------------------------
# CSV / summary emission


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.12e}"


def csv_lines(report: StudyReport, record_seconds: bool = True) -> list[str]:
    lines = [",".join(CSV_COLUMNS)]
    for row in report.rows:
        parts = [
            str(row.step),
            str(row.n_dofs),
            _fmt(row.EY),
            _fmt(row.EN),
            _fmt(row.EU),
            _fmt(row.EX),
            *(_fmt(math.sqrt(max(p, 0.0))) for p in row.eta_parts),
            _fmt(row.eta),
            _fmt(row.effectivity),
            str(row.n_elements),
            str(row.n_slabs),
            str(row.n_ref_elements),
            f"{row.seconds:.3f}" if record_seconds else "",
        ]
        lines.append(",".join(parts))
    return lines


def parse_csv(text: str) -> dict[str, list[float | None]]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if tuple(header) != CSV_COLUMNS:
        raise ValueError("not a study CSV (unexpected header)")
    cols: dict[str, list[float | None]] = {name: [] for name in header}
    for line in lines[1:]:
        for name, cell in zip(header, line.split(",")):
            cols[name].append(float(cell) if cell != "" else None)
    return cols


def fit_rates(n_dofs: list[float], errors: list[float | None]) -> dict:
    """Rate fits of one error column: algebraic slope of log(err) vs
    log(N_dofs) over the last 3 rows, and an exponential fit of log(err)
    against N_dofs^(1/3) over all rows with its R^2."""
    if len(n_dofs) < 3:
        raise ValueError("need at least 3 rows to fit rates")
    pairs = [
        (float(n), float(e))
        for n, e in zip(n_dofs, errors)
        if e is not None and e > 0.0
    ]
    if len(pairs) < 3:
        return {"algebraic_slope": None, "exponential": None}
    ns = [p[0] for p in pairs]
    es = [p[1] for p in pairs]

    def lsq(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
        n = len(xs)
        xm = sum(xs) / n
        ym = sum(ys) / n
        sxx = sum((x - xm) ** 2 for x in xs)
        slope = sum((x - xm) * (y - ym) for x, y in zip(xs, ys)) / sxx
        intercept = ym - slope * xm
        ss_res = sum((y - slope * x - intercept) ** 2 for x, y in zip(xs, ys))
        ss_tot = sum((y - ym) ** 2 for y in ys)
        r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
        return slope, intercept, r2

    alg_slope, _, _ = lsq(
        [math.log(n) for n in ns[-3:]], [math.log(e) for e in es[-3:]]
    )
    exp_slope, exp_icpt, exp_r2 = lsq(
        [n ** (1.0 / 3.0) for n in ns], [math.log(e) for e in es]
    )
    return {
        "algebraic_slope": alg_slope,
        "exponential": {
            "slope": exp_slope,
            "intercept": exp_icpt,
            "r2": exp_r2,
        },
    }


def rates_from_columns(cols: dict[str, list[float | None]]) -> dict:
    n_dofs = [int(v) for v in cols["N_dofs"]]
    out: dict[str, dict | None] = {}
    for name in ("EY", "EN", "EU", "EX", "eta"):
        out[name] = fit_rates(n_dofs, cols[name])
    return out


def summary_record(report: StudyReport, cfg: RunConfig) -> dict:
    cols = parse_csv("\n".join(csv_lines(report, record_seconds=False)))
    record: dict = {
        "n_rows": len(report.rows),
        "final_n_dofs": report.rows[-1].n_dofs,
        "final_n_elements": report.rows[-1].n_elements,
        "final_n_slabs": report.rows[-1].n_slabs,
        "final_n_ref_elements": report.rows[-1].n_ref_elements,
        "newton_fallback": report.newton_fallback,
        "config": {
            k: v for k, v in dataclasses.asdict(cfg).items() if v is not None
        },
    }
    if len(report.rows) >= 3:
        record["rates"] = rates_from_columns(cols)
    else:
        record["rates"] = None
    return record


# ---------------------------------------------------------------------------
# commands


@click.group()
def main() -> None:
    """Space-time virtual element studies for the 1D heat equation."""


@main.command("run")
@click.argument("config_path", type=click.Path())
def run_command(config_path: str) -> None:
    """Execute the study described by CONFIG_PATH."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    out_dir = pathlib.Path(
        cfg.output
        if cfg.output is not None
        else pathlib.Path(config_path).with_suffix(".out")
    )
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)

    def sink(step: int, mesh: SpaceTimeMesh) -> None:
        (mesh_dir / f"step_{step}.mesh").write_text(dump_mesh(mesh))

    try:
        report = execute_study(cfg, mesh_sink=sink)
    except SolverError as exc:
        click.echo(f"solver failure at {exc.where}: {exc}", err=True)
        sys.exit(3)
    (out_dir / "study.csv").write_text(
        "\n".join(csv_lines(report, cfg.record_seconds)) + "\n"
    )
    (out_dir / "summary.json").write_text(
        json.dumps(summary_record(report, cfg), indent=2, sort_keys=True) + "\n"
    )
    click.echo(f"wrote {len(report.rows)} rows to {out_dir / 'study.csv'}")


@main.command("rates")
@click.argument("csv_path", type=click.Path())
def rates_command(csv_path: str) -> None:
    """Recompute convergence-rate fits from a study CSV."""
    try:
        cols = parse_csv(pathlib.Path(csv_path).read_text())
        rates = rates_from_columns(cols)
    except (OSError, ValueError) as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    click.echo(json.dumps(rates, indent=2, sort_keys=True))


@main.command("mesh-dump")
@click.argument("config_path", type=click.Path())
def mesh_dump_command(config_path: str) -> None:
    """Write the study's prescribed mesh sequence without solving."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    out_dir = pathlib.Path(
        cfg.output
        if cfg.output is not None
        else pathlib.Path(config_path).with_suffix(".out")
    )
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    meshes = study_meshes(cfg)
    for step, mesh in enumerate(meshes, start=1):
        (mesh_dir / f"step_{step}.mesh").write_text(dump_mesh(mesh))
    click.echo(f"wrote {len(meshes)} meshes to {mesh_dir}")


if __name__ == "__main__":
    main()
