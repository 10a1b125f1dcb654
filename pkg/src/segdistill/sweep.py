"""Hyperparameter sweep harness with seed aggregation.

run_grid() executes every (assignment, seed) cell of a cartesian grid,
records failures without aborting, aggregates seeds into mean +/- std
(population std) and picks the best assignment with a deterministic tie
break. Completed trials persist as JSON lines, so re-running a sweep
resumes instead of recomputing.

stage_protocol() emits the four-stage plan used for tuned baselines:
(1) student-only (mu0, gamma) grid, (2) student+teacher grid at tau=1,
(3) temperature sweep at the stage-2 optimum, (4) per-term loss-weight
sweeps.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import presets
from .exceptions import SweepError, UnknownPresetError, ValidationError


@dataclass(frozen=True)
class GridSpec:
    """Cartesian grid of hyperparameter values plus the seeds per cell."""

    axes: dict
    seeds: tuple
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ValidationError("every grid axis needs at least one value")
        if not self.seeds:
            raise ValidationError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(self.seeds))

    def assignments(self) -> list[dict]:
        names = list(self.axes)
        combos = [{}]
        for name in names:
            combos = [{**c, name: v} for c in combos for v in self.axes[name]]
        return combos


@dataclass
class TrialResult:
    """Seed-aggregated outcome of one hyperparameter assignment."""

    assignment: dict
    seed_values: dict = field(default_factory=dict)  # seed -> mIoU
    errors: dict = field(default_factory=dict)  # seed -> message
    mean: float | None = None
    std: float | None = None
    status: str = "ok"

    def finalize(self) -> "TrialResult":
        values = list(self.seed_values.values())
        if values:
            self.mean = sum(values) / len(values)
            self.std = math.sqrt(
                sum((v - self.mean) ** 2 for v in values) / len(values)
            )
            self.status = "ok"
        else:
            self.mean = None
            self.std = None
            self.status = "failed"
        return self

    @classmethod
    def from_summary(cls, assignment: dict, mean: float, std: float) -> "TrialResult":
        """Build a result straight from reported statistics."""
        return cls(assignment=assignment, mean=mean, std=std, status="ok")

    def to_dict(self) -> dict:
        return {
            "assignment": self.assignment,
            "seed_values": {str(k): v for k, v in self.seed_values.items()},
            "errors": {str(k): v for k, v in self.errors.items()},
            "mean": self.mean,
            "std": self.std,
            "status": self.status,
        }


@dataclass(frozen=True)
class SweepReport:
    trials: list
    best: TrialResult
    within_one_std: list

    def ok_trials(self) -> list:
        return [t for t in self.trials if t.status == "ok"]


def _tiebreak_key(assignment: dict):
    """mu0 ascending, then gamma, then remaining axes by name."""
    priority = [k for k in ("mu0", "gamma") if k in assignment]
    rest = sorted(k for k in assignment if k not in ("mu0", "gamma"))
    return tuple(assignment[k] for k in priority + rest)


def select_best(trials: list) -> TrialResult:
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise SweepError("every trial failed")
    return min(ok, key=lambda t: (-t.mean, _tiebreak_key(t.assignment)))


def within_one_std(trials: list, best: TrialResult) -> list:
    """Trials whose mean is within one std of the best result."""
    cutoff = best.mean - (best.std or 0.0)
    return [t for t in trials if t.status == "ok" and t.mean >= cutoff]


def _assignment_key(assignment: dict, seed: int) -> str:
    return json.dumps({"assignment": assignment, "seed": seed}, sort_keys=True)


class _TrialLog:
    """JSONL persistence of finished (assignment, seed) cells."""

    def __init__(self, state_dir: Path | None):
        self.path = None
        self.done: dict[str, dict] = {}
        if state_dir is not None:
            state_dir = Path(state_dir)
            state_dir.mkdir(parents=True, exist_ok=True)
            self.path = state_dir / "trials.jsonl"
            if self.path.exists():
                for line in self.path.read_text().splitlines():
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self.done[_assignment_key(rec["assignment"], rec["seed"])] = rec

    def lookup(self, assignment: dict, seed: int) -> dict | None:
        return self.done.get(_assignment_key(assignment, seed))

    def record(self, assignment: dict, seed: int, value: float | None,
               error: str | None) -> None:
        if self.path is None:
            return
        rec = {"assignment": assignment, "seed": seed, "value": value, "error": error}
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_grid(
    grid: GridSpec,
    objective: Callable[[dict, int], float],
    state_dir: Path | None = None,
    workers: int = 1,
    trial_order: list[int] | None = None,
) -> SweepReport:
    """Execute every (assignment, seed) cell exactly once.

    The objective must be deterministic given (assignment, seed). A cell
    that raises is recorded as failed; the sweep only errors if no cell
    succeeds. The report is independent of execution order.
    """
    assignments = grid.assignments()
    order = trial_order if trial_order is not None else list(range(len(assignments)))
    if sorted(order) != list(range(len(assignments))):
        raise ValidationError("trial_order must permute the assignment indices")
    log = _TrialLog(state_dir)

    cells = [
        (idx, seed) for idx in order for seed in grid.seeds
    ]
    pending = []
    results: dict[tuple[int, int], tuple[float | None, str | None]] = {}
    for idx, seed in cells:
        prior = log.lookup(assignments[idx], seed)
        if prior is not None:
            results[(idx, seed)] = (prior["value"], prior["error"])
        else:
            pending.append((idx, seed))

    def settle(idx: int, seed: int, value: float | None, error: str | None):
        results[(idx, seed)] = (value, error)
        log.record(assignments[idx], seed, value, error)

    if workers > 1 and pending:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(objective, assignments[idx], seed): (idx, seed)
                for idx, seed in pending
            }
            for fut, (idx, seed) in futures.items():
                try:
                    settle(idx, seed, float(fut.result()), None)
                except Exception as exc:  # crashed worker = failed trial
                    settle(idx, seed, None, f"{type(exc).__name__}: {exc}")
    else:
        for idx, seed in pending:
            try:
                settle(idx, seed, float(objective(assignments[idx], seed)), None)
            except Exception as exc:
                settle(idx, seed, None, f"{type(exc).__name__}: {exc}")

    trials = []
    for idx, assignment in enumerate(assignments):
        trial = TrialResult(assignment=assignment)
        for seed in grid.seeds:
            value, error = results[(idx, seed)]
            if error is None and value is not None:
                trial.seed_values[seed] = value
            else:
                trial.errors[seed] = error or "unknown failure"
        trials.append(trial.finalize())

    best = select_best(trials)
    return SweepReport(trials=trials, best=best, within_one_std=within_one_std(trials, best))


@dataclass(frozen=True)
class SweepStage:
    """One stage of the tuning protocol; later stages consume earlier optima."""

    stage_id: str
    kind: str  # student_grid | kd_grid | temperature | loss_weight
    dataset: str
    student: str
    axes: dict
    seeds: tuple
    depends_on: tuple = ()
    fixed: dict = field(default_factory=dict)
    expected_optimum: dict = field(default_factory=dict)


def stage_protocol(datasets: list[str], students: list[str]) -> list[SweepStage]:
    """Ordered sweep plan for every (dataset, student) combination.

    Stages per combination: the student-only (mu0, gamma) grid; the same
    grid with the teacher attached at tau=1; the temperature sweep at the
    stage-2 optimum; one weight sweep per additional loss term at the
    stage-2/3 optima. expected_optimum carries the published values for
    the grids where they are known.
    """
    plan: list[SweepStage] = []
    lr_axes = {"mu0": list(presets.LR_GRID_MU0), "gamma": list(presets.LR_GRID_GAMMA)}
    for dataset in datasets:
        for student in students:
            if (dataset, student) not in presets.STUDENT_ONLY_OPTIMA:
                raise UnknownPresetError(
                    f"no preset for dataset {dataset!r} with student {student!r}"
                )
            seeds = presets.seeds_for_dataset(dataset)
            tag = f"{dataset}-{student}"
            s_mu0, s_gamma = presets.STUDENT_ONLY_OPTIMA[(dataset, student)]
            k_mu0, k_gamma = presets.KD_OPTIMA[(dataset, student)]
            plan.append(SweepStage(
                stage_id=f"{tag}-stage1-student-grid",
                kind="student_grid", dataset=dataset, student=student,
                axes=dict(lr_axes), seeds=seeds,
                expected_optimum={"mu0": s_mu0, "gamma": s_gamma},
            ))
            plan.append(SweepStage(
                stage_id=f"{tag}-stage2-kd-grid",
                kind="kd_grid", dataset=dataset, student=student,
                axes=dict(lr_axes), seeds=seeds,
                fixed={"temperature": 1.0, "lambda_pi": presets.DEFAULT_LAMBDA_PI},
                expected_optimum={"mu0": k_mu0, "gamma": k_gamma},
            ))
            plan.append(SweepStage(
                stage_id=f"{tag}-stage3-temperature",
                kind="temperature", dataset=dataset, student=student,
                axes={"temperature": list(presets.TAU_GRID)}, seeds=seeds,
                depends_on=(f"{tag}-stage2-kd-grid",),
                fixed={"lambda_pi": presets.DEFAULT_LAMBDA_PI},
            ))
            for term, grid in (
                ("lambda_pa", presets.LAMBDA_PA_GRID),
                ("lambda_ho", presets.LAMBDA_HO_GRID),
                ("lambda_ifv", presets.LAMBDA_IFV_GRID),
            ):
                plan.append(SweepStage(
                    stage_id=f"{tag}-stage4-{term.replace('_', '-')}",
                    kind="loss_weight", dataset=dataset, student=student,
                    axes={term: list(grid)}, seeds=seeds,
                    depends_on=(
                        f"{tag}-stage2-kd-grid",
                        f"{tag}-stage3-temperature",
                    ),
                    fixed={"lambda_pi": presets.DEFAULT_LAMBDA_PI},
                ))
    return plan


def _format_mean_std(trial: TrialResult) -> str:
    if trial.status != "ok":
        return "failed"
    return f"{trial.mean:.2f} ± {trial.std:.2f}"


def report_table(report: SweepReport) -> str:
    """Human-readable table: best **bold**, within one std _underlined_."""
    if not report.trials:
        raise ValidationError("empty sweep report")
    marked = set(id(t) for t in report.within_one_std)
    best = id(report.best)
    lines = ["assignment | mIoU"]
    lines.append("--- | ---")
    for trial in report.trials:
        cell = _format_mean_std(trial)
        if id(trial) == best:
            cell = f"**{cell}**"
        elif id(trial) in marked:
            cell = f"_{cell}_"
        name = ", ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in trial.assignment.items())
        lines.append(f"{name} | {cell}")
    return "\n".join(lines)


def write_report_files(report: SweepReport, out_dir: Path) -> tuple[Path, Path]:
    """Persist a sweep report as delimiter-separated text plus the rendering."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep_results.tsv"
    with csv_path.open("w") as fh:
        axes = sorted({k for t in report.trials for k in t.assignment})
        fh.write("\t".join(axes + ["mean", "std", "status", "best", "within_one_std"]) + "\n")
        marked = set(id(t) for t in report.within_one_std)
        for t in report.trials:
            row = [str(t.assignment.get(a, "")) for a in axes]
            row += [
                "" if t.mean is None else f"{t.mean:.6f}",
                "" if t.std is None else f"{t.std:.6f}",
                t.status,
                "1" if id(t) == id(report.best) else "0",
                "1" if id(t) in marked else "0",
            ]
            fh.write("\t".join(row) + "\n")
    table_path = out_dir / "sweep_results.md"
    table_path.write_text(report_table(report) + "\n")
    return csv_path, table_path
