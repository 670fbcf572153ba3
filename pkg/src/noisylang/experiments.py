"""Experiment harness: noise schedules, relabelling, holdout and fine-tuning,
bootstrap intervals, config-driven sweeps and the one-shot verification run.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .channel import ChannelSpec, check_noise_matrix, noise_matrix
from .lang import DomainError, FeaturePermutation, FeatureSpace, pushforward_uniform_is_uniform
from .metrics import MetricsReport, expected_topo_random, monte_carlo_topo_random
from .oracle import PenaltyH, verify_optimality
from .training import EvalPoint, RunResult, Trainer, TrainConfig, TrainingDiverged, stream, summarize

WORKERS_ENV = "NOISYLANG_WORKERS"
CSV_HEADER = ("seed", "eps", "eps0", "T", "step", "topo", "conf", "cont", "pos", "acc")
METRICS = ("topo", "conf", "cont", "pos", "acc")
FINETUNE_SETS = ("full", "train", "both")
FINETUNE_DENSE = 50  # evaluate after every update up to here, then every 10
_BOOT = 3  # stream purpose for bootstrap draws
_SCRAMBLE = 4


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise DomainError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise eps0 before update T, epsT from update T on."""

    eps0: float
    epsT: float
    T: int = 0

    def __post_init__(self):
        for e in (self.eps0, self.epsT):
            if not 0.0 <= e < 1.0:
                raise DomainError(f"noise level must lie in [0, 1), got {e}")
        if self.T < 0:
            raise DomainError("switch step T must be nonnegative")

    @classmethod
    def constant(cls, eps: float) -> "NoiseSchedule":
        return cls(eps, eps, 0)

    def __call__(self, step: int) -> float:
        return schedule_noise(self, step)


def schedule_noise(sched: NoiseSchedule, step: int) -> float:
    if step < 0:
        raise DomainError("step must be nonnegative")
    return sched.eps0 if step < sched.T else sched.epsT


# ---------------------------------------------------------------- task variants


def scramble_labels(space: FeatureSpace, scramble_seed: int) -> tuple[FeaturePermutation, np.ndarray]:
    """Random relabelling of meanings: meaning with code c is trained on the
    feature vector with code pi(c). Returns (pi, label table indexed by code)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(scramble_seed), _SCRAMBLE])))
    pi = FeaturePermutation.random(space.size, rng)
    return pi, space.vectors()[pi.perm]


def relabel_table(space: FeatureSpace, pi: FeaturePermutation) -> np.ndarray:
    return space.vectors()[pi.perm]


def holdout_diagonal(space: FeatureSpace) -> tuple[np.ndarray, np.ndarray]:
    """(train codes, held-out codes) with the held-out set {(v, v)}."""
    if space.K != 2 or space.sizes[0] != space.sizes[1]:
        raise DomainError("diagonal holdout needs two features with equally many values")
    feats = space.vectors()
    diag = feats[:, 0] == feats[:, 1]
    codes = np.arange(space.size)
    return codes[~diag], codes[diag]


# ---------------------------------------------------------------- statistics


def bootstrap_ci(values, resamples: int = 4000, level: float = 0.95, rng: np.random.Generator | None = None):
    """Percentile bootstrap of the mean: (mean, lo, hi)."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("bootstrap of an empty sample")
    if not 0 < level < 1 or resamples < 1:
        raise DomainError("need 0 < level < 1 and resamples >= 1")
    if np.all(x == x[0]):
        c = float(x[0])
        return c, c, c
    if rng is None:
        rng = np.random.default_rng(0)
    mean = float(np.mean(x))
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    means = x[idx].mean(axis=1)
    a = (1.0 - level) / 2
    lo, hi = np.quantile(means, [a, 1.0 - a])
    # percentile intervals can miss the sample mean on tiny skewed samples
    return mean, float(min(lo, mean)), float(max(hi, mean))


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    schedules: tuple[NoiseSchedule, ...] = ()
    seeds: tuple[int, ...] = (0,)
    scramble_labels: bool = False
    scramble_seed: int = 0
    holdout_diagonal: bool = False
    finetune_steps: int = 0
    finetune_set: str = "both"
    stack: int = 5
    bootstrap_resamples: int = 4000
    output: str | None = None

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise DomainError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise DomainError("seeds must be distinct")
        if self.finetune_steps < 0:
            raise DomainError("finetune_steps must be nonnegative")
        if self.finetune_set not in FINETUNE_SETS:
            raise DomainError(f"finetune_set must be one of {FINETUNE_SETS}")
        if self.finetune_steps and not self.holdout_diagonal:
            raise DomainError("fine-tuning continues a holdout run; set holdout_diagonal")
        if self.stack < 1 or self.bootstrap_resamples < 1:
            raise DomainError("stack and bootstrap_resamples must be positive")
        if self.holdout_diagonal:
            holdout_diagonal(FeatureSpace(self.train.sizes))

    @property
    def cells(self) -> tuple[NoiseSchedule, ...]:
        return self.schedules or (NoiseSchedule.constant(self.train.epsilon),)

    @property
    def finetune_sets(self) -> tuple[str, ...]:
        if not self.finetune_steps:
            return ()
        return ("full", "train") if self.finetune_set == "both" else (self.finetune_set,)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise DomainError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)} | {"epsilons"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        train = data.pop("train", {})
        if not isinstance(train, dict):
            raise DomainError("'train' must be an object")
        train = TrainConfig.from_dict(train)
        scheds = []
        if "epsilons" in data:
            scheds += [NoiseSchedule.constant(float(e)) for e in data.pop("epsilons")]
        for s in data.pop("schedules", []):
            extra = set(s) - {"eps0", "epsT", "T"}
            if extra:
                raise DomainError(f"unknown schedule keys: {', '.join(sorted(extra))}")
            scheds.append(NoiseSchedule(float(s["eps0"]), float(s["epsT"]), int(s.get("T", 0))))
        seeds = data.pop("seeds", 1)
        if isinstance(seeds, int):
            if seeds < 1:
                raise DomainError("seeds must be >= 1")
            seeds = range(seeds)
        elif not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise DomainError("seeds must be a count or a list of integers")
        return cls(train=train, schedules=tuple(scheds), seeds=tuple(seeds), **data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DomainError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["seeds"] = tuple(seeds)
        return ExperimentConfig(**d)


# ---------------------------------------------------------------- running


@dataclass
class CellResult:
    schedule: NoiseSchedule
    runs: list[RunResult]
    finetune: dict[str, list[RunResult]] = field(default_factory=dict)
    checkpoints: dict[int, dict] = field(default_factory=dict)


def _finetune_evals(start: int) -> Callable[[int], bool]:
    return lambda s: s - start <= FINETUNE_DENSE or (s - start) % 10 == 0


def finetune(trainer: Trainer, steps: int, on: str = "full") -> list[RunResult]:
    """Continue copies of every run in ``trainer`` on the full meaning set
    (``on="full"``) or on the original training set (``on="train"``),
    evaluating on all meanings. The first trajectory point is zero-shot."""
    if on not in ("full", "train"):
        raise DomainError("fine-tune set must be 'full' or 'train'")
    ckpts = [trainer.checkpoint(i) for i in range(trainer.R)]
    codes = np.arange(trainer.space.size) if on == "full" else trainer.train_codes
    ft = Trainer.from_checkpoints(ckpts, trainer.epsilon_at, codes)
    trajs = ft.run(steps, _finetune_evals(ft.step))
    return [RunResult(s, t) for s, t in zip(ft.seeds, trajs)]


def _run_block(job) -> tuple[int, CellResult]:
    """Train one stack of seeds for one noise schedule (worker entry point)."""
    cell_idx, cfg, seeds, keep = job
    sched = cfg.cells[cell_idx]
    tc = cfg.train
    space = FeatureSpace(tc.sizes)
    labels = scramble_labels(space, cfg.scramble_seed)[1] if cfg.scramble_labels else None
    train_codes = holdout_diagonal(space)[0] if cfg.holdout_diagonal else None
    seeds = list(seeds)
    failed = []
    while seeds:
        tr = Trainer(tc, seeds, labels, train_codes, sched)
        try:
            trajs = tr.run(tc.steps)
        except TrainingDiverged as exc:
            failed.append(RunResult(exc.seed, [], str(exc)))
            seeds.remove(exc.seed)
            continue
        runs = [RunResult(s, t) for s, t in zip(seeds, trajs)]
        ckpts = {s: tr.checkpoint(i) for i, s in enumerate(seeds)} if keep else {}
        ft = {}
        for which in cfg.finetune_sets:
            try:
                ft[which] = finetune(tr, cfg.finetune_steps, which)
            except TrainingDiverged as exc:
                ft[which] = [RunResult(exc.seed, [], str(exc))]
        return cell_idx, CellResult(sched, runs + failed, ft, ckpts)
    return cell_idx, CellResult(sched, failed)


def _jobs(cfg: ExperimentConfig, keep: bool):
    # fixed stacking: block membership depends on the config, never on the worker count
    for ci in range(len(cfg.cells)):
        for i in range(0, len(cfg.seeds), cfg.stack):
            yield ci, cfg, tuple(cfg.seeds[i : i + cfg.stack]), keep


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, keep_checkpoints: bool = False) -> list[CellResult]:
    """Train every (schedule, seed); with ``keep_checkpoints`` the final
    pre-fine-tuning state of each run is returned too."""
    workers = worker_count() if workers is None else workers
    jobs = list(_jobs(cfg, keep_checkpoints))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(j) for j in jobs]
    cells = [CellResult(s, []) for s in cfg.cells]
    for ci, part in parts:
        cells[ci].runs += part.runs
        cells[ci].checkpoints.update(part.checkpoints)
        for k, v in part.finetune.items():
            cells[ci].finetune.setdefault(k, []).extend(v)
    order = {s: i for i, s in enumerate(cfg.seeds)}
    for c in cells:
        c.runs.sort(key=lambda r: order[r.seed])
        for v in c.finetune.values():
            v.sort(key=lambda r: order[r.seed])
    return cells


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trajectory_rows(cells: Sequence[CellResult], which: str = "metrics", finetune_set: str | None = None):
    """CSV rows sorted by (eps, eps0, T, seed, step); ``which`` is ``metrics`` or ``original``."""
    rows = []
    for c in cells:
        runs = c.runs if finetune_set is None else c.finetune.get(finetune_set, [])
        for r in runs:
            for p in r.trajectory:
                rep = getattr(p, which)
                if rep is None:
                    continue
                rows.append((c.schedule.epsT, c.schedule.eps0, c.schedule.T, r.seed, p.step, rep))
    rows.sort(key=lambda x: x[:5])
    return [
        [_fmt(seed), _fmt(eps), _fmt(eps0), _fmt(T), _fmt(step)] + [_fmt(getattr(rep, m)) for m in METRICS]
        for eps, eps0, T, seed, step, rep in rows
    ]


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def parse_csv_rows(text: str) -> list[dict]:
    """Read a trajectory CSV back; empty cells become None."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise DomainError("not a trajectory CSV")
    out = []
    for row in reader:
        rec = {}
        for k, v in row.items():
            if v == "":
                rec[k] = None
            elif k in ("seed", "T", "step", "conf"):
                rec[k] = int(v)
            else:
                rec[k] = float(v)
        out.append(rec)
    return out


@dataclass
class CellSummary:
    schedule: NoiseSchedule
    n: int
    stats: dict  # metric -> (mean, lo, hi) or None


def summarize_rows(rows: Sequence[dict], window: int, resamples: int, digest: int) -> list[CellSummary]:
    """Per-run mean over the last ``window`` evaluations, then a bootstrap across runs.

    Works on parsed CSV rows so the summary can be recomputed from the file.
    """
    by_run: dict = {}
    for r in rows:
        by_run.setdefault((r["eps"], r["eps0"], r["T"]), {}).setdefault(r["seed"], []).append(r)
    out = []
    for key in sorted(by_run):
        runs = by_run[key]
        stats = {}
        for mi, m in enumerate(METRICS):
            per_run = []
            for seed in sorted(runs):
                pts = sorted(runs[seed], key=lambda r: r["step"])[-window:]
                vals = [p[m] for p in pts if p[m] is not None]
                if vals:
                    per_run.append(float(np.mean(vals)))
            if per_run:
                rng = np.random.Generator(
                    np.random.Philox(np.random.SeedSequence([digest, _BOOT, mi, *[int(round(x * 1e6)) for x in (key[0], key[1])], key[2]]))
                )
                stats[m] = bootstrap_ci(per_run, resamples, 0.95, rng)
            else:
                stats[m] = None
        out.append(CellSummary(NoiseSchedule(key[1], key[0], key[2]), len(runs), stats))
    return out


def render_summary(summaries: Sequence[CellSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("eps", "eps0", "T", "n", "metric", "mean", "lo", "hi"))
    for s in summaries:
        for m in METRICS:
            st = s.stats[m] or (None, None, None)
            w.writerow([_fmt(s.schedule.epsT), _fmt(s.schedule.eps0), _fmt(s.schedule.T), s.n, m, *map(_fmt, st)])
    return buf.getvalue()


def render_plot_data(summaries: Sequence[CellSummary], metric: str) -> str:
    """Whitespace-separated columns for gnuplot: eps eps0 T mean lo hi."""
    lines = [f"# {metric}: eps eps0 T mean lo hi"]
    for s in summaries:
        st = s.stats[metric]
        vals = ["nan"] * 3 if st is None else [_fmt(v) for v in st]
        lines.append(" ".join([_fmt(s.schedule.epsT), _fmt(s.schedule.eps0), _fmt(s.schedule.T), *vals]))
    return "\n".join(lines) + "\n"


def failures(cells: Sequence[CellResult]) -> list[tuple[NoiseSchedule, int, str]]:
    out = []
    for c in cells:
        runs = list(c.runs) + [r for v in c.finetune.values() for r in v]
        out += [(c.schedule, r.seed, r.error) for r in runs if r.error]
    return out


def sweep_outputs(cfg: ExperimentConfig, cells: Sequence[CellResult]) -> dict[str, str]:
    """File name -> content for a sweep directory."""
    digest = cfg.train.digest()
    files = {}
    rows = trajectory_rows(cells)
    files["trajectories.csv"] = render_csv(rows)
    summ = summarize_rows(parse_csv_rows(files["trajectories.csv"]), cfg.train.eval_window, cfg.bootstrap_resamples, digest)
    files["summary.csv"] = render_summary(summ)
    for m in METRICS:
        files[f"{m}.dat"] = render_plot_data(summ, m)
    if cfg.scramble_labels:
        files["original.csv"] = render_csv(trajectory_rows(cells, "original"))
    for which in cfg.finetune_sets:
        files[f"finetune-{which}.csv"] = render_csv(trajectory_rows(cells, finetune_set=which))
    fails = failures(cells)
    if fails:
        lines = ["eps,eps0,T,seed,error"] + [
            f"{_fmt(s.epsT)},{_fmt(s.eps0)},{s.T},{seed},{json.dumps(err)}" for s, seed, err in fails
        ]
        files["failures.csv"] = "\n".join(lines) + "\n"
    return files


def write_files(directory: str | Path, files: dict[str, str]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        with open(d / name, "w", newline="") as fh:
            fh.write(text)


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None):
    """Run every (schedule, seed) and write the sweep directory. Returns (cells, files)."""
    cells = run_experiment(cfg, workers)
    files = sweep_outputs(cfg, cells)
    target = out_dir or cfg.output
    if target is not None:
        write_files(target, files)
    return cells, files


# ---------------------------------------------------------------- verification


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict
    seconds: float

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "seconds": round(self.seconds, 3), **self.detail}


def _timed(name: str, fn) -> Check:
    t = time.perf_counter()
    passed, detail = fn()
    return Check(name, bool(passed), detail, time.perf_counter() - t)


def check_pushforward(sizes: Sequence[int] = (4, 16), trials: int = 100, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.Generator(np.random.Philox(seed))
    bad = 0
    for n in sizes:
        space = FeatureSpace((n,))
        for _ in range(trials):
            bad += not pushforward_uniform_is_uniform(space, FeaturePermutation.random(n, rng))
    return bad == 0, {"sizes": list(sizes), "trials": trials, "failures": bad}


def check_noise_normalization(
    grid=(0.0, 0.05, 0.1, 0.2, 0.3), alphabet=(2, 3, 5, 8), matrix: Callable[[ChannelSpec], np.ndarray] = noise_matrix
) -> tuple[bool, dict]:
    bad = []
    for d in alphabet:
        for e in grid:
            try:
                check_noise_matrix(matrix(ChannelSpec(e, d, "logit-matrix")))
            except DomainError as exc:
                bad.append({"d": d, "eps": e, "error": str(exc)})
    return not bad, {"failures": bad}


def check_optimality(K: int, m: int, eps: float, workers: int = 1) -> tuple[bool, dict]:
    rep = verify_optimality(FeatureSpace.uniform(K, m), m, eps, PenaltyH(), workers)
    return rep.passed, rep.to_dict()


def check_random_topo(ns=(2, 3, 4, 5), trials: int = 100_000, seed: int = 0, bound: float = 0.2) -> tuple[bool, dict]:
    rows, ok = [], True
    for n in ns:
        exp = expected_topo_random(n, "avg")
        if n == 2:
            mc, se = monte_carlo_topo_random(n, 0, exhaustive=True)
            good = mc == exp
        else:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, n])))
            mc, se = monte_carlo_topo_random(n, trials, rng)
            good = abs(mc - exp) <= 3 * se
        rows.append({"n": n, "expected": exp, "estimate": mc, "stderr": se, "passed": bool(good)})
        ok &= good
    top = expected_topo_random(max(ns), "avg")
    ok &= top <= bound
    return ok, {"rows": rows, "bound": bound, "value_at_max_n": top}


def verify_all(
    workers: int = 1,
    trials: int = 100_000,
    matrix: Callable[[ChannelSpec], np.ndarray] = noise_matrix,
) -> list[Check]:
    """Exact-arithmetic checks: uniform pushforward, noise-matrix normalisation,
    the optimality oracle on two instances and the random-language topo baseline.
    ``matrix`` is injectable so a faulty channel can be shown to fail."""
    return [
        _timed("pushforward-uniform", check_pushforward),
        _timed("noise-matrix-normalized", lambda: check_noise_normalization(matrix=matrix)),
        _timed("optimality K=2 m=2 eps=0.1", lambda: check_optimality(2, 2, 0.1)),
        _timed("optimality K=2 m=2 eps=0.3", lambda: check_optimality(2, 2, 0.3)),
        _timed("optimality K=2 m=3 eps=0.2", lambda: check_optimality(2, 3, 0.2, workers)),
        _timed("random-topo baseline", lambda: check_random_topo(trials=trials)),
    ]
