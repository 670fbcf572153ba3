"""Adam, the training loop, evaluation and checkpoints.

A ``Trainer`` advances R independent runs (one per seed) as one stacked
computation. Every run owns its random streams, so its trajectory does not
depend on which other seeds share its stack.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import (
    RECEIVER_KEYS,
    SENDER_KEYS,
    Arch,
    Draws,
    backward,
    forward,
    greedy_messages,
    init_params,
    noisy_predictions,
    stack_params,
    unstack_params,
)
from .channel import KINDS, ChannelSpec, gumbel_noise, permutation_noise_matrices
from .lang import DomainError, FeatureSpace
from .metrics import MessageLog, MetricsReport, accuracy, compute_metrics

CHECKPOINT_VERSION = 1

_EVAL_FIELDS = ("eval_every", "eval_window", "eval_samples", "eval_sampled", "eval_noise")

# purposes for per-run random streams
_INIT, _TRAIN, _EVAL = 0, 1, 2


class TrainingDiverged(ArithmeticError):
    def __init__(self, seed: int, step: int, what: str):
        super().__init__(f"seed {seed}: non-finite {what} at step {step}")
        self.seed, self.step = seed, step


@dataclass(frozen=True)
class TrainConfig:
    sizes: tuple[int, ...] = (4, 4)
    d_s: int = 5
    d_r: int = 8
    length: int | None = None
    hidden: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_kl: float = 0.01
    lambda_l2: float = 0.0003
    tau: float = 1.0
    batch: int = 64
    steps: int = 20000
    eval_every: int = 2000
    eval_window: int = 20
    eval_samples: int = 1000
    eval_sampled: bool = False
    eval_noise: bool = True
    noise_kind: str = "logit-matrix"
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        if not self.sizes or min(self.sizes) < 1:
            raise DomainError("sizes must be a nonempty list of positive integers")
        if max(self.sizes) > self.d_r:
            raise DomainError(f"receiver heads have {self.d_r} outputs but a feature has {max(self.sizes)} values")
        for name in ("d_s", "hidden", "batch", "eval_every", "eval_window", "eval_samples"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.d_s < 2:
            raise DomainError("d_s must be >= 2")
        if self.length is not None and self.length < 1:
            raise DomainError("length must be positive")
        for name in ("lr", "tau", "adam_eps"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("Adam betas must lie in [0, 1)")
        if self.lambda_kl < 0 or self.lambda_l2 < 0:
            raise DomainError("loss weights must be nonnegative")
        if self.steps < 0:
            raise DomainError("steps must be nonnegative")
        if self.noise_kind not in ("logit-matrix", "permutation"):
            raise DomainError(f"training noise must be logit-matrix or permutation, not {self.noise_kind!r}")
        ChannelSpec(self.epsilon, self.d_s, self.noise_kind)

    @property
    def arch(self) -> Arch:
        return Arch(self.sizes, self.d_s, self.d_r, self.length, self.hidden)

    def channel(self, epsilon: float | None = None) -> ChannelSpec:
        return ChannelSpec(self.epsilon if epsilon is None else epsilon, self.d_s, self.noise_kind)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sizes"] = list(self.sizes)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DomainError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**data)

    def digest(self) -> int:
        """32-bit digest of the settings that shape training, excluding the
        seed, the run length and evaluation settings."""
        d = self.to_dict()
        for k in ("seed", "steps", *_EVAL_FIELDS):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big")


def stream(config: TrainConfig, seed: int, purpose: int, *extra: int) -> np.random.Generator:
    """Independent Philox stream for (config digest, seed, purpose, extra)."""
    ss = np.random.SeedSequence([config.digest(), int(seed), purpose, *extra])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def adam_update_(params: dict, grads: dict, state: AdamState, lr, beta1, beta2, eps) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if params.keys() != grads.keys():
        raise DomainError("parameter and gradient keys differ")
    state.t += 1
    c1, c2 = 1.0 - beta1**state.t, 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DomainError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m, v = state.m[k], state.v[k]
        tmp = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v *= beta2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp /= c1
        tmp *= lr
        p -= tmp


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1, beta2, eps) -> tuple[dict, AdamState]:
    """Pure form of ``adam_update_``: returns new params and state."""
    new_p = {k: a.copy() for k, a in params.items()}
    new_s = AdamState({k: a.copy() for k, a in state.m.items()}, {k: a.copy() for k, a in state.v.items()}, state.t)
    adam_update_(new_p, grads, new_s, lr, beta1, beta2, eps)
    return new_p, new_s


# ---------------------------------------------------------------- trajectories


@dataclass
class EvalPoint:
    step: int
    epsilon: float
    metrics: MetricsReport
    # metrics against the untouched features when training labels are relabelled
    original: MetricsReport | None = None
    messages: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RunResult:
    seed: int
    trajectory: list[EvalPoint]
    error: str | None = None

    def summary(self, window: int) -> MetricsReport:
        return summarize([p.metrics for p in self.trajectory[-window:]])

    def summary_original(self, window: int) -> MetricsReport | None:
        pts = self.trajectory[-window:]
        if not pts or pts[0].original is None:
            return None
        return summarize([p.original for p in pts])


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-metric mean over reports, ignoring undefined values."""
    return MetricsReport(*(_mean_defined([getattr(r, k) for r in reports]) for k in ("topo", "conf", "cont", "pos", "acc")))


# ---------------------------------------------------------------- trainer


class Trainer:
    """R runs sharing a config but not a seed, trained in lockstep."""

    def __init__(
        self,
        config: TrainConfig,
        seeds: Sequence[int],
        label_table: np.ndarray | None = None,
        train_codes: np.ndarray | None = None,
        epsilon_at: Callable[[int], float] | None = None,
    ):
        if len(seeds) == 0:
            raise DomainError("need at least one seed")
        self.config = config
        self.arch = config.arch
        self.space: FeatureSpace = self.arch.space
        self.seeds = [int(s) for s in seeds]
        self.table = self.arch.input_table()
        feats = self.space.vectors()
        self.label_table = feats if label_table is None else np.asarray(label_table, dtype=np.int64)
        if self.label_table.shape != feats.shape:
            raise DomainError("label table must give one feature vector per meaning")
        self.relabelled = label_table is not None and not np.array_equal(self.label_table, feats)
        self.train_codes = np.arange(self.space.size) if train_codes is None else np.asarray(train_codes, dtype=np.int64)
        if self.train_codes.size == 0:
            raise DomainError("empty training set")
        self.epsilon_at = epsilon_at or (lambda step: config.epsilon)
        inits = [init_params(self.arch, stream(config, s, _INIT)) for s in self.seeds]
        sp = stack_params([p[0] for p in inits])
        rp = stack_params([p[1] for p in inits])
        self._set_state(sp, rp, AdamState.zeros_like(sp), AdamState.zeros_like(rp))
        self.rngs = [stream(config, s, _TRAIN) for s in self.seeds]
        self.step = 0
        self._specs: dict[float, ChannelSpec] = {}

    def _set_state(self, sp: dict, rp: dict, adam_s: AdamState, adam_r: AdamState) -> None:
        # one flat buffer each for parameters and moments; the dicts hold views,
        # so Adam runs as a single vectorised update
        if adam_s.t != adam_r.t:
            raise DomainError("sender and receiver optimiser steps differ")
        layout = [("s", k, sp[k].shape) for k in SENDER_KEYS] + [("r", k, rp[k].shape) for k in RECEIVER_KEYS]
        src = {"s": (sp, adam_s), "r": (rp, adam_r)}
        theta = np.concatenate([src[a][0][k].ravel() for a, k, _ in layout])
        m = np.concatenate([src[a][1].m[k].ravel() for a, k, _ in layout])
        v = np.concatenate([src[a][1].v[k].ravel() for a, k, _ in layout])
        views = {"s": ({}, {}, {}), "r": ({}, {}, {})}
        off = 0
        for a, k, shape in layout:
            n = int(np.prod(shape))
            for buf, d in zip((theta, m, v), views[a]):
                d[k] = buf[off : off + n].reshape(shape)
            off += n
        self._layout = layout
        self._adam = AdamState({"theta": m}, {"theta": v}, adam_s.t)
        self._theta = theta
        self.sp, self.rp = views["s"][0], views["r"][0]
        self._moments = {a: views[a][1:] for a in "sr"}

    @property
    def adam_s(self) -> AdamState:
        return AdamState(*self._moments["s"], self._adam.t)

    @property
    def adam_r(self) -> AdamState:
        return AdamState(*self._moments["r"], self._adam.t)

    @property
    def R(self) -> int:
        return len(self.seeds)

    def spec_at(self, step: int) -> ChannelSpec:
        eps = float(self.epsilon_at(step))
        if eps not in self._specs:
            self._specs[eps] = self.config.channel(eps)
        return self._specs[eps]

    def _draw(self, spec: ChannelSpec):
        cfg, arch = self.config, self.arch
        codes, gum, perms = [], [], []
        for rng in self.rngs:
            codes.append(self.train_codes[rng.integers(0, self.train_codes.size, cfg.batch)])
            gum.append(gumbel_noise(rng, (cfg.batch, arch.L, arch.d_s)))
            if spec.kind == "permutation":
                perms.append(permutation_noise_matrices((cfg.batch, arch.L), spec, rng))
        codes = np.stack(codes)
        return codes, np.stack(gum), (np.stack(perms) if perms else None)

    def train_step(self):
        """One update for every run. Returns the LossTerms (arrays of shape (R,))."""
        cfg = self.config
        spec = self.spec_at(self.step)
        codes, gum, perm = self._draw(spec)
        draws = Draws(gum, perm, straight_through=self.step % 2 == 0)
        terms, cache = forward(
            self.sp, self.rp, self.table[codes], self.label_table[codes], self.arch, spec, draws,
            tau=cfg.tau, lambda_kl=cfg.lambda_kl, lambda_l2=cfg.lambda_l2,
        )
        bad = ~np.isfinite(terms.total)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise TrainingDiverged(self.seeds[i], self.step, "loss")
        gs, gr = backward(cache)
        hyper = (cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        grads = {"s": gs, "r": gr}
        flat = np.concatenate([grads[a][k].ravel() for a, k, _ in self._layout])
        adam_update_({"theta": self._theta}, {"theta": flat}, self._adam, *hyper)
        self.step += 1
        return terms

    def evaluate(self, keep_messages: bool = False) -> list[EvalPoint]:
        """Metrics of every run at the current step.

        Compositionality metrics use the noiseless greedy language on the
        whole meaning space; accuracy uses fresh uniform meanings sent through
        the channel.
        """
        cfg = self.config
        eps = float(self.epsilon_at(self.step))
        spec = self.config.channel(eps if cfg.eval_noise else 0.0)
        msgs = greedy_messages(self.sp, self.arch)
        feats = self.space.vectors()
        points = []
        for i, seed in enumerate(self.seeds):
            rng = stream(cfg, seed, _EVAL, self.step)
            codes = rng.integers(0, self.space.size, cfg.eval_samples)
            one = unstack_params(self.sp, i), unstack_params(self.rp, i)
            pred = noisy_predictions(one[0], one[1], self.table[codes], self.arch, spec, rng, sampled=cfg.eval_sampled)
            acc = accuracy(pred, self.label_table[codes])
            rep = compute_metrics(MessageLog(self.space, self.label_table, msgs[i]))
            rep.acc = acc
            orig = None
            if self.relabelled:
                orig = compute_metrics(MessageLog(self.space, feats, msgs[i]))
            points.append(EvalPoint(self.step, eps, rep, orig, msgs[i].copy() if keep_messages else None))
        return points

    def run(
        self,
        steps: int,
        eval_steps: Callable[[int], bool] | None = None,
        keep_messages: bool = False,
    ) -> list[list[EvalPoint]]:
        """Train ``steps`` more updates; returns per-run trajectories.

        The current state is evaluated first, then after every update for
        which ``eval_steps(step)`` holds, and after the last update.
        """
        cfg = self.config
        if eval_steps is None:
            eval_steps = lambda s: s % cfg.eval_every == 0
        trajs = [[p] for p in self.evaluate(keep_messages)]
        end = self.step + steps
        while self.step < end:
            self.train_step()
            if eval_steps(self.step) or self.step == end:
                for t, p in zip(trajs, self.evaluate(keep_messages)):
                    t.append(p)
        return trajs

    # ------------------------------------------------------------ checkpoints

    def checkpoint(self, i: int = 0) -> dict:
        """JSON-ready state of run ``i``."""
        def arrays(d):
            return {k: unstack_params(d, i)[k].tolist() for k in d}

        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "seed": self.seeds[i],
            "step": self.step,
            "sender": arrays(self.sp),
            "receiver": arrays(self.rp),
            "adam_sender": {"m": arrays(self.adam_s.m), "v": arrays(self.adam_s.v), "t": self.adam_s.t},
            "adam_receiver": {"m": arrays(self.adam_r.m), "v": arrays(self.adam_r.v), "t": self.adam_r.t},
            "rng": _rng_state_to_json(self.rngs[i].bit_generator.state),
            "label_table": self.label_table.tolist(),
            "train_codes": self.train_codes.tolist(),
        }

    @classmethod
    def from_checkpoints(
        cls,
        checkpoints: Sequence[dict],
        epsilon_at: Callable[[int], float] | None = None,
        train_codes: np.ndarray | None = None,
    ) -> "Trainer":
        """Rebuild a trainer from one or more checkpoints taken at the same step.

        ``train_codes`` overrides the stored training set (for fine-tuning).
        """
        first = checkpoints[0]
        if any(c.get("version") != CHECKPOINT_VERSION for c in checkpoints):
            raise DomainError("unsupported checkpoint version")
        config = TrainConfig.from_dict({**first["config"], "sizes": tuple(first["config"]["sizes"])})
        for c in checkpoints:
            if c["config"] != first["config"] or c["step"] != first["step"] or c["label_table"] != first["label_table"]:
                raise DomainError("checkpoints disagree on config, step or labels")
        codes = np.asarray(first["train_codes"]) if train_codes is None else train_codes
        tr = cls(config, [c["seed"] for c in checkpoints], np.asarray(first["label_table"]), codes, epsilon_at)
        tr.relabelled = not np.array_equal(tr.label_table, tr.space.vectors())

        def load(key, names):
            out = stack_params([{k: np.asarray(c[key][k], dtype=float) for k in names} for c in checkpoints])
            return out

        def load_adam(key, names):
            m = stack_params([{k: np.asarray(c[key]["m"][k], dtype=float) for k in names} for c in checkpoints])
            v = stack_params([{k: np.asarray(c[key]["v"][k], dtype=float) for k in names} for c in checkpoints])
            return AdamState(m, v, int(first[key]["t"]))

        tr._set_state(
            load("sender", SENDER_KEYS),
            load("receiver", RECEIVER_KEYS),
            load_adam("adam_sender", SENDER_KEYS),
            load_adam("adam_receiver", RECEIVER_KEYS),
        )
        if tr.sp["W1"].shape[1:] != (sum(config.sizes), config.hidden):
            raise DomainError("checkpoint parameters do not match the architecture")
        for rng, c in zip(tr.rngs, checkpoints):
            rng.bit_generator.state = _rng_state_from_json(c["rng"])
        tr.step = int(first["step"])
        return tr


def _rng_state_to_json(state):
    if isinstance(state, dict):
        return {k: _rng_state_to_json(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__array__": state.tolist(), "dtype": str(state.dtype)}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _rng_state_from_json(data):
    if isinstance(data, dict):
        if "__array__" in data:
            return np.asarray(data["__array__"], dtype=data["dtype"])
        return {k: _rng_state_from_json(v) for k, v in data.items()}
    return data


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ckpt))


def load_checkpoint(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def train_run(
    config: TrainConfig,
    label_table: np.ndarray | None = None,
    train_codes: np.ndarray | None = None,
    epsilon_at: Callable[[int], float] | None = None,
) -> RunResult:
    """Train one run from scratch; the trajectory starts with the step-0 evaluation."""
    tr = Trainer(config, [config.seed], label_table, train_codes, epsilon_at)
    return RunResult(config.seed, tr.run(config.steps)[0])


def train_stacked(
    config: TrainConfig,
    seeds: Sequence[int],
    label_tables: Sequence[np.ndarray] | None = None,
    train_codes: np.ndarray | None = None,
    epsilon_at: Callable[[int], float] | None = None,
) -> list[RunResult]:
    """Train several seeds together. A diverging run is reported and dropped."""
    if label_tables is not None and len({np.asarray(t).tobytes() for t in label_tables}) > 1:
        # per-seed relabelling cannot share a stack
        return [
            train_stacked(config, [s], [t], train_codes, epsilon_at)[0] for s, t in zip(seeds, label_tables)
        ]
    table = None if label_tables is None else label_tables[0]
    tr = Trainer(config, seeds, table, train_codes, epsilon_at)
    try:
        trajs = tr.run(config.steps)
    except TrainingDiverged as exc:
        if len(seeds) == 1:
            return [RunResult(seeds[0], [], str(exc))]
        rest = [s for s in seeds if s != exc.seed]
        out = train_stacked(config, rest, label_tables and [table] * len(rest), train_codes, epsilon_at)
        out.append(RunResult(exc.seed, [], str(exc)))
        return sorted(out, key=lambda r: seeds.index(r.seed))
    return [RunResult(s, t) for s, t in zip(seeds, trajs)]
