import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisylang.lang import DomainError
from noisylang.training import (
    AdamState,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    adam_step,
    adam_update_,
    load_checkpoint,
    save_checkpoint,
    stream,
    train_run,
    train_stacked,
)

SMALL = TrainConfig(sizes=(3, 3), d_s=3, d_r=3, hidden=16, lr=1e-3, batch=16, steps=40, eval_every=10, eval_samples=200, epsilon=0.1)
HYPER = (1e-3, 0.9, 0.999, 1e-8)


def params(seed, shape=(3, 4)):
    rng = np.random.default_rng(seed)
    return {"a": rng.normal(size=shape), "b": rng.normal(size=(1, 4))}


def test_adam_zero_gradient_leaves_params():
    p = params(0)
    before = {k: v.copy() for k, v in p.items()}
    state = AdamState.zeros_like(p)
    for _ in range(5):
        adam_update_(p, {k: np.zeros_like(v) for k, v in p.items()}, state, *HYPER)
    for k in p:
        assert np.array_equal(p[k], before[k])


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(1e-6, 1e-1))
def test_adam_first_step_bounded_by_lr(seed, lr):
    p = params(seed)
    g = params(seed + 1)
    new, _ = adam_step(p, g, AdamState.zeros_like(p), lr, 0.9, 0.999, 1e-8)
    for k in p:
        assert np.all(np.abs(new[k] - p[k]) <= lr * (1 + 1e-9))


def test_adam_pure_equals_in_place_and_is_deterministic():
    p = params(1)
    sa, sb = AdamState.zeros_like(p), AdamState.zeros_like(p)
    q = {k: v.copy() for k, v in p.items()}
    for i in range(10):
        g = params(100 + i)
        p, sa = adam_step(p, g, sa, *HYPER)
        adam_update_(q, g, sb, *HYPER)
    assert sa.t == sb.t == 10
    for k in p:
        assert np.array_equal(p[k], q[k])
        assert np.array_equal(sa.m[k], sb.m[k]) and np.array_equal(sa.v[k], sb.v[k])


def test_adam_rejects_mismatched_grads():
    p = params(2)
    with pytest.raises(DomainError):
        adam_update_(p, {"a": p["a"]}, AdamState.zeros_like(p), *HYPER)
    with pytest.raises(DomainError):
        adam_update_(p, {"a": p["a"].T, "b": p["b"]}, AdamState.zeros_like(p), *HYPER)


def test_config_roundtrip_and_validation():
    assert TrainConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(DomainError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(DomainError):
        TrainConfig(d_r=2, sizes=(3, 3))
    with pytest.raises(DomainError):
        TrainConfig(tau=0.0)


def test_digest_ignores_seed_steps_and_eval_settings():
    d = SMALL.digest()
    assert TrainConfig(**{**SMALL.to_dict(), "sizes": (3, 3), "seed": 9, "steps": 5, "eval_every": 3}).digest() == d
    assert TrainConfig(**{**SMALL.to_dict(), "sizes": (3, 3), "lr": 2e-3}).digest() != d


def test_streams_are_independent_by_purpose_and_seed():
    a = stream(SMALL, 0, 0).random(4)
    assert not np.array_equal(a, stream(SMALL, 1, 0).random(4))
    assert not np.array_equal(a, stream(SMALL, 0, 1).random(4))
    assert np.array_equal(a, stream(SMALL, 0, 0).random(4))


def test_zero_steps_gives_initial_evaluation_only():
    cfg = TrainConfig(**{**SMALL.to_dict(), "sizes": (3, 3), "steps": 0})
    run = train_run(cfg)
    assert len(run.trajectory) == 1 and run.trajectory[0].step == 0


def test_trajectory_eval_steps():
    run = train_run(SMALL)
    assert [p.step for p in run.trajectory] == [0, 10, 20, 30, 40]
    for p in run.trajectory:
        assert 0 <= p.metrics.acc <= 1


def test_same_seed_same_trajectory():
    a, b = train_run(SMALL), train_run(SMALL)
    for p, q in zip(a.trajectory, b.trajectory):
        assert p.metrics.to_dict() == q.metrics.to_dict()


def test_stacked_matches_single_runs():
    stacked = train_stacked(SMALL, [3, 4, 5])
    for run in stacked:
        single = train_run(TrainConfig(**{**SMALL.to_dict(), "sizes": (3, 3), "seed": run.seed}))
        for p, q in zip(run.trajectory, single.trajectory):
            for k, v in p.metrics.to_dict().items():
                w = q.metrics.to_dict()[k]
                assert (v is None and w is None) or v == pytest.approx(w, abs=1e-9)


def test_stacked_parameters_match_single():
    tr = Trainer(SMALL, [0, 1])
    one = Trainer(SMALL, [1])
    for _ in range(20):
        tr.train_step()
        one.train_step()
    for k in tr.sp:
        assert np.allclose(tr.sp[k][1], one.sp[k][0], rtol=1e-9, atol=1e-12)


def test_checkpoint_resume_is_bit_exact(tmp_path):
    tr = Trainer(SMALL, [7])
    tr.run(15)
    path = tmp_path / "ck.json"
    save_checkpoint(tr.checkpoint(0), path)
    tr.run(15)

    back = Trainer.from_checkpoints([load_checkpoint(path)])
    assert back.step == 15
    back.run(15)
    for k in tr.sp:
        assert np.array_equal(tr.sp[k], back.sp[k])
    for k in tr.rp:
        assert np.array_equal(tr.rp[k], back.rp[k])
        assert np.array_equal(tr.adam_r.v[k], back.adam_r.v[k])
    assert tr.adam_s.t == back.adam_s.t == 30
    assert tr.rngs[0].random() == back.rngs[0].random()


def test_checkpoint_is_plain_json():
    ck = Trainer(SMALL, [0]).checkpoint(0)
    assert json.loads(json.dumps(ck)) == ck


def test_incompatible_checkpoint_rejected():
    ck = Trainer(SMALL, [0]).checkpoint(0)
    with pytest.raises(DomainError):
        Trainer.from_checkpoints([{**ck, "version": 99}])
    other = Trainer(TrainConfig(**{**SMALL.to_dict(), "sizes": (3, 3), "lr": 0.5}), [1]).checkpoint(0)
    with pytest.raises(DomainError):
        Trainer.from_checkpoints([ck, other])


def test_divergence_aborts_with_seed_and_step():
    tr = Trainer(SMALL, [11])
    tr.run(3)
    tr.sp["W1"][0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        tr.train_step()
    assert info.value.seed == 11 and info.value.step == 3


def test_diverged_seed_dropped_from_stack(monkeypatch):
    real = Trainer.train_step

    def flaky(self):
        if 6 in self.seeds and self.step == 5:
            raise TrainingDiverged(6, self.step, "loss")
        return real(self)

    monkeypatch.setattr(Trainer, "train_step", flaky)
    runs = train_stacked(SMALL, [5, 6, 7])
    assert [r.seed for r in runs] == [5, 6, 7]
    assert runs[1].error and not runs[1].trajectory
    assert runs[0].error is None and len(runs[0].trajectory) == 5


def test_relabelled_run_reports_original_metrics():
    rng = np.random.default_rng(0)
    tr = Trainer(SMALL, [0])
    table = tr.space.vectors()[rng.permutation(9)]
    run = Trainer(SMALL, [0], label_table=table).run(0)[0]
    assert run[0].original is not None
    assert Trainer(SMALL, [0]).run(0)[0][0].original is None
