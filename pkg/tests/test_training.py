import json

import numpy as np
import pytest

from facediff import autograd as ag
from facediff.conditioning import CoarseBatch, DropoutPolicy
from facediff.denoiser import Generator, ModelConfig, insert_adapter
from facediff.diffusion import NoiseSchedule
from facediff.nn import Parameter
from facediff.training import (AdamW, TrainConfig, TrainingData, TrainingError, adamw_update, load_training_state,
                               make_optimizer, stage1_step, stage2_step, train, validation_loss)
from facediff.types import FineCondition
from facediff.verify import randomize, tiny_config, tiny_vocab


def _data(cfg, n=6, T=8, seed=0, fine=True):
    rng = np.random.default_rng(seed)
    fines = [FineCondition((([f"AU{int(rng.integers(cfg.n_vocab)):02d}"], 1, 5),
                            ([f"AU{int(rng.integers(cfg.n_vocab)):02d}"], 4, 8))) for _ in range(n)]
    return TrainingData(rng.random((n, T, cfg.d_motion)), rng.normal(size=(n, T, cfg.d_audio)),
                        CoarseBatch(rng.integers(0, cfg.n_styles, n), rng.integers(0, cfg.n_emotions, n),
                                    rng.random(n)), fines if fine else None)


# ------------------------------------------------------------------ AdamW
def test_adamw_first_step_closed_form():
    rng = np.random.default_rng(0)
    p, g = rng.normal(size=5), rng.normal(size=5)
    new, m, v = adamw_update(p, g, np.zeros(5), np.zeros(5), 1, lr=0.1, eps=0.0)
    # bias-corrected first moments are g and g**2, so the step is lr * sign(g)
    np.testing.assert_allclose(new, p - 0.1 * np.sign(g), rtol=1e-12)
    np.testing.assert_allclose(m, 0.1 * g)
    np.testing.assert_allclose(v, 0.001 * g * g)


def test_adamw_second_step_oracle():
    p, g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.1]), np.array([-0.3, 0.4])
    p1, m, v = adamw_update(p, g1, 0.0, 0.0, 1, 0.01, weight_decay=0.1)
    p2, _, _ = adamw_update(p1, g2, m, v, 2, 0.01, weight_decay=0.1)
    m2 = 0.9 * 0.1 * g1 + 0.1 * g2
    v2 = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    expected = p1 * (1 - 0.001) - 0.01 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p2, expected, rtol=1e-12)


def test_adamw_zero_gradient_and_decay():
    p = np.array([1.0, -3.0])
    new, _, _ = adamw_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_array_equal(new, p)
    new, _, _ = adamw_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1, weight_decay=0.5)
    np.testing.assert_allclose(new, p * (1 - 0.05))


def test_adamw_skips_frozen_and_round_trips_state():
    a, b = Parameter(np.ones(3)), Parameter(np.ones(2))
    b.trainable = False
    opt = AdamW([a, b], lr=0.1)
    a.grad, b.grad = np.ones(3), np.ones(2)
    opt.step()
    assert np.all(a.data < 1) and np.all(b.data == 1)
    opt2 = AdamW([a, b], lr=0.1)
    opt2.load_state_dict(opt.state_dict())
    for k, v in opt.state_dict().items():
        np.testing.assert_array_equal(opt2.state_dict()[k], v)


# --------------------------------------------------------------- stage 1
def test_zero_learning_rate_keeps_parameters():
    cfg = tiny_config()
    gen = Generator(cfg)
    before = {k: v.copy() for k, v in gen.state_dict().items()}
    train(gen, _data(cfg), TrainConfig(lr=0.0, weight_decay=0.0, iterations=3, batch_size=2),
          NoiseSchedule.cosine(cfg.steps))
    for k, v in gen.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_deterministic():
    cfg = tiny_config()
    runs = []
    for _ in range(2):
        gen = Generator(cfg)
        recs = train(gen, _data(cfg), TrainConfig(lr=1e-2, iterations=5, batch_size=3, seed=4),
                     NoiseSchedule.cosine(cfg.steps))
        runs.append([r.loss for r in recs])
    assert runs[0] == runs[1]


def test_stage1_rejects_adapter_and_nonfinite_loss():
    cfg = tiny_config()
    data, sch = _data(cfg), NoiseSchedule.cosine(cfg.steps)
    gen = insert_adapter(Generator(cfg))
    opt = make_optimizer(gen, TrainConfig())
    with pytest.raises(TrainingError):
        stage1_step(data.batch([0]), gen, sch, DropoutPolicy(), opt, np.random.default_rng(0))
    gen = Generator(cfg)
    gen.out_proj.bias.data[:] = np.inf
    with pytest.raises(TrainingError):
        stage1_step(data.batch([0]), gen, sch, DropoutPolicy(), make_optimizer(gen, TrainConfig()),
                    np.random.default_rng(0))


def test_resume_matches_unbroken_run(tmp_path):
    cfg = tiny_config()
    data, sch = _data(cfg), NoiseSchedule.cosine(cfg.steps)
    tc = TrainConfig(lr=1e-2, iterations=6, batch_size=2, seed=1, checkpoint_every=3)
    full = train(Generator(cfg), data, tc, sch)
    train(Generator(cfg), data, TrainConfig(**{**tc.__dict__, "iterations": 3}), sch, ckpt_dir=tmp_path)
    gen, opt, start = load_training_state(tmp_path, tc)
    assert start == 3
    rest = train(gen, data, tc, sch, optimizer=opt, start=start)
    assert [r.loss for r in full[3:]] == [r.loss for r in rest]


def test_log_file_has_one_record_per_iteration(tmp_path):
    cfg = tiny_config()
    train(Generator(cfg), _data(cfg), TrainConfig(iterations=4, batch_size=2), NoiseSchedule.cosine(cfg.steps),
          log_path=tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in open(tmp_path / "log.jsonl")]
    assert [r["iteration"] for r in rows] == [0, 1, 2, 3]


def test_lr_schedule():
    tc = TrainConfig(lr=1.0, iterations=10, warmup=2, lr_schedule="cosine")
    assert tc.lr_at(0) == 0.5 and tc.lr_at(1) == 1.0 and tc.lr_at(2) == 1.0
    assert tc.lr_at(9) < 0.05
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="linear")


@pytest.mark.slow
def test_overfit_single_clip():
    with ag.dtype_scope(np.float32):
        cfg = ModelConfig(d_motion=51, d_audio=12)
        data = _data(cfg, n=1, T=50, seed=3, fine=False)
        gen, sch = Generator(cfg), NoiseSchedule.cosine(cfg.steps)
        before = validation_loss(gen, data, sch)
        train(gen, data, TrainConfig(lr=1e-3, iterations=2000, batch_size=4, p_audio=0.0, p_coarse=0.0,
                                     lr_schedule="cosine", warmup=100), sch)
        after = validation_loss(gen, data, sch)
    assert after < 0.01 * before


# --------------------------------------------------------------- stage 2
def _stage2(cfg):
    gen = Generator(cfg)
    randomize(gen, np.random.default_rng(5))
    return insert_adapter(gen)


def test_stage2_freezes_base_and_moves_adapter():
    cfg = tiny_config()
    gen = _stage2(cfg)
    base = {n: p.data.copy() for n, p in gen.named_parameters() if not n.startswith("adapter.")}
    adapter = {n: p.data.copy() for n, p in gen.named_parameters() if n.startswith("adapter.")}
    train(gen, _data(cfg), TrainConfig(stage=2, lr=1e-2, iterations=6, batch_size=3, p_triplet=0.0),
          NoiseSchedule.cosine(cfg.steps), vocab=tiny_vocab())
    named = dict(gen.named_parameters())
    for n, v in base.items():
        np.testing.assert_array_equal(named[n].data, v)
    assert any(not np.array_equal(named[n].data, v) for n, v in adapter.items())


def test_stage2_branches():
    cfg = tiny_config()
    sch = NoiseSchedule.cosine(cfg.steps)
    recs = train(_stage2(cfg), _data(cfg), TrainConfig(stage=2, iterations=8, batch_size=2, p_swap=0.0),
                 sch, vocab=tiny_vocab())
    assert {r.branch for r in recs} == {"simple"}
    recs = train(_stage2(cfg), _data(cfg), TrainConfig(stage=2, iterations=8, batch_size=2, p_swap=1.0),
                 sch, vocab=tiny_vocab())
    assert {r.branch for r in recs} == {"swap"}


def test_swap_branch_with_empty_mask_has_zero_loss_and_gradient():
    cfg = tiny_config()
    gen = _stage2(cfg)
    data = _data(cfg)
    opt = make_optimizer(gen, TrainConfig(stage=2))
    before = [p.data.copy() for p in gen.adapter_parameters()]
    rec = stage2_step(data.batch([0, 1]), gen, NoiseSchedule.cosine(cfg.steps), opt, np.random.default_rng(0),
                      p_swap=1.0, vocab=tiny_vocab(), p_triplet=1.0)
    assert rec.branch == "swap" and rec.loss == 0.0
    for p, b in zip(gen.adapter_parameters(), before):
        assert p.grad is None or not np.any(p.grad)
        np.testing.assert_allclose(p.data, b * (1 - opt.lr * opt.weight_decay))


def test_stage2_visits_both_branches():
    cfg = tiny_config()
    gen = _stage2(cfg)
    sch = NoiseSchedule.cosine(cfg.steps)
    recs = train(gen, _data(cfg, n=20), TrainConfig(stage=2, lr=0.0, iterations=40, batch_size=4, p_swap=0.5,
                                                    p_triplet=0.0, p_au=0.0), sch, vocab=tiny_vocab())
    assert {r.branch for r in recs} == {"swap", "simple"}
    assert all(np.isfinite(r.loss) for r in recs)


def test_stage2_requires_adapter_and_fine():
    cfg = tiny_config()
    with pytest.raises(TrainingError):
        train(Generator(cfg), _data(cfg), TrainConfig(stage=2, iterations=1), NoiseSchedule.cosine(cfg.steps),
              vocab=tiny_vocab())
    with pytest.raises(TrainingError):
        train(_stage2(cfg), _data(cfg, fine=False), TrainConfig(stage=2, iterations=1),
              NoiseSchedule.cosine(cfg.steps), vocab=tiny_vocab())
