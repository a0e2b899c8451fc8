"""Quickstart: synthetic data, a small base model, guided samples and their metrics.

Runs in a couple of minutes on one core. The model is far smaller than the
desk profile, so the numbers are only indicative.
"""
import numpy as np

from facediff import autograd as ag
from facediff import pipeline as pl
from facediff.data import SyntheticSpec, generate_dataset
from facediff.diffusion import GuidanceConfig
from facediff.evaluation import control_report, lve, mean_motion_baseline
from facediff.training import TrainConfig
from facediff.types import AUVocabulary

ag.set_dtype(np.float32)  # fp32 is about twice as fast; checks use fp64

# %% data: lip motion driven by phoneme tokens, emotion offsets on AU channels
vocab = AUVocabulary.default()
ds = generate_dataset(SyntheticSpec(n_clips=200, T=40, seed=0), vocab)
train_idx, val_idx = ds.split()
val = ds.training_data(val_idx)
print(len(ds), "clips,", ds.spec.T, "frames x", len(vocab.channel_names), "channels")
print("a clip's AU events:", next(c for c in ds.clips if not c.fine.empty).fine.to_json())

# %% stage 1: audio + coarse conditions
small = {"d_model": 32, "n_heads": 2, "n_blocks": 1, "d_cond": 32, "steps": 50}
cfg1 = TrainConfig(stage=1, lr=1e-3, batch_size=8, iterations=800, lr_schedule="cosine", warmup=50, log_every=200)
base, recs = pl.train_stage1(ds, vocab, cfg1, model_overrides=small, indices=train_idx)
print("stage 1 loss: first %.3f  last %.3f" % (recs[0].loss, np.mean([r.loss for r in recs[-50:]])))

# %% sample the held-out clips with audio/coarse guidance only
out = pl.generate(base, pl.bundle_for(val), GuidanceConfig(2.0), seed=0)
lips = ds.spec.lip_channels
mean_pose = np.tile(mean_motion_baseline(ds.training_data(train_idx).motion), (ds.spec.T, 1))
print("LVE generated %.4f  vs mean pose %.4f" % (
    np.mean([lve(o, g, lips) for o, g in zip(out, val.motion)]),
    np.mean([lve(mean_pose, g, lips) for g in val.motion])))

# %% stage 2: freeze the base, train the fine-condition adapter with swapped labels
cfg2 = TrainConfig(stage=2, lr=1e-3, batch_size=8, iterations=300, p_swap=0.5, log_every=100)
gen, _ = pl.train_stage2(base, ds, vocab, cfg2, indices=train_idx)

# %% conflicting conditions: a different emotion, but the clip's own AU triplets
coarse = pl.conflict_conditions(val, gen.cfg.n_emotions, seed=1)
fines = list(val.fine)
cond = pl.bundle_for(val, coarse, fines, vocab)
masks = pl.cfg_masks(fines, ds.spec.T)
for beta in (0.0, 2.0):
    x = pl.generate(gen, cond, GuidanceConfig(2.0, beta, masks), seed=0)
    print("beta=%g  CR %.3f" % (beta, control_report(x, fines, vocab).mean))
