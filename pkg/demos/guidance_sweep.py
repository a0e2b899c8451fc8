"""How the fine guidance scale moves one AU, and where.

    python demos/guidance_sweep.py CKPT_DIR DATA_DIR

CKPT_DIR is a stage-2 checkpoint (``facediff train --stage 2``), DATA_DIR the
dataset it was trained on. One held-out clip is sampled with the same noise at
several beta values. The table shows the peak of the controlled channels
inside the triplet, and how far the motion moved from the beta=0 sample just
before the triplet and far after it.
"""
import sys

import numpy as np

from facediff import autograd as ag
from facediff import pipeline as pl
from facediff.data import read_dataset
from facediff.diffusion import GuidanceConfig
from facediff.training import load_generator
from facediff.types import AUVocabulary, FineCondition

ag.set_dtype(np.float32)
gen = load_generator(sys.argv[1])
ds = read_dataset(sys.argv[2])
vocab = AUVocabulary.default()
_, val_idx = ds.split()
clip = ds.training_data(val_idx[:1])

T = clip.motion.shape[1]
s, e = T // 3, T // 3 + 10
fine = FineCondition(((["AU12"], s, e),))  # lip corner puller
chans = list(vocab.channels("AU12"))
cond = pl.bundle_for(clip, fines=[fine], vocab=vocab)
mask = pl.cfg_masks([fine], T)

print("beta   inside  edge   far")
base = None
for beta in (0.0, 0.5, 1.0, 2.0, 4.0):
    x = pl.generate(gen, cond, GuidanceConfig(2.0, beta, mask), seed=3)[0][:, chans]
    base = x if base is None else base
    d = np.abs(x - base).mean(1)
    print("%4.1f  %6.3f  %5.3f  %5.3f" % (beta, x[s:e].max(), d[max(0, s - 5):s].mean(), d[e + 5:].mean()))
