"""Control Rate, lip error, diversity and the emotion classifier.

Control Rate of an AU ``k`` for a triplet ``[s, e)``::

    B_k(t) = max over the AU's channels of motion[t]
    CR_k   = max(B_k[s:e]) - mean(B_k over [s-5, s) and [e, e+5))

The two neighbor windows are pooled into one mean and clipped at the
sequence ends.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .nn import FeedForward, Linear, Module, MultiHeadAttention, Parameter, sinusoidal_embedding
from .training import AdamW
from .types import AUVocabulary, FineCondition, MotionSequence, Triplet

NEIGHBOR_WINDOW = 5


def _frames(m) -> np.ndarray:
    return m.frames if isinstance(m, MotionSequence) else np.asarray(m, dtype=np.float64)


# ------------------------------------------------------------ control rate
class AUControl(NamedTuple):
    au: str
    cr: float
    flagged: bool


def control_rate(motion, triplet: Triplet, vocab: AUVocabulary, window: int = NEIGHBOR_WINDOW) -> list[AUControl]:
    """Per-AU control rate of one triplet, AUs in sorted order.

    ``flagged`` marks an empty neighbor set (the triplet spans the whole
    clip); its neighbor average is taken as 0.
    """
    frames = _frames(motion)
    T = frames.shape[0]
    aus, s, e = triplet
    if not 0 <= s < e <= T:
        raise ValueError(f"triplet [{s}, {e}) outside [0, {T})")
    neighbors = np.r_[max(0, s - window):s, e:min(T, e + window)]
    out = []
    for au in sorted(aus):
        b = frames[:, list(vocab.channels(au))].max(axis=1)
        avg = math.fsum(b[neighbors]) / len(neighbors) if len(neighbors) else 0.0
        out.append(AUControl(au, float(b[s:e].max()) - avg, not len(neighbors)))
    return out


@dataclass
class ControlReport:
    """Rows are ``(clip, triplet index, AU, CR)``; ``mean`` averages the per-triplet AU means."""

    rows: list = field(default_factory=list)
    per_triplet: list = field(default_factory=list)
    flagged: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_triplet)) if self.per_triplet else float("nan")

    @property
    def count(self) -> int:
        return len(self.per_triplet)

    def to_json(self) -> dict:
        return {"mean_cr": self.mean, "n_triplets": self.count, "n_au": len(self.rows),
                "flagged": self.flagged,
                "rows": [{"clip": c, "triplet": i, "au": a, "cr": v} for c, i, a, v in self.rows]}


def control_report(motions: Sequence, fines: Sequence[FineCondition], vocab: AUVocabulary,
                   clip_ids: Sequence | None = None, window: int = NEIGHBOR_WINDOW) -> ControlReport:
    clip_ids = list(range(len(motions))) if clip_ids is None else list(clip_ids)
    rep = ControlReport()
    for cid, m, fc in zip(clip_ids, motions, fines):
        for i, trip in enumerate(fc.triplets):
            res = control_rate(m, trip, vocab, window)
            rep.rows.extend((cid, i, r.au, r.cr) for r in res)
            rep.per_triplet.append(float(np.mean([r.cr for r in res])))
            rep.flagged += any(r.flagged for r in res)
    return rep


# ------------------------------------------------------------- LVE, diversity
def lve(pred, gt, lip_channels: Sequence[int]) -> float:
    """Per frame, the largest squared lip-channel error; averaged over frames."""
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    lips = list(lip_channels)
    return float(((p[:, lips] - g[:, lips]) ** 2).max(axis=1).mean())


def diversity(features) -> float:
    """Mean over dimensions of the population standard deviation across vectors."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("diversity needs at least two feature vectors")
    return float(f.std(axis=0).mean())


def mean_motion_baseline(train_motions: np.ndarray) -> np.ndarray:
    """Constant predictor: per-channel mean over all training frames, ``(D,)``."""
    return np.asarray(train_motions).reshape(-1, np.shape(train_motions)[-1]).mean(axis=0)


# ------------------------------------------------------ emotion classifier
@dataclass
class ClassifierConfig:
    d_model: int = 64
    n_heads: int = 4
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0


class EmotionClassifier(Module):
    """Input MLP, prepended cls token, one pre-LN encoder layer, linear head on the cls slot."""

    def __init__(self, d_motion: int, n_emotions: int, d_model: int = 64, n_heads: int = 4,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.d_model = d_model
        self.in_fc1 = Linear(d_motion, d_model, rng)
        self.in_fc2 = Linear(d_model, d_model, rng)
        self.cls = Parameter(rng.normal(0, 0.02, (1, 1, d_model)))
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ff = FeedForward(d_model, rng)
        self.head = Linear(d_model, n_emotions, rng)

    def encode(self, motion) -> ag.Tensor:
        """cls-token feature, ``(B, d_model)``."""
        x = ag.as_tensor(motion)
        B, T, _ = x.shape
        h = self.in_fc2(ag.gelu(self.in_fc1(x)))
        h = ag.concat([ag.broadcast_to(self.cls, (B, 1, self.d_model)), h], axis=1)
        h = h + sinusoidal_embedding(np.arange(T + 1), self.d_model)
        h = h + self.attn(ag.layer_norm(h))
        h = h + self.ff(ag.layer_norm(h))
        return ag.layer_norm(h[:, 0])

    def forward(self, motion) -> ag.Tensor:
        return self.head(self.encode(motion))


def cross_entropy(logits: ag.Tensor, labels: np.ndarray) -> ag.Tensor:
    logp = ag.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(labels)), np.asarray(labels)].mean()


def train_classifier(motions: np.ndarray, labels: np.ndarray, n_emotions: int,
                     cfg: ClassifierConfig | None = None) -> EmotionClassifier:
    cfg = cfg or ClassifierConfig()
    motions = np.asarray(motions)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    clf = EmotionClassifier(motions.shape[-1], n_emotions, cfg.d_model, cfg.n_heads, rng)
    opt = AdamW(clf.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(motions))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            loss = cross_entropy(clf(motions[idx]), labels[idx])
            loss.backward()
            opt.step()
    return clf


def classify_batch(clf: EmotionClassifier, motions, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Predicted emotion ids ``(N,)`` and cls features ``(N, d)``."""
    motions = np.asarray([_frames(m) for m in motions])
    preds, feats = [], []
    with ag.no_grad():
        for lo in range(0, len(motions), batch_size):
            f = clf.encode(motions[lo:lo + batch_size])
            preds.append(clf.head(f).data.argmax(axis=-1))
            feats.append(f.data)
    return np.concatenate(preds), np.concatenate(feats)


def classify(clf: EmotionClassifier, motion) -> tuple[int, np.ndarray]:
    pred, feat = classify_batch(clf, [motion])
    return int(pred[0]), feat[0]


def accuracy(clf: EmotionClassifier, motions, labels) -> float:
    pred, _ = classify_batch(clf, motions)
    return float(np.mean(pred == np.asarray(labels)))


# ------------------------------------------------------------------ reports
@dataclass
class EvalReport:
    rows: list
    aggregates: dict
    control: ControlReport | None = None

    def to_json(self) -> dict:
        doc = {"per_clip": self.rows, "aggregates": self.aggregates}
        if self.control is not None:
            doc["control_rate"] = self.control.to_json()
        return doc

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)
        return buf.getvalue()

    def save(self, out_dir):
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
        (out / "report.csv").write_text(self.to_csv())


def evaluate(clip_ids: Sequence[str], generated: Sequence, ground_truth: Sequence, emotion_labels: Sequence[int],
             lip_channels: Sequence[int], vocab: AUVocabulary, fines: Sequence[FineCondition] | None = None,
             classifier: EmotionClassifier | None = None) -> EvalReport:
    """Per-clip LVE (and predicted emotion), aggregate LVE / Acc / Div, plus CR when fine conditions exist."""
    if not (len(clip_ids) == len(generated) == len(ground_truth) == len(emotion_labels)):
        raise ValueError("clip ids, generated and ground-truth motions must align")
    rows = [{"clip": cid, "lve": lve(g, t, lip_channels), "emotion": int(e)}
            for cid, g, t, e in zip(clip_ids, generated, ground_truth, emotion_labels)]
    agg = {"n_clips": len(rows), "lve": float(np.mean([r["lve"] for r in rows])) if rows else float("nan")}
    if classifier is not None and rows:
        pred, feats = classify_batch(classifier, generated)
        for r, p in zip(rows, pred):
            r["predicted_emotion"] = int(p)
        agg["accuracy"] = float(np.mean(pred == np.asarray(emotion_labels)))
        if len(rows) >= 2:
            agg["diversity"] = diversity(feats)
    control = None
    if fines is not None and any(not fc.empty for fc in fines):
        control = control_report(generated, fines, vocab, clip_ids)
        per_clip = {}
        for cid, _, _, v in control.rows:
            per_clip.setdefault(cid, []).append(v)
        for r in rows:
            if r["clip"] in per_clip:
                r["cr"] = float(np.mean(per_clip[r["clip"]]))
        agg["cr"] = control.mean
    return EvalReport(rows, agg, control)
