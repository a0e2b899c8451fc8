"""Scalar-loop reference implementations used as independent oracles.

These are deliberately literal and slow. They share no helpers with the
vectorized code they check.
"""
from __future__ import annotations

import math

import numpy as np

from .types import FineCondition, Triplet


def control_rate_ref(frames, triplet, channel_map, window=5):
    T = len(frames)
    aus, s, e = triplet
    out = []
    for au in sorted(aus):
        chans = channel_map[au]
        b = []
        for t in range(T):
            v = frames[t][chans[0]]
            for c in chans[1:]:
                if frames[t][c] > v:
                    v = frames[t][c]
            b.append(v)
        peak = b[s]
        for t in range(s, e):
            if b[t] > peak:
                peak = b[t]
        around = []
        for t in range(s - window, s):
            if 0 <= t < T:
                around.append(b[t])
        for t in range(e, e + window):
            if 0 <= t < T:
                around.append(b[t])
        avg = math.fsum(around) / len(around) if around else 0.0
        out.append((au, float(peak - avg)))
    return out


def binarize_ref(frames, entries, channel_map, threshold, kernels, spacing, p_merge, min_length, rng):
    """Algorithm 1, step by step, one AU at a time."""
    T = len(frames)
    D = len(frames[0])
    triplets = []
    for au in entries:
        chans = [c for c in channel_map.get(au, ()) if c < D]
        if not chans:
            continue
        # step 1: threshold the group activity
        step1 = []
        for t in range(T):
            step1.append(max(frames[t][c] for c in chans) > threshold)
        # step 2: max pooling with a random odd kernel
        k = int(rng.choice(kernels))
        half = k // 2
        step2 = []
        for t in range(T):
            on = False
            for u in range(t - half, t + half + 1):
                if 0 <= u < T and step1[u]:
                    on = True
            step2.append(on)
        spans = []
        t = 0
        while t < T:
            if step2[t]:
                start = t
                while t < T and step2[t]:
                    t += 1
                spans.append([start, t])
            else:
                t += 1
        # step 3: randomly merge runs separated by short gaps
        merged = []
        for span in spans:
            if merged and span[0] - merged[-1][1] < spacing and rng.random() < p_merge:
                merged[-1][1] = span[1]
            else:
                merged.append(span)
        for s, e in merged:
            if e - s >= min_length:
                triplets.append((s, entries.index(au), Triplet(frozenset([au]), s, e)))
    triplets.sort(key=lambda x: (x[0], x[1]))
    return FineCondition(tuple(x[2] for x in triplets))


def lve_ref(pred, gt, lips):
    T = len(pred)
    total = 0.0
    for t in range(T):
        worst = 0.0
        for c in lips:
            err = (pred[t][c] - gt[t][c]) ** 2
            if err > worst:
                worst = err
        total += worst
    return total / T


def diversity_ref(features):
    n = len(features)
    d = len(features[0])
    acc = 0.0
    for j in range(d):
        mu = sum(f[j] for f in features) / n
        acc += math.sqrt(sum((f[j] - mu) ** 2 for f in features) / n)
    return acc / d


def guided_ref(g_null, g_ac, g_acf, alpha, beta, mask):
    """Elementwise three-term guidance; ``mask`` broadcast over the last axis."""
    g_null, g_ac, g_acf = (np.asarray(a) for a in (g_null, g_ac, g_acf))
    out = np.empty_like(g_null)
    for idx in np.ndindex(*g_null.shape):
        z = mask[idx[:-1] + (0,)] if mask is not None else 0.0
        n = g_null[idx]
        out[idx] = n + alpha * (g_ac[idx] - n) + beta * z * (g_acf[idx] - n)
    return out
