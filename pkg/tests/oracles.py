"""Slow reference implementations used to cross-check the package.

Everything here is written the dumb way on purpose: scalar loops,
Fraction/Decimal arithmetic, no vectorization, no imports from the
modules under test beyond plain data types. If an oracle and the
library disagree, the oracle wins the argument until proven otherwise.
"""

import math
from decimal import Decimal, ROUND_HALF_UP

import numpy as np


def similarity_oracle(anchor_embs, prompt_embs):
    """Entry-by-entry dot products, clipped to [-1, 1]."""
    embs = np.asarray(anchor_embs, dtype=np.float64)
    prompts = np.asarray(prompt_embs, dtype=np.float64)
    n_a, dim = embs.shape
    n_p = prompts.shape[0]
    out = np.zeros((n_a, n_p), dtype=np.float64)
    for i in range(n_a):
        for j in range(n_p):
            acc = 0.0
            for d in range(dim):
                acc += embs[i, d] * prompts[j, d]
            out[i, j] = min(1.0, max(-1.0, acc))
    return out


def _dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def intra_inter_oracle(features, labels, inter_mode="centroid"):
    """O(N^2) pairwise version of the compactness statistics."""
    feats = np.asarray(features, dtype=np.float64)
    labs = [int(v) for v in labels]
    classes = sorted(set(labs))
    intra_terms = []
    for c in classes:
        members = [feats[i] for i in range(len(labs)) if labs[i] == c]
        if len(members) < 2:
            continue
        dists = []
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                dists.append(_dist(members[i], members[j]))
        intra_terms.append(sum(dists) / len(dists))
    intra = sum(intra_terms) / len(intra_terms)
    if inter_mode == "centroid":
        cents = []
        for c in classes:
            members = [feats[i] for i in range(len(labs)) if labs[i] == c]
            cents.append([sum(col) / len(members) for col in zip(*members)])
        dists = []
        for i in range(len(cents)):
            for j in range(i + 1, len(cents)):
                dists.append(_dist(cents[i], cents[j]))
        inter = sum(dists) / len(dists)
    else:
        dists = []
        for i, a in enumerate(classes):
            for b in classes[i + 1:]:
                for p in (feats[k] for k in range(len(labs)) if labs[k] == a):
                    for q in (feats[k] for k in range(len(labs)) if labs[k] == b):
                        dists.append(_dist(p, q))
        inter = sum(dists) / len(dists)
    return intra, inter


def ce_oracle(logits, label):
    """Scalar softmax cross-entropy, no max-subtraction trick."""
    vals = [float(v) for v in np.asarray(logits).reshape(-1)]
    exp = [math.exp(v) for v in vals]
    total = sum(exp)
    return -math.log(exp[int(label)] / total)


def bilinear_oracle(image, corners, out_size):
    """Scalar bilinear resample of the boxed window.

    corners = (x0, y0, x1, y1) in unit coordinates. Output pixel (i, j)
    samples the source at the half-pixel center of the j-th (i-th)
    subdivision of the pixel-space window, shifted by -0.5 into index
    space, with border replication via index clamping.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[0], img.shape[1]
    x0, y0, x1, y1 = corners
    out_h, out_w = out_size
    out = np.zeros((out_h, out_w) + img.shape[2:], dtype=np.float64)
    for i in range(out_h):
        sy = y0 * h + (i + 0.5) * ((y1 - y0) * h / out_h) - 0.5
        iy = math.floor(sy)
        fy = sy - iy
        y_lo = min(max(iy, 0), h - 1)
        y_hi = min(max(iy + 1, 0), h - 1)
        for j in range(out_w):
            sx = x0 * w + (j + 0.5) * ((x1 - x0) * w / out_w) - 0.5
            ix = math.floor(sx)
            fx = sx - ix
            x_lo = min(max(ix, 0), w - 1)
            x_hi = min(max(ix + 1, 0), w - 1)
            top = img[y_lo, x_lo] * (1 - fx) + img[y_lo, x_hi] * fx
            bot = img[y_hi, x_lo] * (1 - fx) + img[y_hi, x_hi] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def macro_avg_oracle(values):
    """Decimal mean of four accuracies, half-up at two decimals."""
    total = Decimal(0)
    for v in values:
        total += Decimal(str(v))
    mean = total / Decimal(len(values))
    return float(mean.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def fusion_oracle(z_v, z_f, weights, clamp):
    """Numpy float64 mirror of the fusion head.

    weights holds projection/gate1/gate2/classifier (weight, bias)
    pairs keyed by name. Returns (z_f_proj, alpha, z_all, logits).
    """
    z_v = np.asarray(z_v, dtype=np.float64)
    z_f = np.asarray(z_f, dtype=np.float64)

    def lin(x, name):
        wt, bs = weights[name]
        return x @ np.asarray(wt, dtype=np.float64).T + np.asarray(bs, dtype=np.float64)

    z_f_proj = lin(z_f, "projection")
    hidden = np.maximum(lin(np.concatenate([z_v, z_f_proj], axis=-1), "gate1"), 0.0)
    pre = np.clip(lin(hidden, "gate2"), -clamp, clamp)
    alpha = 1.0 / (1.0 + np.exp(-pre))
    z_all = alpha * z_v + (1.0 - alpha) * z_f_proj
    logits = lin(z_all, "classifier")
    return z_f_proj, alpha, z_all, logits


def consensus_oracle(records):
    """Brute-force predicate: keep ids where all three raters agree."""
    kept_ids = []
    dropped_ids = []
    for rec in records:
        scores = list(rec.rater_scores)
        if len(set(scores)) == 1:
            kept_ids.append(rec.image_id)
        else:
            dropped_ids.append(rec.image_id)
    return kept_ids, dropped_ids
