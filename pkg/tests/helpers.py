"""Independent oracles and numeric utilities shared across tests.

Everything here is deliberately written as plain loops / direct formula
evaluation in numpy float64, separate from the library's torch code paths.
"""

import math

import numpy as np
import torch


def np_softmax_rows(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def np_soft_ce(logits, targets):
    """-(1/B) sum_ij targets[i,j] * log softmax(logits)[i,j]."""
    probs = np_softmax_rows(logits)
    targets = np.asarray(targets, dtype=np.float64)
    return float(-(targets * np.log(probs)).sum() / logits.shape[0])


def np_cooccurrence(categories):
    """Brute-force pairwise-equality targets, row-normalized."""
    n = len(categories)
    raw = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            raw[i, j] = 1.0 if categories[i] == categories[j] else 0.0
    for i in range(n):
        raw[i] /= raw[i].sum()
    return raw


def np_dual_ce(v, t, lam, targets):
    """Both directional soft cross entropies from raw feature matrices."""
    sims = lam * (np.asarray(v, dtype=np.float64) @ np.asarray(t, dtype=np.float64).T)
    return np_soft_ce(sims, targets) + np_soft_ce(sims.T, targets)


def np_attention(v_p, v_m, t_m, w_q, w_k, w_v, w_o):
    """Scalar-level evaluation of multi-head cross attention."""
    v_p, v_m, t_m = (np.asarray(x, dtype=np.float64) for x in (v_p, v_m, t_m))
    heads = w_q.shape[0]
    d_h = w_q.shape[2]
    outs = []
    for p in range(v_p.shape[0]):
        concat = []
        for h in range(heads):
            q = v_p[p] @ w_q[h]
            scores = np.array([(q @ (v_m[m] @ w_k[h])) / math.sqrt(d_h) for m in range(v_m.shape[0])])
            scores = scores - scores.max()
            weights = np.exp(scores) / np.exp(scores).sum()
            head_out = np.zeros(d_h)
            for m in range(v_m.shape[0]):
                head_out += weights[m] * (t_m[m] @ w_v[h])
            concat.append(head_out)
        outs.append(np.concatenate(concat) @ w_o)
    return np.stack(outs)


def pair_count_auc(scores, positives):
    """Brute-force AUC: fraction of (positive, negative) pairs correctly
    ordered, ties counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    pos = scores[positives]
    neg = scores[~positives]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def finite_diff_grad(fn, tensor, h=1e-5):
    """Central finite differences of a scalar-valued fn w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    grad_flat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    a = analytic.detach().reshape(-1)
    b = numeric.detach().reshape(-1)
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())


def unit_rows(rng, rows, cols, dtype=torch.float64):
    mat = torch.tensor(rng.standard_normal((rows, cols)), dtype=dtype)
    return mat / mat.norm(dim=1, keepdim=True)


def noisy_image(rng, base, spread=12, side=16):
    """Solid color plus per-pixel noise: histograms spread over adjacent bins
    so same-group images are close (exact solids would be one-hot and pairwise
    orthogonal)."""
    img = np.array(base, dtype=np.int16) + rng.integers(
        -spread, spread + 1, size=(side, side, 3), dtype=np.int16
    )
    return np.clip(img, 0, 255).astype(np.uint8)
