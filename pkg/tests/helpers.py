"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np
import torch

from fbchain.network import make_config

FD_STEP = 1e-5
FD_RTOL = 1e-3
FD_FLOOR = 1e-6


def micro_config(**kw):
    """Two small levels with the full module stack; fast enough for loops."""
    args = dict(num_levels=2, channels=(8, 16), depth=(2, 2), input_size=(16, 16))
    args.update(kw)
    return make_config(**args)


def _flat_views(tensors):
    return [(t, k) for t in tensors for k in range(t.numel())]


def fd_probe(fn, tensors, n_probes, seed=0, step=FD_STEP):
    """Compare autograd with central differences on random coordinates.

    ``fn()`` must return a scalar computed from ``tensors`` (float64 leaves
    with requires_grad). Returns a list of (analytic, numeric, rel_error).
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    coords = _flat_views(tensors)
    pick = rng.choice(len(coords), size=min(n_probes, len(coords)), replace=False)
    results = []
    for p in pick:
        gi = None
        t, k = coords[p]
        for idx, cand in enumerate(tensors):
            if cand is t:
                gi = idx
        analytic = grads[gi].reshape(-1)[k].item()
        flat = t.data.view(-1)
        orig = flat[k].item()
        with torch.no_grad():
            flat[k] = orig + step
            up = fn().item()
            flat[k] = orig - step
            down = fn().item()
            flat[k] = orig
        numeric = (up - down) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FD_FLOOR)
        results.append((analytic, numeric, rel))
    return results


def randomize_(module, seed=0, scale=0.3):
    """Overwrite every parameter with seeded noise (biases included)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def brute_counts(pred, target):
    """Pixel-set oracle: tp/fp/fn/tn from sets of coordinates."""
    h, w = target.shape
    P = {(i, j) for i in range(h) for j in range(w) if pred[i, j]}
    T = {(i, j) for i in range(h) for j in range(w) if target[i, j]}
    U = {(i, j) for i in range(h) for j in range(w)}
    return len(P & T), len(P - T), len(T - P), len(U - P - T)


def rank_auc(scores, labels):
    """Mann-Whitney U statistic / (n_pos * n_neg), ties counted half."""
    from scipy.stats import rankdata

    r = rankdata(scores)
    pos = labels.astype(bool)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    return (r[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
