"""Independent reference implementations used by the test-suite.

They are written for clarity over speed and share no code with the package:
retrieval is a literal double loop over a full sort, and gradients come from
central finite differences of the loss.
"""

import math

import numpy as np

from salpn.model import PARAMS, total_ce_loss


def brute_force_ranking(query_vec, query_class, gallery_vecs, gallery_classes):
    """Return (order, distances, positive_ranks) with ties by insertion index."""
    items = []
    for i, (v, c) in enumerate(zip(gallery_vecs, gallery_classes)):
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(query_vec, v)))
        items.append((d, i, c))
    items.sort(key=lambda t: (t[0], t[1]))
    order = [i for _, i, _ in items]
    dists = [d for d, _, _ in items]
    pos = [r + 1 for r, (_, _, c) in enumerate(items) if c == query_class]
    return order, dists, pos


def brute_force_ap(positive_ranks):
    total = 0.0
    for hits, r in enumerate(sorted(positive_ranks), start=1):
        total += hits / r
    return total / len(positive_ranks)


def brute_force_recall(first_ranks, k):
    return sum(1 for r in first_ranks if r is not None and r <= k) / len(first_ranks)


def numeric_gradients(bank, X, y, h=1e-4):
    """Central differences of the training-mode loss w.r.t. every parameter."""
    out = []
    for head in bank.heads:
        g = {}
        for name in PARAMS:
            p = getattr(head, name)
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                lp, _ = total_ce_loss(bank, X, y, training=True)
                p[idx] = old - h
                lm, _ = total_ce_loss(bank, X, y, training=True)
                p[idx] = old
                num[idx] = (lp - lm) / (2 * h)
            g[name] = num
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        for name in PARAMS:
            a, n = ga[name], gn[name]
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(err.max()))
    return worst


def gradcheck_instance(seed, n_parts=2, d_in=8, d_mid=6, n_classes=4, batch=5):
    """Random bank and batch with non-trivial BN parameters, dropout off."""
    from salpn.model import HeadBank

    rng = np.random.default_rng(seed)
    bank = HeadBank.init(n_parts, d_in, d_mid, n_classes, seed=seed, cls_std=0.5)
    for head in bank.heads:
        head.fc_b = rng.normal(0, 0.1, d_mid)
        head.bn_gamma = rng.uniform(0.5, 1.5, d_mid)
        head.bn_beta = rng.normal(0, 0.2, d_mid)
        head.cls_b = rng.normal(0, 0.1, n_classes)
    X = rng.normal(size=(batch, n_parts, 3, d_in))
    y = rng.integers(1, n_classes + 1, batch)
    return bank, X, y
