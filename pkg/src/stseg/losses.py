"""Losses over per-pixel embeddings, each returning analytic gradients.

Every function here takes flattened feature matrices (one row per valid
pixel) and hands back (value, gradient) pairs in float64, so each gradient
path can be validated against central finite differences.
"""
import logging

import numpy as np

logger = logging.getLogger(__name__)


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def proto_ce_loss(features, labels, centroids, temperature=1.0):
    """Prototype cross-entropy under cosine distance.

    logit_k = -(1 - z.mu_k)/tau; loss = mean over rows of the negative
    log-softmax at the assigned label. Returns (loss, grad wrt features).
    """
    z = np.asarray(features, dtype=np.float64)
    mu = np.asarray(centroids, dtype=np.float64)
    labels = np.asarray(labels)
    if len(z) == 0:
        raise ValueError("no rows to score")
    if labels.min() < 0 or labels.max() >= len(mu):
        raise ValueError("label outside centroid range")
    logits = (z @ mu.T - 1.0) / temperature
    logp = _log_softmax(logits)
    n = len(z)
    loss = -logp[np.arange(n), labels].mean()
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    grad = (p @ mu) / (temperature * n)
    return float(loss), grad


def within_cross_losses(feats1, labels1, cents1, feats2, labels2, cents2,
                        idx1, idx2, temperature=1.0):
    """Within-view and cross-view prototype losses for two augmented views.

    idx1/idx2 identify the rows of each view that came from the same source
    points, in matching order; the cross term scores each view's features
    against the other view's labels and centroids through that pairing.
    Returns {"within": (value, g1, g2), "cross": (value, g1, g2)}.
    """
    idx1 = np.asarray(idx1, dtype=np.int64)
    idx2 = np.asarray(idx2, dtype=np.int64)
    if len(idx1) != len(idx2):
        raise ValueError("pairing index lengths differ")
    if len(idx1) == 0:
        raise ValueError("views share no identified points")
    w1, gw1 = proto_ce_loss(feats1, labels1, cents1, temperature)
    w2, gw2 = proto_ce_loss(feats2, labels2, cents2, temperature)
    c1, gc1 = proto_ce_loss(feats1[idx1], labels2[idx2], cents2, temperature)
    c2, gc2 = proto_ce_loss(feats2[idx2], labels1[idx1], cents1, temperature)
    g1 = np.zeros_like(np.asarray(feats1, dtype=np.float64))
    g2 = np.zeros_like(np.asarray(feats2, dtype=np.float64))
    np.add.at(g1, idx1, gc1)
    np.add.at(g2, idx2, gc2)
    return {"within": (w1 + w2, gw1, gw2), "cross": (c1 + c2, g1, g2)}


def spatiotemporal_loss(feats_t, labels_t, cents_t, feats_s, labels_s,
                        cents_s, idx_t, idx_s, temperature=1.0):
    """Cross-frame prototype loss over corresponded pixels.

    Each frame's corresponded features are scored against the other
    frame's pseudo-labels and centroids, both terms normalized by the pair
    count. An empty correspondence set contributes zero (with a warning)
    so sparse frame pairs cannot poison a batch.
    Returns (value, grad_t, grad_s).
    """
    idx_t = np.asarray(idx_t, dtype=np.int64)
    idx_s = np.asarray(idx_s, dtype=np.int64)
    g_t = np.zeros_like(np.asarray(feats_t, dtype=np.float64))
    g_s = np.zeros_like(np.asarray(feats_s, dtype=np.float64))
    if len(idx_t) == 0:
        logger.warning("empty correspondence set, spatiotemporal loss is 0")
        return 0.0, g_t, g_s
    v1, gc1 = proto_ce_loss(feats_t[idx_t], labels_s[idx_s], cents_s,
                            temperature)
    v2, gc2 = proto_ce_loss(feats_s[idx_s], labels_t[idx_t], cents_t,
                            temperature)
    np.add.at(g_t, idx_t, gc1)
    np.add.at(g_s, idx_s, gc2)
    return v1 + v2, g_t, g_s


def discriminative_loss(features, groups, delta_v=0.5, delta_d=1.5,
                        ignore=255):
    """Push-pull regularizer over semantic groups.

    Pull: squared hinge on the distance of each member to its group mean
    beyond delta_v, averaged within the group then across groups. Push:
    squared hinge on group-mean separations below 2*delta_d, averaged over
    group pairs. Rows with group id `ignore` do not participate.
    Returns (value, grad wrt features).
    """
    z = np.asarray(features, dtype=np.float64)
    groups = np.asarray(groups)
    grad = np.zeros_like(z)
    ids = sorted(int(g) for g in np.unique(groups) if g != ignore)
    if not ids:
        raise ValueError("no non-ignored group present")
    members = {g: np.flatnonzero(groups == g) for g in ids}
    means = {g: z[members[g]].mean(axis=0) for g in ids}
    n_groups = len(ids)

    pull = 0.0
    for g in ids:
        idx = members[g]
        r = z[idx] - means[g]
        d = np.linalg.norm(r, axis=1)
        h = np.maximum(0.0, d - delta_v)
        pull += float(np.mean(h * h)) / n_groups
        coef = np.where(d > 0, 2.0 * h / np.where(d > 0, d, 1.0), 0.0)
        hr = coef[:, None] * r
        grad[idx] += (hr - hr.mean(axis=0)) / (len(idx) * n_groups)

    push = 0.0
    pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]
    if pairs:
        for a, b in pairs:
            m = means[a] - means[b]
            dm = float(np.linalg.norm(m))
            h = max(0.0, 2.0 * delta_d - dm)
            push += h * h / len(pairs)
            if h > 0 and dm > 0:
                gm = (-2.0 * h / dm) * m / len(pairs)
                grad[members[a]] += gm / len(members[a])
                grad[members[b]] -= gm / len(members[b])
    return pull + push, grad


def rmse_loss(probs, targets):
    """Root-mean-square error for the binary foreground head.

    Smooth at zero error; returns (value, grad wrt probs).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probs/targets shape mismatch")
    if p.size == 0:
        raise ValueError("nothing to score")
    diff = p - y
    loss = float(np.sqrt(np.mean(diff * diff) + 1e-12))
    grad = diff / (p.size * loss)
    return loss, grad
