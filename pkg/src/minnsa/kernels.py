"""Masked normalization kernels: sparsemax and softmax.

Both kernels act on the last axis of a score array and accept an optional
boolean mask of the same shape. Masked positions are removed from the
normalization domain entirely, so they always receive exactly zero weight
and zero gradient.
"""

import numpy as np


def _prepare(z, mask):
    z = np.asarray(z, dtype=np.float64)
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} does not match scores {z.shape}")
    if z.ndim == 0:
        raise ValueError("scores must have at least one axis")
    if not mask.any(axis=-1).all():
        raise ValueError("every score vector needs at least one unmasked entry")
    return z, mask


def sparsemax_threshold(z, mask=None):
    """Return the sparsemax threshold tau and support size for each row.

    Sorts the unmasked scores in decreasing order, finds the largest ``k``
    with ``1 + k * z_(k) > sum_{r<=k} z_(r)`` and sets
    ``tau = (sum_{r<=k} z_(r) - 1) / k``.
    """
    z, mask = _prepare(z, mask)
    masked = np.where(mask, z, -np.inf)
    # stable sort of the negated scores gives a deterministic descending order
    zs = -np.sort(-masked, axis=-1, kind="stable")
    finite = np.isfinite(zs)
    cs = np.cumsum(np.where(finite, zs, 0.0), axis=-1)
    j = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    cond = finite & (1.0 + j * np.where(finite, zs, 0.0) > cs)
    # cond holds on a prefix; take the last true index to be safe
    last = z.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    k = last + 1
    cs_k = np.take_along_axis(cs, last[..., None], axis=-1)[..., 0]
    tau = (cs_k - 1.0) / k
    return tau, k


def sparsemax(z, mask=None):
    """Euclidean projection of the unmasked scores onto the probability simplex."""
    z, mask = _prepare(z, mask)
    tau, _ = sparsemax_threshold(z, mask)
    p = np.maximum(z - tau[..., None], 0.0)
    return np.where(mask, p, 0.0)


def sparsemax_backward(p, out_grad, mask=None):
    """Vector-Jacobian product of sparsemax given its output ``p``.

    On the support S = {i : p_i > 0} the Jacobian is ``I - 1 1^T / |S|``;
    off the support it is zero. At support-boundary points this is the
    one-sided derivative of the computed support.
    """
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(out_grad, dtype=np.float64)
    support = p > 0
    if mask is not None:
        support &= np.asarray(mask, dtype=bool)
    g = np.where(support, g, 0.0)
    n_support = support.sum(axis=-1, keepdims=True)
    mean = g.sum(axis=-1, keepdims=True) / np.maximum(n_support, 1)
    return np.where(support, g - mean, 0.0)


def softmax(z, mask=None):
    """Max-shifted softmax over the unmasked scores."""
    z, mask = _prepare(z, mask)
    masked = np.where(mask, z, -np.inf)
    shift = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - shift), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, out_grad, mask=None):
    """Vector-Jacobian product of softmax: ``p * (g - <p, g>)``."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(out_grad, dtype=np.float64)
    if mask is not None:
        g = np.where(np.asarray(mask, dtype=bool), g, 0.0)
    dot = (p * g).sum(axis=-1, keepdims=True)
    out = p * (g - dot)
    if mask is not None:
        out = np.where(mask, out, 0.0)
    return out


KERNELS = {
    "sparsemax": (sparsemax, sparsemax_backward),
    "softmax": (softmax, softmax_backward),
}
