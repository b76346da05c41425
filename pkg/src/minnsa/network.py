"""Sparse-attention multiple-instance network with hand-written gradients.

Pipeline per bag: a stack of residual blocks whose fully-connected layers
are shared by every instance, a ``w . tanh(V z)`` scoring head, sparsemax
(or softmax) attention pooling, batch normalization of the pooled vector,
and a single-logit linear classifier.

All tensors are float64 numpy arrays. ``forward`` records everything that
``backward`` needs in a :class:`ForwardTrace`.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import KERNELS

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = "minnsa-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    p: int = 30
    m_star: int = 100
    n_blocks: int = 2
    attn_hidden: int = 64
    dropout_rate: float = 0.3
    use_skip: bool = True
    use_sparse: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.p < 1 or self.m_star < 1:
            raise ValueError("p and m_star must be positive")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be at least 1")
        if self.attn_hidden < 1:
            raise ValueError("attn_hidden must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def variant(self):
        return {
            (False, False): "FC",
            (True, False): "Skip",
            (False, True): "Sparse",
            (True, True): "Proposed",
        }[(self.use_skip, self.use_sparse)]


def param_shapes(cfg):
    shapes = {}
    for l in range(cfg.n_blocks):
        shapes[f"W{l}"] = (cfg.p, cfg.p)
        shapes[f"b{l}"] = (cfg.p,)
    shapes["V"] = (cfg.attn_hidden, cfg.p)
    shapes["w"] = (cfg.attn_hidden,)
    shapes["gamma"] = (cfg.p,)
    shapes["beta"] = (cfg.p,)
    shapes["c"] = (cfg.p,)
    shapes["c0"] = ()
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict
    running_mean: np.ndarray
    running_var: np.ndarray
    # bumped on every parameter update so stale traces can be detected
    version: int = 0

    def copy(self):
        return Model(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.running_mean.copy(),
            self.running_var.copy(),
            self.version,
        )

    def state_arrays(self):
        out = dict(self.params)
        out["running_mean"] = self.running_mean
        out["running_var"] = self.running_var
        return out


def init_std(fan_in):
    """Standard deviation of the initial weights for a given fan-in."""
    return 1.0 / math.sqrt(3.0 * fan_in)


def _uniform_fan_in(rng, shape, fan_in):
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)); larger attention-head weights make
    # sparsemax start on a single instance, where its gradient vanishes
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg):
    rng = np.random.default_rng([cfg.seed, 2])
    params = {}
    for l in range(cfg.n_blocks):
        params[f"W{l}"] = _uniform_fan_in(rng, (cfg.p, cfg.p), cfg.p)
        params[f"b{l}"] = np.zeros(cfg.p)
    params["V"] = _uniform_fan_in(rng, (cfg.attn_hidden, cfg.p), cfg.p)
    params["w"] = _uniform_fan_in(rng, (cfg.attn_hidden,), cfg.attn_hidden)
    params["gamma"] = np.ones(cfg.p)
    params["beta"] = np.zeros(cfg.p)
    params["c"] = _uniform_fan_in(rng, (cfg.p,), cfg.p)
    params["c0"] = np.zeros(())
    return Model(cfg, params, np.zeros(cfg.p), np.ones(cfg.p))


# ---------------------------------------------------------------------------
# layers


def locally_fc(X, mask, W, b):
    """Apply the same affine map to every instance row; masked rows stay zero."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape}, W {W.shape}, b {b.shape}")
    if mask.shape != X.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match X {X.shape}")
    Y = X @ W.T + b
    return np.where(mask[..., None], Y, 0.0)


def dropout(X, rate, mode, rng):
    """Inverted dropout. Returns ``(output, scale_mask)``; the mask is None
    when the layer acts as the identity."""
    if mode == "eval" or rate == 0.0:
        return X, None
    keep = rng.random(X.shape) >= rate
    scale = keep / (1.0 - rate)
    return X * scale, scale


def residual_block(X, mask, W, b, use_skip, rate, mode, rng):
    pre = locally_fc(X, mask, W, b)
    act = np.maximum(pre, 0.0)
    inner, drop = dropout(act, rate, mode, rng)
    out = inner + X if use_skip else inner
    return out, (pre, drop)


def attention_scores(Z, mask, V, w):
    """Score each instance by ``w . tanh(V z)``. Masked entries are -inf."""
    U = np.tanh(Z @ V.T)
    e = U @ w
    return np.where(mask, e, -np.inf), U


def attention_pool(Z, alpha):
    return (alpha[:, None, :] @ Z)[:, 0, :]


def batch_norm(F, gamma, beta, running_mean, running_var, mode):
    """Return ``(output, cache, new_running_mean, new_running_var)``."""
    if mode == "train":
        if F.shape[0] < 2:
            raise ValueError("batch normalization in train mode needs a batch of at least 2")
        mu = F.mean(axis=0)
        var = F.var(axis=0)
        n = F.shape[0]
        new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu
        # running variance tracks the unbiased estimate
        new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (F - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std), new_mean, new_var


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    logits: np.ndarray
    attention: np.ndarray  # (batch, m_star)
    pooled_features: np.ndarray  # (batch, p), before batch norm
    normalized_features: np.ndarray  # (batch, p), after batch norm
    mode: str
    model_version: int
    # cached intermediates, truncated to the longest bag in the batch
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def probabilities(self):
        return sigmoid(self.logits)


def forward(model, batch, mode="eval", rng=None, update_stats=True):
    """Run the network on a :class:`BagBatch` (or any object with ``data``
    and ``mask``). In train mode, ``update_stats`` controls whether the
    model's batch-norm running statistics are updated in place."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    cfg = model.config
    data = np.asarray(batch.data, dtype=np.float64)
    mask = np.asarray(batch.mask, dtype=bool)
    if data.ndim != 3 or data.shape[2] != cfg.p:
        raise ValueError(f"batch feature dimension {data.shape[-1]} does not match model p={cfg.p}")
    if not mask.any(axis=1).all():
        raise ValueError("every bag needs at least one unmasked instance")
    if mode == "train" and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")

    # trailing all-padding columns cannot influence anything; dropping them
    # makes logits independent of how much padding the caller added
    width = mask.shape[1]
    L = int(mask.any(axis=0).nonzero()[0].max()) + 1
    X = np.where(mask[:, :L, None], data[:, :L], 0.0)
    M = mask[:, :L]

    P = model.params
    H = X
    blocks = []
    for l in range(cfg.n_blocks):
        H_in = H
        H, (pre, drop) = residual_block(
            H_in, M, P[f"W{l}"], P[f"b{l}"], cfg.use_skip, cfg.dropout_rate, mode, rng
        )
        blocks.append((H_in, pre, drop))
    Z = H

    scores, U = attention_scores(Z, M, P["V"], P["w"])
    kernel, _ = KERNELS["sparsemax" if cfg.use_sparse else "softmax"]
    alpha = kernel(scores, M)
    pooled = attention_pool(Z, alpha)
    normed, (xhat, inv_std), new_mean, new_var = batch_norm(
        pooled, P["gamma"], P["beta"], model.running_mean, model.running_var, mode
    )
    logits = normed @ P["c"] + P["c0"]
    if mode == "train" and update_stats:
        model.running_mean = new_mean
        model.running_var = new_var

    attention = np.zeros((data.shape[0], width))
    attention[:, :L] = alpha
    cache = dict(M=M, blocks=blocks, Z=Z, U=U, alpha=alpha, xhat=xhat, inv_std=inv_std, normed=normed)
    return ForwardTrace(logits, attention, pooled, normed, mode, model.version, cache)


def backward(model, trace, loss_grad):
    """Gradients of a loss with respect to every parameter, given the loss
    gradient with respect to ``trace.logits``."""
    if trace.model_version != model.version:
        raise ValueError("stale trace: the model changed since this forward pass")
    cfg = model.config
    P = model.params
    c = trace.cache
    g = np.asarray(loss_grad, dtype=np.float64)
    grads = {}

    grads["c"] = c["normed"].T @ g
    grads["c0"] = np.asarray(g.sum())
    d_normed = g[:, None] * P["c"]
    xhat, inv_std = c["xhat"], c["inv_std"]
    grads["gamma"] = (d_normed * xhat).sum(axis=0)
    grads["beta"] = d_normed.sum(axis=0)
    d_xhat = d_normed * P["gamma"]
    if trace.mode == "train":
        n = d_xhat.shape[0]
        d_pooled = (inv_std / n) * (
            n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0)
        )
    else:
        d_pooled = d_xhat * inv_std

    Z, U, alpha, M = c["Z"], c["U"], c["alpha"], c["M"]
    d_alpha = (Z @ d_pooled[:, :, None])[..., 0]
    dZ = alpha[..., None] * d_pooled[:, None, :]
    _, kernel_back = KERNELS["sparsemax" if cfg.use_sparse else "softmax"]
    d_scores = kernel_back(alpha, d_alpha, M)

    dU = d_scores[..., None] * P["w"]
    p, h = Z.shape[-1], U.shape[-1]
    grads["w"] = d_scores.reshape(-1) @ U.reshape(-1, h)
    d_pre_attn = dU * (1.0 - U * U)
    grads["V"] = d_pre_attn.reshape(-1, h).T @ Z.reshape(-1, p)
    dZ = dZ + d_pre_attn @ P["V"]

    dH = dZ
    for l in reversed(range(cfg.n_blocks)):
        H_in, pre, drop = c["blocks"][l]
        d_act = dH if drop is None else dH * drop
        d_pre = np.where((pre > 0) & M[..., None], d_act, 0.0)
        grads[f"W{l}"] = d_pre.reshape(-1, p).T @ H_in.reshape(-1, p)
        grads[f"b{l}"] = d_pre.sum(axis=(0, 1))
        d_in = d_pre @ P[f"W{l}"]
        dH = d_in + dH if cfg.use_skip else d_in
    return grads


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, path):
    """Write a single ``.npz`` checkpoint with a version tag and the config."""
    meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    arrays = {k: np.array(v, dtype="<f8", order="C") for k, v in model.state_arrays().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path}: not a model checkpoint (missing metadata)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
        cfg = ModelConfig(**meta["config"])
        shapes = param_shapes(cfg)
        shapes["running_mean"] = (cfg.p,)
        shapes["running_var"] = (cfg.p,)
        arrays = {}
        for name, shape in shapes.items():
            if name not in data:
                raise ValueError(f"{path}: missing tensor {name!r}")
            arr = np.array(data[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {shape}")
            arrays[name] = arr
    if (arrays["running_var"] < 0).any():
        raise ValueError(f"{path}: negative running variance")
    rm = arrays.pop("running_mean")
    rv = arrays.pop("running_var")
    return Model(cfg, arrays, rm, rv)
