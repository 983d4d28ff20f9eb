"""Reverse-mode gradients for the RepVGG model, cross-entropy, Adam and a
finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ModeError, ValidationError
from .model import TRAIN, FusedConvParams, RepVggModel, check_input
from .tensor import conv2d, conv_output_size, dense, global_avg_pool, mac_counter, relu, softmax


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.001
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")


# ---------------------------------------------------------------- layer backward

def conv2d_backward(dout, x, weight, stride=1, padding=0, need_dx=True):
    """Gradients of a cross-correlation w.r.t. input, kernel and bias.

    Mirrors the tap loop of :func:`repxray.tensor.conv2d`.
    """
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    if (ho, wo) != (conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)):
        raise DimensionError("upstream gradient has the wrong spatial size", axis="HW")
    xc = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dy = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(cout, -1)
    dw = np.zeros_like(weight, dtype=x.dtype)
    dxc = np.zeros_like(xc) if need_dx else None
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            patch = xc[:, :, rows, cols].reshape(cin, -1)
            dw[:, :, i, j] = dy @ patch.T
            if need_dx:
                dxc[:, :, rows, cols] += (weight[:, :, i, j].T.astype(x.dtype, copy=False) @ dy).reshape(
                    cin, n, ho, wo)
    mac_counter.add((2 if need_dx else 1) * n * cout * ho * wo * cin * kh * kw)
    db = dy.sum(axis=1)
    dx = None
    if need_dx:
        if padding:
            dxc = dxc[:, :, padding:-padding, padding:-padding]
        dx = np.ascontiguousarray(dxc.transpose(1, 0, 2, 3))
    return dx, dw, db


def relu_backward(dy, pre):
    # gradient at exactly 0 is 0
    return dy * (pre > 0)


def dense_backward(dy, x, weight):
    return dy @ weight.astype(dy.dtype, copy=False), dy.T @ x, dy.sum(axis=0)


def gap_backward(dy, shape):
    n, c, h, w = shape
    return np.broadcast_to((dy / (h * w)).reshape(n, c, 1, 1), shape).astype(dy.dtype)


def bn_forward(x, bn, batch_stats):
    """Batch-norm forward returning ``(y, cache)``.

    With ``batch_stats`` the mini-batch mean and biased variance are used;
    otherwise the running statistics (inference behaviour).
    """
    dt = x.dtype
    if batch_stats:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean = bn.running_mean.astype(dt)
        var = bn.running_var.astype(dt)
    std = np.sqrt(var + dt.type(bn.eps))
    xhat = (x - mean[None, :, None, None]) / std[None, :, None, None]
    y = bn.gamma.astype(dt)[None, :, None, None] * xhat + bn.beta.astype(dt)[None, :, None, None]
    return y, (xhat, std, mean, var, batch_stats, bn)


def bn_backward(dy, cache):
    xhat, std, _, _, batch_stats, bn = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * bn.gamma.astype(dy.dtype)[None, :, None, None]
    if not batch_stats:
        return dxhat / std[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (m * dxhat - s1 - xhat * s2) / (m * std[None, :, None, None])
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- block / model

def block_forward_cached(x, block, batch_stats=False):
    if isinstance(block, FusedConvParams):
        pre = conv2d(x, block.weight, block.bias, stride=block.stride, padding=1)
        return relu(pre), {"x": x, "pre": pre, "block": block}
    z3 = conv2d(x, block.conv3x3_w, stride=block.stride, padding=1)
    y3, c3 = bn_forward(z3, block.bn3, batch_stats)
    z1 = conv2d(x, block.conv1x1_w, stride=block.stride, padding=0)
    y1, c1 = bn_forward(z1, block.bn1, batch_stats)
    pre = y3 + y1
    cid = None
    if block.bn_id is not None:
        yid, cid = bn_forward(x, block.bn_id, batch_stats)
        pre = pre + yid
    return relu(pre), {"x": x, "pre": pre, "block": block, "bn3": c3, "bn1": c1, "bn_id": cid}


def block_backward(dy, cache, need_dx=True):
    """Returns ``(dx, grads)`` where grads is keyed by the block-local tensor names."""
    block, x = cache["block"], cache["x"]
    dpre = relu_backward(dy, cache["pre"])
    if isinstance(block, FusedConvParams):
        dx, dw, db = conv2d_backward(dpre, x, block.weight, block.stride, 1, need_dx)
        return dx, {"weight": dw, "bias": db}
    grads = {}
    dz3, grads["bn3.gamma"], grads["bn3.beta"] = bn_backward(dpre, cache["bn3"])
    dx, grads["conv3x3_w"], _ = conv2d_backward(dz3, x, block.conv3x3_w, block.stride, 1, need_dx)
    dz1, grads["bn1.gamma"], grads["bn1.beta"] = bn_backward(dpre, cache["bn1"])
    dx1, grads["conv1x1_w"], _ = conv2d_backward(dz1, x, block.conv1x1_w, block.stride, 0, need_dx)
    if need_dx:
        dx = dx + dx1
    if cache["bn_id"] is not None:
        dxid, grads["bn_id.gamma"], grads["bn_id.beta"] = bn_backward(dpre, cache["bn_id"])
        if need_dx:
            dx = dx + dxid
    return dx, grads


def forward_cached(model, x, batch_stats=False, start=0):
    """Forward from block ``start`` (``x`` is that block's input) keeping caches."""
    caches = []
    for block in model.blocks[start:]:
        x, cache = block_forward_cached(x, block, batch_stats)
        caches.append(cache)
    pooled = global_avg_pool(x).reshape(x.shape[0], -1)
    logits = dense(pooled, model.head_w, model.head_b)
    return logits, {"blocks": caches, "feat_shape": x.shape, "pooled": pooled, "start": start}


def backward_cached(model, dlogits, caches, stop=None, param_grads=True):
    """Backpropagate ``dlogits``.

    Returns ``(grads, dact)`` where ``dact`` is the gradient w.r.t. the output
    of block ``stop`` (or None when ``stop`` is None).
    """
    grads = {}
    dpooled, dw, db = dense_backward(dlogits, caches["pooled"], model.head_w)
    if param_grads:
        grads["head.w"], grads["head.b"] = dw, db
    d = gap_backward(dpooled, caches["feat_shape"])
    start = caches["start"]
    last = len(model.blocks) - 1
    dact = d if stop == last else None
    if param_grads:
        lowest = start
    else:
        lowest = last + 1 if stop is None else stop + 1
    for i in range(last, lowest - 1, -1):
        need_dx = i > lowest or (stop is not None and i == stop + 1)
        d, local = block_backward(d, caches["blocks"][i - start], need_dx=need_dx)
        if param_grads:
            grads.update({f"blocks.{i}.{k}": v for k, v in local.items()})
        if stop is not None and i == stop + 1:
            dact = d
    return grads, dact


def update_running_stats(model, caches, momentum=0.1):
    for block, cache in zip(model.blocks, caches["blocks"]):
        for name in ("bn3", "bn1", "bn_id"):
            c = cache.get(name)
            if c is None:
                continue
            xhat, _, mean, var, _, bn = c
            m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            bn.running_mean[...] = (1 - momentum) * bn.running_mean + momentum * mean
            bn.running_var[...] = (1 - momentum) * bn.running_var + momentum * unbiased


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}", axis="N")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), labels].mean()
    d = softmax(logits)
    d[np.arange(n), labels] -= 1
    return max(float(loss), 0.0), d / n


def model_backward(model: RepVggModel, x, labels, batch_stats=True, momentum=None):
    """Loss and gradients for every trainable parameter of a train-mode model.

    ``batch_stats`` selects mini-batch batch-norm statistics (training
    behaviour). When ``momentum`` is given the running statistics are updated
    in place from the batch.
    """
    if model.mode != TRAIN:
        raise ModeError("deploy-mode (fused) models are inference-only")
    check_input(model, x)
    if len(labels) != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} samples but {len(labels)} labels", axis="N")
    logits, caches = forward_cached(model, x, batch_stats)
    loss, dlogits = cross_entropy_loss(logits, labels)
    grads, _ = backward_cached(model, dlogits, caches)
    if momentum is not None and batch_stats:
        update_running_stats(model, caches, momentum)
    return loss, grads


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; ``params`` arrays are modified in place."""
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ValidationError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    missing = set(params) - set(grads)
    if missing:
        raise ValidationError(f"no gradient for {sorted(missing)}")
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------- gradient check

def grad_check(function, params, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``function(params)`` must return ``(value, grads)`` with ``grads`` keyed
    like ``params``. Parameter arrays are perturbed in place and restored.
    """
    _, analytic = function(params)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        ga = np.asarray(analytic[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = function(params)[0]
            flat[i] = orig - epsilon
            f_minus = function(params)[0]
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * epsilon)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, float(err))
    return worst
