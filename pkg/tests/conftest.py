import numpy as np
import pytest

from repxray.model import RepVggBlockParams, has_identity, init_model
from repxray.tensor import BatchNormParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    """Scalar sliding-window cross-correlation; the reference oracle."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for b_ in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r, q = i * stride + di - padding, j * stride + dj - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    s += float(x[b_, ch, r, q]) * float(w[o, ch, di, dj])
                    out[b_, o, i, j] = s + (0.0 if b is None else float(b[o]))
    return out


def bn_naive(x, bn):
    out = np.empty(x.shape, dtype=np.float64)
    for c in range(x.shape[1]):
        std = np.sqrt(float(bn.running_var[c]) + bn.eps)
        out[:, c] = float(bn.gamma[c]) * (x[:, c] - float(bn.running_mean[c])) / std + float(bn.beta[c])
    return out


def block_naive(x, block):
    y = bn_naive(conv2d_naive(x, block.conv3x3_w, stride=block.stride, padding=1), block.bn3)
    y += bn_naive(conv2d_naive(x, block.conv1x1_w, stride=block.stride, padding=0), block.bn1)
    if block.bn_id is not None:
        y += bn_naive(x.astype(np.float64), block.bn_id)
    return np.maximum(y, 0)


def random_bn(rng, c, dtype=np.float64):
    return BatchNormParams(rng.uniform(0.5, 1.5, c).astype(dtype), rng.normal(0, 0.5, c).astype(dtype),
                           rng.normal(0, 0.5, c).astype(dtype), rng.uniform(0.5, 2.0, c).astype(dtype))


def random_block(rng, cin, cout, stride, dtype=np.float64):
    return RepVggBlockParams(rng.normal(0, 0.5, (cout, cin, 3, 3)).astype(dtype), random_bn(rng, cout, dtype),
                             rng.normal(0, 0.5, (cout, cin, 1, 1)).astype(dtype), random_bn(rng, cout, dtype),
                             random_bn(rng, cout, dtype) if has_identity(cin, cout, stride) else None, stride)


def randomize_bn(model, rng):
    """Give every batch-norm of a train-mode model non-trivial statistics."""
    for b in model.blocks:
        for bn in (b.bn3, b.bn1, b.bn_id):
            if bn is None:
                continue
            fresh = random_bn(rng, bn.channels, bn.gamma.dtype)
            for attr in ("gamma", "beta", "running_mean", "running_var"):
                getattr(bn, attr)[...] = getattr(fresh, attr)
    return model


def toy_model(seed=0, dtype=np.float64):
    """Two blocks; the second has an identity branch."""
    model = init_model(seed, channels=(3, 3), strides=(1, 1), input_shape=(2, 6, 6), dtype=dtype)
    return randomize_bn(model, np.random.default_rng(seed + 100))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert it."""
    def record(number, ok, detail):
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append((number, ok, detail))
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(ACCEPTANCE_KEY, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
