"""Random small differentiable nets for gradient checking.

Each builder returns (leaves, f) where f re-runs the whole forward pass from
the leaves' current data, so the same callable serves both reverse-mode and
finite-difference evaluation. Nets are rejection-sampled so no relu/log/sqrt
input sits within 1e-3 of its kink; central differences with h=1e-4 are
meaningless there and the check is about reverse-mode correctness, not kink
luck.
"""

import numpy as np

from smta.autodiff import Tensor, channel_broadcast, conv2d, linear, softmax_channel

KINK_MARGIN = 1e-3


def rel_err(a, b):
    """Relative error with the |a|+|b| denominator used throughout the suite."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))


def _uniform(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _margins_ok(preacts):
    return all(np.abs(t.data).min() > KINK_MARGIN for t in preacts)


def _linear_net(rng):
    n, d_in, d_h, d_out = 3, int(rng.integers(3, 7)), int(rng.integers(4, 9)), 3
    x = _uniform(rng, (n, d_in))
    w1, b1 = _uniform(rng, (d_in, d_h)), _uniform(rng, (d_h,), -0.5, 0.5)
    w2, b2 = _uniform(rng, (d_h, d_out)), _uniform(rng, (d_out,), -0.5, 0.5)
    leaves = [x, w1, b1, w2, b2]
    preacts = []

    def f(_=None):
        h = linear(x, w1, b1)
        preacts.append(h)
        y = linear(h.relu(), w2, b2)
        return (y * y).mean()

    return leaves, f, preacts


def _conv_net(rng):
    c, h, w, mid, out_c = 2, 5, 5, int(rng.integers(2, 4)), 3
    x = _uniform(rng, (c, h, w))
    k1, b1 = _uniform(rng, (mid, c, 3, 3), -0.6, 0.6), _uniform(rng, (mid,), -0.4, 0.4)
    k2, b2 = _uniform(rng, (out_c, mid, 3, 3), -0.6, 0.6), _uniform(rng, (out_c,), -0.4, 0.4)
    onehot = np.zeros((out_c, h, w))
    onehot[rng.integers(0, out_c, size=(h, w)), np.arange(h)[:, None], np.arange(w)[None, :]] = 1.0
    target = Tensor(onehot)
    leaves = [x, k1, b1, k2, b2]
    preacts = []

    def f(_=None):
        a = conv2d(x, k1, b1)
        preacts.append(a)
        logits = conv2d(a.relu(), k2, b2)
        logp = softmax_channel(logits).log()
        return (logp * target).sum(axis=0).mean() * -1.0

    return leaves, f, preacts


def _mixed_net(rng):
    c, h, w = 3, 4, 4
    x = _uniform(rng, (c, h, w), 0.2, 1.0)
    k, b = _uniform(rng, (c, c, 3, 3), -0.5, 0.5), _uniform(rng, (c,), 0.1, 0.6)
    tgt = rng.normal(size=(c, h, w))
    tgt /= np.linalg.norm(tgt, axis=0, keepdims=True)
    target = Tensor(tgt)
    leaves = [x, k, b]
    preacts = []

    def f(_=None):
        v = conv2d(x, k, b)
        # 0.05 floor keeps sqrt/log/div far enough from their kinks for h=1e-4
        sumsq = (v * v).sum(axis=0) + 0.05
        preacts.append(sumsq)
        unit = v / channel_broadcast(sumsq.sqrt(), c)
        dot = (unit * target).sum(axis=0)
        angular = (1.0 - dot).mean()
        smooth = ((v * 0.3).exp().mean() + sumsq.log().mean()) * 0.1
        return angular + smooth

    return leaves, f, preacts


_BUILDERS = [_linear_net, _conv_net, _mixed_net]


def random_net(seed):
    """Deterministic small net for the given seed, resampled clear of kinks."""
    for attempt in range(40):
        rng = np.random.default_rng((seed, attempt))
        leaves, f, preacts = _BUILDERS[seed % len(_BUILDERS)](rng)
        preacts.clear()
        f()
        if _margins_ok(preacts):
            preacts.clear()
            return leaves, f
    raise RuntimeError(f"could not sample a kink-free net for seed {seed}")
