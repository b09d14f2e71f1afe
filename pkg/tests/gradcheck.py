"""Central-difference gradient oracles shared by the unit and acceptance tests."""

import numpy as np

from cnnevo.nn import (
    AVERAGE, MAX, SAME, VALID, BatchNorm2D, Conv2D, Dense, Pool2D, batchnorm_backward, batchnorm_forward,
    conv_backward, conv_forward, cross_entropy, fc_backward, fc_forward, pool_backward, pool_forward, softmax,
    softmax_cross_entropy_grad,
)

H = 1e-4


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Largest elementwise error relative to the tensor's gradient scale."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_conv(rng):
    c, f, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
    stride, padding = int(rng.integers(1, 3)), [VALID, SAME][rng.integers(2)]
    h = int(rng.integers(k, k + 4))
    w = int(rng.integers(k, k + 4))
    layer = Conv2D(c, f, k, stride, padding, rng=rng, dtype=np.float64)
    layer.bias = rng.normal(size=f)
    x = rng.normal(size=(int(rng.integers(1, 3)), c, h, w))
    r = rng.normal(size=conv_forward(x, layer).shape)
    gx, gw, gb = conv_backward(r, x, layer)
    loss = lambda: float(np.sum(conv_forward(x, layer) * r))
    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gw, numeric_grad(loss, layer.weight)),
               rel_error(gb, numeric_grad(loss, layer.bias)))


def check_fc(rng):
    n_in, n_out = int(rng.integers(1, 25)), int(rng.integers(1, 15))
    layer = Dense(n_in, n_out, rng=rng, dtype=np.float64)
    layer.bias = rng.normal(size=n_out)
    x = rng.normal(size=(int(rng.integers(1, 4)), n_in))
    r = rng.normal(size=(len(x), n_out))
    gx, gw, gb = fc_backward(r, x, layer)
    loss = lambda: float(np.sum(fc_forward(x, layer) * r))
    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gw, numeric_grad(loss, layer.weight)),
               rel_error(gb, numeric_grad(loss, layer.bias)))


def check_batchnorm(rng):
    c = int(rng.integers(1, 5))
    shape = (int(rng.integers(2, 6)), c, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    state = BatchNorm2D(c, gamma=rng.normal(size=c), beta=rng.normal(size=c), dtype=np.float64)
    x = rng.normal(size=shape)
    r = rng.normal(size=shape)
    _, cache = batchnorm_forward(x, state, training=True)
    gx, gg, gb = batchnorm_backward(r, cache, state)

    def loss():
        mean, var = state.running_mean.copy(), state.running_var.copy()
        out, _ = batchnorm_forward(x, state, training=True)
        state.running_mean, state.running_var = mean, var
        return float(np.sum(out * r))

    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gg, numeric_grad(loss, state.gamma)),
               rel_error(gb, numeric_grad(loss, state.beta)))


def check_pool(rng):
    p = int(rng.integers(1, 4))
    s = int(rng.integers(1, 4))
    kind = [MAX, AVERAGE][rng.integers(2)]
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(p, p + 5)), int(rng.integers(p, p + 5)))
    # distinct values spaced far beyond the step keep every max unambiguous
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.01
    layer = Pool2D(p, s, kind)
    out, arg = pool_forward(x, layer, return_argmax=True)
    r = rng.normal(size=out.shape)
    gx = pool_backward(r, x.shape, layer, argmax=arg)
    loss = lambda: float(np.sum(pool_forward(x, layer) * r))
    return rel_error(gx, numeric_grad(loss, x))


def check_softmax_ce(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 11))
    z = rng.normal(scale=3, size=(n, c))
    y = rng.integers(0, c, n)
    g = softmax_cross_entropy_grad(softmax(z), y)
    return rel_error(g, numeric_grad(lambda: cross_entropy(softmax(z), y), z))


CHECKS = {"conv": check_conv, "fc": check_fc, "batchnorm": check_batchnorm, "pool": check_pool,
          "softmax_ce": check_softmax_ce}
