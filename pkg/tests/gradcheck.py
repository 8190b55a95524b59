"""Central finite differences for the engine's forward/backward pairs.

Error metric: max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|),
over the checked coordinates of every input of one trial.
"""

import numpy as np

from mnlab import arch
from mnlab.engine import TRAIN, backward, forward, init_state, ops
from mnlab.transform import mn_transform

STEP = 1e-5
TOL = 1e-4
TRIALS = 100
MAX_COORDS = 24


def numeric_grad(f, x, coords, h=STEP):
    out = np.empty(len(coords))
    flat = x.reshape(-1)
    for j, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check(f, inputs, grads, rng):
    """``f()`` evaluates the scalar loss reading ``inputs`` in place; ``grads`` are analytic."""
    worst = 0.0
    for x, g in zip(inputs, grads):
        n = x.size
        coords = rng.choice(n, size=min(n, MAX_COORDS), replace=False)
        num = numeric_grad(f, x, coords)
        ana = g.reshape(-1)[coords]
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst


def away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# -- one trial per op; each returns the error metric ----------------------------------------


def trial_conv(rng, depthwise=False):
    N, H, W = 2, int(rng.integers(3, 6)), int(rng.integers(3, 6))
    K = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    if depthwise:
        C = int(rng.integers(1, 4))
        g0, R, Cg, Og = C, 1, 1, 1
        Cx = C
    else:
        g0, R = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        Cg, Og = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        Cx = g0 * Cg
    groups = g0 * R
    x = rng.standard_normal((N, Cx, H, W))
    w = rng.standard_normal((groups * Og, Cg, K, K))
    b = rng.standard_normal(groups * Og)
    out, cache = ops.conv2d_forward(x, w, b, stride, groups, R)
    Rw = rng.standard_normal(out.shape)
    dx, dw, db = ops.conv2d_backward(Rw, cache)
    f = lambda: float((ops.conv2d_forward(x, w, b, stride, groups, R)[0] * Rw).sum())
    return check(f, [x, w, b], [dx, dw, db], rng)


def trial_dense(rng):
    G, Cg, Og, N = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), 3
    x = rng.standard_normal((N, G * Cg))
    w = rng.standard_normal((G * Og, Cg))
    b = rng.standard_normal(G * Og)
    out, cache = ops.dense_forward(x, w, b, G)
    Rw = rng.standard_normal(out.shape)
    dx, dw, db = ops.dense_backward(Rw, cache)
    f = lambda: float((ops.dense_forward(x, w, b, G)[0] * Rw).sum())
    return check(f, [x, w, b], [dx, dw, db], rng)


def trial_norm(rng, train=True):
    S = int(rng.integers(1, 4))
    C = S * int(rng.integers(1, 3))
    x = rng.standard_normal((3, C, 2, 3)) * 2 + 0.5
    gamma, beta = rng.standard_normal(C), rng.standard_normal(C)
    rm, rv = rng.standard_normal(S), rng.uniform(0.5, 2, S)

    def run():
        return ops.norm_forward(x, gamma, beta, rm.copy(), rv.copy(), S, train)

    out, cache = run()
    Rw = rng.standard_normal(out.shape)
    dx, dg, dbeta = ops.norm_backward(Rw, cache)
    f = lambda: float((run()[0] * Rw).sum())
    return check(f, [x, gamma, beta], [dx, dg, dbeta], rng)


def trial_relu(rng):
    x = away_from_zero(rng, (2, 3, 3, 3))
    out, mask = ops.relu_forward(x)
    Rw = rng.standard_normal(out.shape)
    dx = ops.relu_backward(Rw, mask)
    return check(lambda: float((ops.relu_forward(x)[0] * Rw).sum()), [x], [dx], rng)


def trial_maxpool(rng):
    k = int(rng.choice([2, 3]))
    shape = (2, 2, 2 * k, k)
    # distinct values 0.1 apart: no ties within the finite-difference step
    x = (rng.permutation(int(np.prod(shape))) * 0.1).reshape(shape).astype(np.float64)
    out, cache = ops.maxpool_forward(x, k)
    Rw = rng.standard_normal(out.shape)
    dx = ops.maxpool_backward(Rw, cache)
    return check(lambda: float((ops.maxpool_forward(x, k)[0] * Rw).sum()), [x], [dx], rng)


def trial_global_pool(rng):
    x = rng.standard_normal((2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    out, shape = ops.global_pool_forward(x)
    Rw = rng.standard_normal(out.shape)
    dx = ops.global_pool_backward(Rw, shape)
    return check(lambda: float((ops.global_pool_forward(x)[0] * Rw).sum()), [x], [dx], rng)


def trial_aggregate(rng, mode):
    M, C = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    x = rng.standard_normal((3, M * C))
    out, cache = ops.aggregate_forward(x, M, mode)
    Rw = rng.standard_normal(out.shape)
    dx = ops.aggregate_backward(Rw, cache)
    return check(lambda: float((ops.aggregate_forward(x, M, mode)[0] * Rw).sum()), [x], [dx], rng)


def trial_xent(rng):
    N, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    z = rng.standard_normal((N, C)) * 2
    y = rng.integers(0, C, N)
    _, dz = ops.softmax_xent(z, y)
    return check(lambda: ops.softmax_xent(z, y)[0], [z], [dz], rng)


_GRAPHS = {}


def _graph(r, agg):
    key = (r, agg)
    if key not in _GRAPHS:
        base = arch.build_resnet18(num_classes=3, base_width=2, blocks=(1, 1))
        _GRAPHS[key] = mn_transform(base, r)
    return _GRAPHS[key]


def trial_network(rng):
    """Whole graph (grouped convs, norms, residual adds, aggregate) in train mode."""
    r = int(rng.choice([1, 2]))
    agg = str(rng.choice(["logit", "prob"]))
    g = _graph(r, agg)
    state = init_state(g, seed=int(rng.integers(1 << 30)), dtype="float64")
    for _, _, p in state.named_params():
        p += 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((3, 3, 4, 4))
    y = rng.integers(0, 3, 3)

    def loss():
        s = state.copy()
        fr = forward(g, s, x, TRAIN, aggregation=agg)
        return ops.softmax_xent(fr.aggregated_logits, y)[0]

    fr = forward(g, state.copy(), x, TRAIN, retain=True, aggregation=agg)
    _, dl = ops.softmax_xent(fr.aggregated_logits, y)
    grads, dx = backward(fr, dl, return_input_grad=True)
    names = list(state.named_params())
    picks = [names[i] for i in rng.choice(len(names), size=min(4, len(names)), replace=False)]
    return check(loss, [x] + [p for _, _, p in picks], [dx] + [grads[l][n] for l, n, _ in picks], rng)


OPS = {
    "conv2d": trial_conv,
    "depthwise_conv2d": lambda rng: trial_conv(rng, depthwise=True),
    "dense": trial_dense,
    "norm_train": trial_norm,
    "norm_eval": lambda rng: trial_norm(rng, train=False),
    "relu": trial_relu,
    "maxpool": trial_maxpool,
    "global_pool": trial_global_pool,
    "aggregate_logit": lambda rng: trial_aggregate(rng, "logit"),
    "aggregate_prob": lambda rng: trial_aggregate(rng, "prob"),
    "softmax_xent": trial_xent,
    "network": trial_network,
}


def worst_error(name, trials=TRIALS, seed=0):
    rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
    return max(OPS[name](rng) for _ in range(trials))
