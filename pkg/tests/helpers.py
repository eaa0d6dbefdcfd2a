"""Independent oracles shared by the test modules."""
from __future__ import annotations

import numpy as np

from mcpm import autodiff as ad


def rel_err(a, b, floor):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def evaluate(build, params):
    tape = ad.Tape()
    nodes = {k: tape.leaf(v) for k, v in params.items()}
    return float(build(tape, nodes).value)


def fd_gradient(build, params, eps=1e-5, replay=True):
    """Central differences of ``build`` in every coordinate of ``params``.

    With ``replay`` the relu/maxpool/clamp decisions of the base point are
    reused, so the stencil measures the branch that reverse mode
    differentiates even when it straddles a kink.
    """
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    with ad.record_decisions() as log:
        evaluate(build, params)
    out = {}
    for key, value in params.items():
        g = np.empty_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            hi = value[idx]
            fp = _eval_replay(build, params, log, replay)
            value[idx] = orig - eps
            lo = value[idx]
            fm = _eval_replay(build, params, log, replay)
            value[idx] = orig
            g[idx] = (fp - fm) / (hi - lo)
        out[key] = g
    return out


def _eval_replay(build, params, log, replay):
    if not replay:
        return evaluate(build, params)
    with ad.replay_decisions(log):
        return evaluate(build, params)


def reverse_gradient(build, params):
    tape = ad.Tape()
    nodes = {k: tape.leaf(v) for k, v in params.items()}
    out = build(tape, nodes)
    g = ad.backward(tape, out)
    return {k: g[n.id] for k, n in nodes.items()}, float(out.value)


def forward_derivative(build, params, direction):
    tape = ad.Tape()
    nodes = {k: tape.leaf(v) for k, v in params.items()}
    out = build(tape, nodes)
    t = ad.jvp(tape, {nodes[k].id: direction[k] for k in direction})
    return float(t[out.id])


def conv_loop(x, k, b, padding):
    """Direct six-fold loop cross-correlation for a single ``[c,h,w]`` input."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i + u, j + v] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def random_graph(rng: np.random.Generator, max_params: int = 2000):
    """A random small conv net ending in a scalar.

    Returns ``(build, params)`` where ``build(tape, nodes)`` rebuilds the
    graph from leaf nodes and ``params`` holds the leaf values (input image
    included).
    """
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 3))
    size = int(rng.choice([4, 8]))
    params = {"x": rng.normal(size=(n, c, size, size))}
    plan = []
    channels, spatial, budget = c, size, max_params
    for li in range(int(rng.integers(2, 5))):
        k = int(rng.choice([1, 3, 5]))
        cout = int(rng.integers(1, 5))
        cost = cout * channels * k * k + cout
        if cost > budget:
            break
        budget -= cost
        params[f"k{li}"] = rng.normal(scale=1.0 / np.sqrt(channels * k * k),
                                      size=(cout, channels, k, k))
        params[f"b{li}"] = rng.normal(scale=0.1, size=(cout,))
        act = str(rng.choice(["relu", "sigmoid", "none"]))
        resample = "none"
        if spatial >= 4 and rng.random() < 0.3:
            resample = "pool"
            spatial //= 2
        elif spatial <= 4 and rng.random() < 0.3:
            resample = "up"
            spatial *= 2
        skip = rng.random() < 0.3
        plan.append((li, k, act, resample, skip))
        channels = cout + (cout if skip else 0)
    weights = rng.normal(size=(n, channels, spatial, spatial))
    head = str(rng.choice(["weighted_sum", "bce"]))
    target = (rng.random((n, channels, spatial, spatial)) > 0.5).astype(float)

    def build(tape, p):
        x = p["x"]
        for li, k, act, resample, skip in plan:
            y = ad.conv2d(x, p[f"k{li}"], p[f"b{li}"], k // 2)
            if act == "relu":
                y = ad.relu(y)
            elif act == "sigmoid":
                y = ad.sigmoid(y)
            if resample == "pool":
                y = ad.maxpool2(y)
            elif resample == "up":
                y = ad.upsample2(y)
            x = ad.concat([y, y * y]) if skip else y
        if head == "weighted_sum":
            return ad.sum(tape.const(weights) * x)
        q = ad.clamp(ad.sigmoid(x), 1e-7, 1 - 1e-7)
        ll = tape.const(target) * ad.log(q) + tape.const(1 - target) * ad.log(1 - q)
        return -ad.mean(ll)

    return build, params
