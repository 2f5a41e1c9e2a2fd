"""Central finite-difference checks shared by the unit and acceptance tests."""

import numpy as np

from ltw import selector as sel
from ltw import trainer as tr
from ltw.partition import HashScheme
from ltw.token_model import SamplerConfig

FD_STEP = 1e-5
KINK_MARGIN = 1e-3


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def central_diff(f, theta, h=FD_STEP):
    """Gradient of every output of ``f`` (a tuple of floats) w.r.t. the vector ``theta``."""
    cols = []
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        cols.append((np.asarray(f(up)) - np.asarray(f(dn))) / (2 * h))
    return np.array(cols).T


def random_selector_config(seed):
    """Random dims, params and inputs with every pre-activation well away from a kink."""
    rng = np.random.default_rng(seed)
    while True:
        dims = tuple(int(x) for x in (rng.integers(2, 17), rng.integers(2, 9),
                                      rng.integers(1, 6), rng.integers(1, 6)))
        p = sel.init(*dims, seed=int(rng.integers(1 << 30)))
        p = sel.SelectorParams.from_flat(p.flat() + rng.normal(0, 0.1, p.size), dims)
        x = rng.normal(size=dims[0])
        e, r = float(rng.uniform(0, 5)), float(rng.uniform(0, 1))
        _, cache = sel.forward(p, x, e, r)
        if np.abs(cache.pre_activations()).min() > KINK_MARGIN:
            return p, x, e, r


def selector_param_error(seed):
    p, x, e, r = random_selector_config(seed)
    _, cache = sel.forward(p, x, e, r)
    grads = sel.backward(p, cache, 1.0)[0]
    fd = central_diff(
        lambda v: (sel.forward(sel.SelectorParams.from_flat(v, p.dims), x, e, r)[0],), p.flat())
    return rel_err(grads.flat(), fd[0])


def three_step_rollout(model, params, delta, gamma, seed0=0):
    """A soft rollout of exactly three steps from the prompt ``a``."""
    a = model.encode(["a"])
    for seed in range(seed0, seed0 + 200):
        ro = tr.soft_rollout(model, params, HashScheme(), gamma, delta, SamplerConfig(), a, 3,
                             np.random.default_rng(seed))
        if len(ro.m) == 3:
            return ro
    raise AssertionError("no three-step rollout found")


def end_to_end_config(model, seed, gamma=0.4):
    rng = np.random.default_rng(seed)
    while True:
        dims = (8, int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        p = sel.init(*dims, seed=int(rng.integers(1 << 30)))
        p = sel.SelectorParams.from_flat(p.flat() + rng.normal(0, 0.2, p.size), dims)
        delta = float(rng.uniform(0.5, 4.0))
        ro = three_step_rollout(model, p, delta, gamma, int(rng.integers(1 << 20)))
        if np.abs(ro.values.cache.pre_activations()).min() < KINK_MARGIN:
            continue
        weights = tr.LossWeights(*rng.uniform(0.1, 2.0, 5), lambda_e=float(rng.uniform(0.5, 3)),
                                 mu_e=float(rng.uniform(0.5, 1.5)))
        kind = "linear" if rng.random() < 0.5 else "sigmoid"
        return p, ro, weights, kind


def end_to_end_errors(model, seed):
    """Relative errors of the analytic d(L_Q)/dθ and d(L_D)/dθ on one random configuration."""
    p, ro, weights, kind = end_to_end_config(model, seed)
    _, _, gQ, gD, _ = tr.loss_and_grads(p, [ro], weights, kind)

    def losses(vec):
        q = sel.SelectorParams.from_flat(vec, p.dims)
        vals = tr.evaluate(q, ro.inputs, ro.delta)
        return tr.compose_losses(tr.TrainRollout(ro.inputs, vals, ro.delta, ro.gamma),
                                 weights, kind)[:2]

    fd_q, fd_d = central_diff(losses, p.flat())
    return rel_err(gQ, fd_q), rel_err(gD, fd_d)
