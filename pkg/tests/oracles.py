"""Independent reference implementations used only by the tests."""

import numpy as np


def brute_force_viterbi(log_trans, obs, log_init):
    """
    Best path by enumerating every state sequence.

    Path scores accumulate in the same order as a forward pass
    (``(score + transition) + observation``), so the optimum is float-equal
    to a correct dynamic programme. Among equal scores the lexicographically
    smallest path wins.
    """
    n_frames, n_states = obs.shape
    # scores[i0, ..., it] of every prefix, extended one frame at a time
    scores = log_init + obs[0]
    for t in range(1, n_frames):
        scores = (scores[..., None] + log_trans.reshape(
            (1,) * (t - 1) + (n_states, n_states))) + obs[t]
    flat = int(np.argmax(scores))
    best = scores.reshape(-1)[flat]
    if best == -np.inf:
        return best, None
    return best, tuple(int(i) for i in np.unravel_index(flat, scores.shape))


def central_difference(fn, params, eps=1e-5):
    """Numerical gradient of ``fn(params)`` for a dict of arrays."""
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value, dtype=float)
        flat = g.reshape(-1)
        for i in range(value.size):
            orig = value.reshape(-1)[i]
            value.reshape(-1)[i] = orig + eps
            up = fn(params)
            value.reshape(-1)[i] = orig - eps
            down = fn(params)
            value.reshape(-1)[i] = orig
            flat[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name], dtype=float).reshape(-1)
        n = np.asarray(numeric[name], dtype=float).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        # entries where both are ~0 carry no information
        err = np.where(np.maximum(np.abs(a), np.abs(n)) < floor, 0.0,
                       np.abs(a - n) / denom)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def gaussian_logpdf(x, mean, var):
    """Closed-form diagonal Gaussian log density."""
    x, mean, var = (np.asarray(a, dtype=float) for a in (x, mean, var))
    return float(np.sum(-0.5 * np.log(2 * np.pi * var)
                        - 0.5 * (x - mean) ** 2 / var))


def count_boundary_crossings(positions, n_positions, beats_per_bar):
    """Number of beat boundaries crossed along a position path."""
    seg = n_positions // beats_per_bar
    count = 0
    for a, b in zip(positions[:-1], positions[1:]):
        if a // seg != b // seg:
            count += 1
    return count
