"""
Sparse hidden Markov model machinery and log-domain Viterbi decoding.

Transitions are stored per destination state: ``pointers[s]`` lists the
predecessors of state ``s`` (ascending state index, padded with -1) and
``log_probs[s]`` the matching log transition probabilities. Observation
log-likelihoods may be given per state, or per observation class together
with a state-to-class map, which keeps large state spaces cheap.

"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


class ImpossibleObservationError(ValueError):
    """No state sequence has non-zero probability."""


@dataclass(frozen=True, eq=False)
class TransitionModel:
    pointers: np.ndarray    # (n_states, max_preds) int64, -1 padded
    log_probs: np.ndarray   # (n_states, max_preds) float64, -inf padded

    @property
    def num_states(self):
        return self.pointers.shape[0]

    @classmethod
    def from_triplets(cls, num_states, src, dst, prob):
        """Build from ``(src, dst, prob)`` arrays of non-zero transitions."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        prob = np.asarray(prob, dtype=float)
        keep = prob > 0
        src, dst, prob = src[keep], dst[keep], prob[keep]
        order = np.lexsort((src, dst))
        src, dst, prob = src[order], dst[order], prob[order]
        counts = np.bincount(dst, minlength=num_states)
        width = max(int(counts.max()) if len(counts) else 0, 1)
        pointers = np.full((num_states, width), -1, dtype=np.int64)
        log_probs = np.full((num_states, width), -np.inf)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(dst)) - starts[dst]
        pointers[dst, slot] = src
        with np.errstate(divide='ignore'):
            log_probs[dst, slot] = np.log(prob)
        return cls(pointers, log_probs)

    @classmethod
    def from_dense(cls, matrix):
        """``matrix[i, j]`` is the probability of moving from i to j."""
        matrix = np.asarray(matrix, dtype=float)
        src, dst = np.nonzero(matrix)
        return cls.from_triplets(matrix.shape[0], src, dst, matrix[src, dst])

    def outgoing_sums(self):
        """Total outgoing probability of every state (should be 1)."""
        sums = np.zeros(self.num_states)
        valid = self.pointers >= 0
        np.add.at(sums, self.pointers[valid], np.exp(self.log_probs[valid]))
        return sums

    def to_dense(self):
        dense = np.zeros((self.num_states, self.num_states))
        for dst in range(self.num_states):
            for src, lp in zip(self.pointers[dst], self.log_probs[dst]):
                if src >= 0:
                    dense[src, dst] += np.exp(lp)
        return dense


@numba.njit(cache=True)
def _viterbi_kernel(pointers, log_probs, log_init, obs, obs_map):
    num_frames = obs.shape[0]
    num_states, width = pointers.shape
    backptr = np.empty((num_frames, num_states), dtype=np.uint8)
    current = np.empty(num_states)
    previous = np.empty(num_states)
    neg_inf = -np.inf
    best = neg_inf
    for s in range(num_states):
        previous[s] = log_init[s] + obs[0, obs_map[s]]
        if previous[s] > best:
            best = previous[s]
    if best == neg_inf:
        return np.zeros(0, dtype=np.int64), neg_inf, 0
    for t in range(1, num_frames):
        best = neg_inf
        for s in range(num_states):
            arg = 0
            val = neg_inf
            for k in range(width):
                p = pointers[s, k]
                if p < 0:
                    break
                cand = previous[p] + log_probs[s, k]
                # strict comparison keeps the lowest-index predecessor on ties
                if cand > val:
                    val = cand
                    arg = k
            current[s] = val + obs[t, obs_map[s]]
            backptr[t, s] = arg
            if current[s] > best:
                best = current[s]
        if best == neg_inf:
            return np.zeros(0, dtype=np.int64), neg_inf, t
        for s in range(num_states):
            previous[s] = current[s]
    state = 0
    best = neg_inf
    for s in range(num_states):
        if previous[s] > best:
            best = previous[s]
            state = s
    path = np.empty(num_frames, dtype=np.int64)
    path[num_frames - 1] = state
    for t in range(num_frames - 1, 0, -1):
        state = pointers[state, backptr[t, state]]
        path[t - 1] = state
    return path, best, -1


def viterbi(transitions, obs_loglik, log_init=None, obs_map=None):
    """
    Most probable state sequence.

    Parameters
    ----------
    transitions : TransitionModel
        Transition structure.
    obs_loglik : numpy array, shape (frames, n_states) or (frames, n_classes)
        Observation log-likelihoods; per class if ``obs_map`` is given.
    log_init : numpy array, optional
        Log initial distribution, uniform by default.
    obs_map : numpy array, optional
        Observation class of every state.

    Returns
    -------
    path : numpy array
        State index per frame.
    log_prob : float
        Log probability of the path.

    Notes
    -----
    Ties are broken towards the lower state index, both for the final state
    and for every predecessor along the back-trace.

    """
    num_states = transitions.num_states
    obs = np.ascontiguousarray(obs_loglik, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ValueError('need at least one frame of observations')
    if obs_map is None:
        if obs.shape[1] != num_states:
            raise ValueError('observation columns do not match state count')
        obs_map = np.arange(num_states)
    obs_map = np.ascontiguousarray(obs_map, dtype=np.int64)
    if log_init is None:
        log_init = np.full(num_states, -np.log(num_states))
    log_init = np.ascontiguousarray(log_init, dtype=float)
    if transitions.pointers.shape[1] > 255:
        raise ValueError('at most 255 predecessors per state supported')
    path, log_prob, failed = _viterbi_kernel(
        transitions.pointers, transitions.log_probs, log_init, obs, obs_map)
    if failed >= 0:
        raise ImpossibleObservationError(
            f'impossible observation at frame {failed}')
    return path, float(log_prob)

