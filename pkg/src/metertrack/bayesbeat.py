"""
Dynamic bar pointer model with GMM observations.

The hidden state is ``(position m, tempo index i)``: the position advances by
``tempi[i]`` bins per frame around a bar of ``n_positions`` bins, and the
tempo index moves to a neighbour with probability ``tempo_change_prob``. A
single rhythmic pattern is learned as one Gaussian mixture per grid bin over
the two-band spectral flux.

"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio import BAYES_BANDS, normalize_global
from .beats import BeatList
from .hmm import TransitionModel, viterbi


LOG_2PI = np.log(2.0 * np.pi)


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class BarGrid:
    """One-bar grid; 64 bins for 16 subdivisions of a 4/4 whole note."""

    bins_per_bar: int = 64
    beats_per_bar: int = 4

    def __post_init__(self):
        if self.bins_per_bar % self.beats_per_bar:
            raise ValueError('bins_per_bar must be divisible by beats_per_bar')


@dataclass(frozen=True, eq=False)
class GmmObservationModel:
    """
    One diagonal-covariance Gaussian mixture per grid bin.

    Arrays have shapes ``weights (G, K)``, ``means (G, K, D)`` and
    ``variances (G, K, D)``. Unused components carry zero weight.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def num_bins(self):
        return self.weights.shape[0]

    def loglik(self, features):
        """Log-density of ``features`` (frames x D) under every bin's GMM."""
        x = np.atleast_2d(features)[:, None, None, :]
        var = self.variances[None]
        comp = -0.5 * (np.sum((x - self.means[None]) ** 2 / var, axis=-1) +
                       np.sum(np.log(var), axis=-1) +
                       self.means.shape[-1] * LOG_2PI)
        with np.errstate(divide='ignore'):
            logw = np.log(self.weights)[None]
        tot = comp + logw
        peak = np.max(tot, axis=-1, keepdims=True)
        return (peak + np.log(np.sum(np.exp(tot - peak), axis=-1,
                                     keepdims=True)))[..., 0]


# Gaussian mixtures

def _kmeanspp(x, k, rng):
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None] - np.array(centres)[None]) ** 2).sum(-1),
                    axis=1)
        total = d2.sum()
        if total <= 0:
            centres.append(x[rng.integers(len(x))])
        else:
            centres.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centres)


def em_diagonal(x, k, rng, var_floor=1e-4, tol=1e-6, max_iter=100):
    """
    Fit a K-component diagonal GMM to ``x`` (n x D) by EM.

    Returns
    -------
    weights, means, variances : numpy arrays
    history : list of float
        Mean per-sample log-likelihood after each E-step.

    """
    x = np.asarray(x, dtype=float)
    n, dim = x.shape
    means = _kmeanspp(x, k, rng)
    glob_var = np.maximum(x.var(axis=0), var_floor)
    variances = np.tile(glob_var, (k, 1))
    weights = np.full(k, 1.0 / k)
    history = []
    for _ in range(max_iter):
        comp = -0.5 * (np.sum((x[:, None] - means[None]) ** 2 /
                              variances[None], axis=-1) +
                       np.sum(np.log(variances), axis=-1) + dim * LOG_2PI)
        tot = comp + np.log(weights)
        peak = tot.max(axis=1, keepdims=True)
        norm = peak + np.log(np.exp(tot - peak).sum(axis=1, keepdims=True))
        ll = float(norm.mean())
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break
        resp = np.exp(tot - norm)
        nk = resp.sum(axis=0)
        alive = nk > 1e-10
        weights = np.where(alive, nk / n, 0.0)
        safe = np.where(alive, nk, 1.0)[:, None]
        new_means = resp.T @ x / safe
        means = np.where(alive[:, None], new_means, means)
        new_var = resp.T @ x ** 2 / safe - means ** 2
        variances = np.where(alive[:, None],
                             np.maximum(new_var, var_floor), variances)
        weights = np.maximum(weights, 1e-300)
        weights /= weights.sum()
    return weights, means, variances, history


def fit_gmm(samples, n_components=2, seed=0, var_floor=1e-4, tol=1e-6,
            max_iter=100):
    """
    Fit one GMM per grid bin.

    Parameters
    ----------
    samples : list of numpy arrays
        Samples (n_b x D) of every grid bin.
    n_components : int
        Mixture size K. Bins with fewer than K samples use as many components
        as they have samples.
    seed : int
        Seed of the k-means++ initialisation (one stream per bin).

    Raises
    ------
    ValueError
        If a bin has no samples.

    """
    dim = np.atleast_2d(samples[0]).shape[1]
    num_bins = len(samples)
    weights = np.zeros((num_bins, n_components))
    means = np.zeros((num_bins, n_components, dim))
    variances = np.ones((num_bins, n_components, dim))
    for b, x in enumerate(samples):
        x = np.asarray(x, dtype=float).reshape(-1, dim)
        if len(x) == 0:
            raise ValueError(f'grid bin {b} has no samples')
        k = min(n_components, len(x))
        rng = np.random.default_rng([seed, b])
        w, mu, var, _ = em_diagonal(x, k, rng, var_floor, tol, max_iter)
        weights[b, :k], means[b, :k], variances[b, :k] = w, mu, var
    return GmmObservationModel(weights, means, variances)


# model and state space

@dataclass(frozen=True, eq=False)
class BarPointerModel:
    """
    Parameters
    ----------
    n_positions : int
        Position bins per bar (M).
    tempi : numpy array
        Tempo states [position bins per frame], ascending integers.
    tempo_change_prob : float
        Probability of moving to a neighbouring tempo state per frame.
    grid : BarGrid
    frame_rate : float
    obs : GmmObservationModel, optional
        ``None`` until trained.
    n_patterns : int
        Always 1.

    """

    n_positions: int
    tempi: np.ndarray
    tempo_change_prob: float
    grid: BarGrid
    frame_rate: float
    obs: GmmObservationModel | None = None
    n_patterns: int = 1
    band_edges: tuple = BAYES_BANDS

    def __post_init__(self):
        tempi = np.asarray(self.tempi, dtype=np.int64).reshape(-1)
        if len(tempi) == 0 or tempi.min() <= 0:
            raise ValueError('tempo states must be positive')
        if np.any(np.diff(tempi) <= 0):
            raise ValueError('tempo states must be strictly increasing')
        if tempi.max() >= self.n_positions // self.grid.beats_per_bar:
            raise ValueError('tempo states must advance less than a beat '
                             'per frame')
        if self.n_patterns != 1:
            raise ValueError('only a single rhythmic pattern is supported')
        object.__setattr__(self, 'tempi', tempi)

    @property
    def num_states(self):
        return self.n_positions * len(self.tempi)

    def bpm_range(self):
        """Tempo range [bpm] covered by the tempo states."""
        factor = self.frame_rate * 60.0 * self.grid.beats_per_bar / \
            self.n_positions
        return self.tempi.min() * factor, self.tempi.max() * factor


@dataclass(frozen=True, eq=False)
class StateSpace:
    positions: np.ndarray
    tempo_index: np.ndarray
    transitions: TransitionModel
    grid_bin: np.ndarray


def tempo_neighbour_probs(num_tempi, change_prob):
    """
    Tempo-index transition triplets ``(src, dst, prob)``.

    Stay with ``1 - p``, move to each neighbour with ``p / 2``; at the range
    edges the missing move is dropped and the row renormalised.
    """
    src, dst, prob = [], [], []
    for i in range(num_tempi):
        options = [(i, 1.0 - change_prob)]
        if i > 0:
            options.append((i - 1, change_prob / 2))
        if i < num_tempi - 1:
            options.append((i + 1, change_prob / 2))
        total = sum(p for _, p in options)
        for j, p in options:
            if p > 0:
                src.append(i)
                dst.append(j)
                prob.append(p / total)
    return np.array(src), np.array(dst), np.array(prob)


def build_state_space(model):
    """
    Enumerate states ``s = i * M + m`` and their transitions.

    From ``(m, i)`` the chain moves to ``((m + tempi[i]) mod M, j)`` where
    ``j`` follows :func:`tempo_neighbour_probs`.
    """
    M = model.n_positions
    num_tempi = len(model.tempi)
    m = np.tile(np.arange(M), num_tempi)
    ti = np.repeat(np.arange(num_tempi), M)
    t_src, t_dst, t_prob = tempo_neighbour_probs(num_tempi,
                                                 model.tempo_change_prob)
    src, dst, prob = [], [], []
    for a, b, p in zip(t_src, t_dst, t_prob):
        pos = np.arange(M)
        src.append(a * M + pos)
        dst.append(b * M + (pos + model.tempi[a]) % M)
        prob.append(np.full(M, p))
    transitions = TransitionModel.from_triplets(
        M * num_tempi, np.concatenate(src), np.concatenate(dst),
        np.concatenate(prob))
    grid_bin = m * model.grid.bins_per_bar // M
    return StateSpace(m, ti, transitions, grid_bin)


# training

def complete_bars(beats, beats_per_bar):
    """``(start, stop)`` beat indices of every fully annotated bar."""
    if beats.positions is None:
        raise ValueError('bar quantisation needs metrical positions')
    pos = beats.positions
    down = np.flatnonzero(pos == 1)
    bars = []
    for a, b in zip(down[:-1], down[1:]):
        if b - a == beats_per_bar and np.array_equal(
                pos[a:b], np.arange(1, beats_per_bar + 1)):
            bars.append((a, b))
    return bars


def quantize_to_grid(env, beats, grid):
    """
    Mean envelope value per grid bin for every complete bar.

    Frame times are mapped to bar phase by linear interpolation of the beat
    times; bins that receive no frame take the value of the frame nearest
    to the bin centre.

    Returns
    -------
    numpy array, shape (bars, bins_per_bar, bands)

    Raises
    ------
    ValueError
        If no complete bar lies within the envelope.

    """
    B = grid.beats_per_bar
    G = grid.bins_per_bar
    fps = env.frame_rate
    rows = []
    for a, b in complete_bars(beats, B):
        t = beats.times[a:b + 1]
        first = int(np.ceil(t[0] * fps - 1e-9))
        last = int(np.ceil(t[-1] * fps - 1e-9))
        if first < 0 or last > env.num_frames:
            continue
        frames = np.arange(first, last)
        phase = np.interp(frames / fps, t, np.arange(B + 1) / B)
        bins = np.minimum((phase * G + 1e-9).astype(int), G - 1)
        vals = env.values[frames]
        sums = np.zeros((G, env.num_bands))
        np.add.at(sums, bins, vals)
        counts = np.bincount(bins, minlength=G)
        row = sums / np.maximum(counts, 1)[:, None]
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            centre = np.interp((empty + 0.5) / G, np.arange(B + 1) / B, t)
            nearest = np.clip(np.round(centre * fps).astype(int), 0,
                              env.num_frames - 1)
            row[empty] = env.values[nearest]
        rows.append(row)
    if not rows:
        raise ValueError('no complete bar within the annotated envelope')
    return np.stack(rows)


@dataclass(frozen=True)
class BayesConfig:
    n_positions: int = 1216
    max_tempo_states: int = 23
    tempo_change_prob: float = 0.02
    tempo_margin: float = 0.2
    bins_per_bar: int = 64
    n_components: int = 2
    seed: int = 0
    frame_rate: float = 100.0


def tempo_states(min_bpm, max_bpm, beats_per_bar, n_positions, frame_rate,
                 max_states):
    """Integer tempo states covering ``[min_bpm, max_bpm]``."""
    factor = frame_rate * 60.0 * beats_per_bar / n_positions
    lo = max(int(np.floor(min_bpm / factor)), 1)
    hi = max(int(np.ceil(max_bpm / factor)), lo)
    hi = min(hi, n_positions // beats_per_bar - 1)
    states = np.arange(lo, hi + 1)
    if len(states) > max_states:
        states = np.unique(np.round(np.linspace(lo, hi, max_states))
                           ).astype(int)
    return states


def bayes_train(excerpts, beats_per_bar, config=BayesConfig()):
    """
    Train a bar pointer model.

    Parameters
    ----------
    excerpts : list of (OnsetEnvelope, BeatList)
        Two-band flux envelopes with their annotations.
    beats_per_bar : int
        Meter of the dataset.
    config : BayesConfig

    Returns
    -------
    BarPointerModel
        Tempo range spans the annotated tempi widened by ``tempo_margin``.

    """
    if not excerpts:
        raise ValueError('no training excerpts')
    grid = BarGrid(config.bins_per_bar, beats_per_bar)
    rows, tempi = [], []
    frame_rate = None
    for env, beats in excerpts:
        if frame_rate is None:
            frame_rate = env.frame_rate
        elif abs(env.frame_rate - frame_rate) > 1e-6:
            raise ValueError('training envelopes differ in frame rate')
        env = normalize_global(env)
        try:
            rows.append(quantize_to_grid(env, beats, grid))
        except ValueError:
            continue
        tempi.append(beats.tempi())
    if not rows:
        raise ValueError('no complete bar in any training excerpt')
    pooled = np.concatenate(rows)
    samples = [pooled[:, g, :] for g in range(grid.bins_per_bar)]
    obs = fit_gmm(samples, config.n_components, config.seed)
    bpm = np.concatenate(tempi)
    states = tempo_states(bpm.min() * (1 - config.tempo_margin),
                          bpm.max() * (1 + config.tempo_margin),
                          beats_per_bar, config.n_positions, frame_rate,
                          config.max_tempo_states)
    return BarPointerModel(config.n_positions, states,
                           config.tempo_change_prob, grid, frame_rate, obs,
                           band_edges=excerpts[0][0].band_edges)


# inference

def observation_loglik(model, feature):
    """
    Log-likelihood of one frame's feature vector for every state.

    A state ``(m, i)`` is scored by the GMM of grid bin
    ``floor(m * bins_per_bar / M)``.
    """
    if model.obs is None:
        raise UntrainedModelError('bar pointer model has no observation model')
    per_bin = model.obs.loglik(np.atleast_2d(feature))[0]
    m = np.tile(np.arange(model.n_positions), len(model.tempi))
    return per_bin[m * model.grid.bins_per_bar // model.n_positions]


def decode_events(path_positions, frame_rate, n_positions, beats_per_bar,
                  path_tempi=None):
    """
    Beats at every crossing of a beat boundary along a position path.

    The event time is interpolated between the two frames enclosing the
    boundary when the per-frame advance is known (``path_tempi``), otherwise
    it is the first frame past the boundary.
    """
    pos = np.asarray(path_positions)
    seg_len = n_positions // beats_per_bar
    seg = pos // seg_len
    cross = np.flatnonzero(seg[1:] != seg[:-1]) + 1
    times = cross.astype(float)
    if path_tempi is not None and len(cross):
        advance = np.asarray(path_tempi)[cross - 1].astype(float)
        boundary = seg[cross] * seg_len
        before = pos[cross - 1]
        dist = (boundary - before) % n_positions
        times = cross - 1 + np.clip(dist / advance, 0.0, 1.0)
    times = times / frame_rate
    positions = seg[cross] + 1
    if len(times) > 1:
        keep = np.concatenate([[True], np.diff(times) > 0])
        times, positions = times[keep], positions[keep]
    return BeatList(times, positions, beats_per_bar)


def bayes_track(model, env):
    """Decode beats and downbeats of an envelope with a trained model."""
    if model.obs is None:
        raise UntrainedModelError('bar pointer model has no observation model')
    if abs(env.frame_rate - model.frame_rate) > 1e-6:
        raise ValueError(f'frame rate {env.frame_rate} does not match the '
                         f'model ({model.frame_rate})')
    if env.num_frames == 0:
        return BeatList.empty(True, model.grid.beats_per_bar)
    env = normalize_global(env)
    space = _cached_state_space(model)
    table = model.obs.loglik(env.values)
    path, _ = viterbi(space.transitions, table, obs_map=space.grid_bin)
    return decode_events(space.positions[path], env.frame_rate,
                         model.n_positions, model.grid.beats_per_bar,
                         model.tempi[space.tempo_index[path]])


_SPACE_CACHE = {}


def _cached_state_space(model):
    key = (model.n_positions, tuple(model.tempi), model.tempo_change_prob,
           model.grid)
    space = _SPACE_CACHE.get(key)
    if space is None:
        if len(_SPACE_CACHE) > 8:
            _SPACE_CACHE.clear()
        space = _SPACE_CACHE[key] = build_state_space(model)
    return space


# persistence

MODEL_FORMAT = 'metertrack-barpointer/1'


def save_model(model, path):
    """Write a trained model as JSON."""
    if model.obs is None:
        raise UntrainedModelError('cannot save an untrained model')
    data = {
        'format': MODEL_FORMAT,
        'n_positions': model.n_positions,
        'tempi': model.tempi.tolist(),
        'tempo_change_prob': model.tempo_change_prob,
        'bins_per_bar': model.grid.bins_per_bar,
        'beats_per_bar': model.grid.beats_per_bar,
        'frame_rate': model.frame_rate,
        'band_edges': [list(b) for b in model.band_edges],
        'gmm': {'weights': model.obs.weights.tolist(),
                'means': model.obs.means.tolist(),
                'variances': model.obs.variances.tolist()},
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(data, fh)


def load_model(path):
    with open(path, encoding='utf-8') as fh:
        data = json.load(fh)
    if data.get('format') != MODEL_FORMAT:
        raise ValueError(f'{path}: not a bar pointer model file')
    gmm = data['gmm']
    obs = GmmObservationModel(np.array(gmm['weights']),
                              np.array(gmm['means']),
                              np.array(gmm['variances']))
    grid = BarGrid(data['bins_per_bar'], data['beats_per_bar'])
    return BarPointerModel(data['n_positions'], np.array(data['tempi']),
                           data['tempo_change_prob'], grid,
                           data['frame_rate'], obs,
                           band_edges=tuple(tuple(b) for b in
                                            data['band_edges']))
