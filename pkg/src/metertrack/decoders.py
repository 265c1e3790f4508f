"""
Post-processing of activations and onset envelopes into beat lists.

:func:`dbn_beat_decode` and :func:`dbn_downbeat_decode` are DBN-style Viterbi
decoders over ``(phase, tempo)`` state spaces: every tempo owns a ring of
``interval`` phase states (one per frame), tempo changes happen only when a
beat boundary is crossed, using the neighbour rule of the bar pointer model.
:func:`ellis_track` is the global-tempo dynamic programming beat tracker.

"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .bayesbeat import tempo_neighbour_probs
from .beats import BeatList, TempoRange
from .hmm import TransitionModel, viterbi

ACT_FLOOR = 1e-5
OBSERVATION_LAMBDA = 16
DBN_TEMPO_CHANGE_PROB = 0.1

#: default decoder tempo ranges [bpm]
TEMPO_RANGES = {
    'candombe': TempoRange(100.0, 170.0),
    'samba': TempoRange(60.0, 140.0),
    'generic': TempoRange(55.0, 215.0),
}


def tempo_range_for(dataset_name):
    """Default range for a dataset name (matched on 'candombe'/'samba')."""
    name = dataset_name.lower()
    for key in ('candombe', 'samba'):
        if key in name:
            return TEMPO_RANGES[key]
    return TEMPO_RANGES['generic']


def clip_activations(act):
    return np.clip(np.asarray(act, dtype=float), ACT_FLOOR, 1.0 - ACT_FLOOR)


def beat_intervals(frame_rate, tempo_range, num_tempi=None):
    """Beat intervals [frames] covering ``tempo_range``."""
    lo = max(int(np.floor(60.0 * frame_rate / tempo_range.max_bpm)), 1)
    hi = max(int(np.ceil(60.0 * frame_rate / tempo_range.min_bpm)), lo)
    intervals = np.arange(lo, hi + 1)
    if num_tempi is not None and num_tempi < len(intervals):
        intervals = np.unique(np.round(np.exp(np.linspace(
            np.log(lo), np.log(hi), num_tempi))).astype(int))
    return intervals


@dataclass(frozen=True, eq=False)
class PhaseStateSpace:
    """
    States ``(tempo i, beat k, phase p)`` with ``p < intervals[i]``.

    ``obs_class`` is 0 for non-beat states, 1 for beat states and 2 for
    downbeat states (beat states of the first beat in the bar).
    """

    intervals: np.ndarray
    beats_per_bar: int
    tempo_index: np.ndarray
    beat_index: np.ndarray
    phase: np.ndarray
    obs_class: np.ndarray
    transitions: TransitionModel


def phase_state_space(intervals, beats_per_bar=1,
                      change_prob=DBN_TEMPO_CHANGE_PROB,
                      observation_lambda=OBSERVATION_LAMBDA):
    intervals = np.asarray(intervals, dtype=int)
    num_tempi = len(intervals)
    B = beats_per_bar
    sizes = intervals * B
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    n = int(sizes.sum())
    tempo_index = np.repeat(np.arange(num_tempi), sizes)
    local = np.arange(n) - offsets[tempo_index]
    L = intervals[tempo_index]
    beat_index = local // L
    phase = local % L
    is_beat = phase < np.maximum(L / observation_lambda, 1)
    obs_class = np.where(is_beat, np.where(beat_index == 0, 2, 1), 0)
    if B == 1:
        obs_class = np.where(is_beat, 1, 0)

    # advance within a beat
    inner = np.flatnonzero(phase < L - 1)
    src = [inner]
    dst = [inner + 1]
    prob = [np.ones(len(inner))]
    # beat boundary: last phase of beat k -> first phase of beat k + 1
    t_src, t_dst, t_prob = tempo_neighbour_probs(num_tempi, change_prob)
    for a, b, p in zip(t_src, t_dst, t_prob):
        k = np.arange(B)
        src.append(offsets[a] + k * intervals[a] + intervals[a] - 1)
        dst.append(offsets[b] + ((k + 1) % B) * intervals[b])
        prob.append(np.full(B, p))
    transitions = TransitionModel.from_triplets(
        n, np.concatenate(src), np.concatenate(dst), np.concatenate(prob))
    return PhaseStateSpace(intervals, B, tempo_index, beat_index, phase,
                           obs_class, transitions)


def _beat_frames(space, path, act):
    """Frame of maximum activation inside each visit of a beat region."""
    is_beat = space.obs_class[path] > 0
    if not is_beat.any():
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    ph = space.phase[path]
    k = space.beat_index[path]
    start = is_beat.copy()
    start[1:] &= ~is_beat[:-1] | (ph[1:] <= ph[:-1]) | (k[1:] != k[:-1])
    region = np.cumsum(start)
    region[~is_beat] = 0
    frames, beats = [], []
    for r in range(1, region.max() + 1):
        idx = np.flatnonzero(region == r)
        frames.append(idx[np.argmax(act[idx])])
        beats.append(k[idx[0]])
    return np.array(frames), np.array(beats)


def dbn_beat_decode(beat_act, frame_rate, tempo_range=TEMPO_RANGES['generic'],
                    num_tempi=None, change_prob=DBN_TEMPO_CHANGE_PROB,
                    observation_lambda=OBSERVATION_LAMBDA):
    """
    Decode beats from a beat activation function.

    Parameters
    ----------
    beat_act : numpy array
        Per-frame beat probability; clipped to ``[1e-5, 1 - 1e-5]``.
    frame_rate : float
    tempo_range : TempoRange
    num_tempi : int, optional
        Limit the number of (log-spaced) tempo states.
    change_prob : float
        Probability of a tempo change at a beat boundary.
    observation_lambda : int
        The first ``1 / observation_lambda`` of every beat period are beat
        states observing ``act``; the others observe
        ``(1 - act) / observation_lambda``.

    Returns
    -------
    BeatList
        Beat-only list; each beat sits at the activation peak of its beat
        region.

    """
    act = clip_activations(beat_act).reshape(-1)
    if len(act) == 0:
        raise ValueError('empty activation function')
    space = _space(frame_rate, tempo_range, num_tempi, 1, change_prob,
                   observation_lambda)
    obs = np.stack([np.log((1.0 - act) / observation_lambda), np.log(act)],
                   axis=1)
    path, _ = viterbi(space.transitions, obs, obs_map=space.obs_class)
    frames, _ = _beat_frames(space, path, act)
    return BeatList(np.unique(frames) / frame_rate)


def dbn_downbeat_decode(beat_act, downbeat_act, frame_rate,
                        beats_per_bar_options=(3, 4),
                        tempo_range=TEMPO_RANGES['generic'], num_tempi=None,
                        change_prob=DBN_TEMPO_CHANGE_PROB,
                        observation_lambda=OBSERVATION_LAMBDA):
    """
    Decode beats with metrical positions from beat and downbeat activations.

    ``beat_act`` covers all beats (downbeats included). Downbeat states
    observe ``downbeat_act``, other beat states ``beat_act - downbeat_act``
    and non-beat states ``(1 - beat_act) / observation_lambda``, all floored
    at 1e-5. Every option of ``beats_per_bar_options`` is decoded and the one
    with the highest path probability is returned.
    """
    if len(beats_per_bar_options) == 0:
        raise ValueError('no beats_per_bar option given')
    b = clip_activations(beat_act).reshape(-1)
    d = clip_activations(downbeat_act).reshape(-1)
    if len(b) == 0:
        raise ValueError('empty activation function')
    if len(b) != len(d):
        raise ValueError('beat and downbeat activations differ in length')
    obs = np.log(np.stack([
        np.maximum((1.0 - b) / observation_lambda, ACT_FLOOR),
        np.maximum(b - d, ACT_FLOOR),
        d], axis=1))
    best = None
    for B in beats_per_bar_options:
        space = _space(frame_rate, tempo_range, num_tempi, int(B),
                       change_prob, observation_lambda)
        path, log_prob = viterbi(space.transitions, obs,
                                 obs_map=space.obs_class)
        if best is None or log_prob > best[0]:
            best = (log_prob, space, path, int(B))
    _, space, path, B = best
    frames, beat_idx = _beat_frames(space, path, b)
    frames, first = np.unique(frames, return_index=True)
    return BeatList(frames / frame_rate, beat_idx[first] + 1, B)


_SPACES = {}


def _space(frame_rate, tempo_range, num_tempi, beats_per_bar, change_prob,
           observation_lambda):
    key = (round(frame_rate, 9), tempo_range, num_tempi, beats_per_bar,
           change_prob, observation_lambda)
    space = _SPACES.get(key)
    if space is None:
        if len(_SPACES) > 32:
            _SPACES.clear()
        intervals = beat_intervals(frame_rate, tempo_range, num_tempi)
        space = _SPACES[key] = phase_state_space(
            intervals, beats_per_bar, change_prob, observation_lambda)
    return space


# global tempo + dynamic programming

def estimate_tempo(onset, frame_rate, tempo_range, start_bpm=120.0,
                   octave_width=1.0):
    """
    Beat period [frames] at the peak of the windowed autocorrelation.

    The autocorrelation of the mean-removed onset strength is weighted by a
    log-Gaussian window centred on ``start_bpm`` (``octave_width`` octaves
    standard deviation) and searched over lags inside ``tempo_range``. Exact
    ties resolve to the slowest tempo.
    """
    x = onset - onset.mean()
    n = len(x)
    spec = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(np.abs(spec) ** 2)[:n]
    lo = max(int(np.ceil(60.0 * frame_rate / tempo_range.max_bpm)), 1)
    hi = min(int(np.floor(60.0 * frame_rate / tempo_range.min_bpm)), n - 1)
    if hi < lo:
        raise ValueError('envelope too short for the tempo range')
    lags = np.arange(lo, hi + 1)
    centre = 60.0 * frame_rate / start_bpm
    weight = np.exp(-0.5 * (np.log2(lags / centre) / octave_width) ** 2)
    # the FFT leaves ~1e-12 noise; round it off so flat inputs tie exactly
    score = np.round(weight * acf[lags], 9)
    # reversed argmax: ties go to the largest lag
    k = len(lags) - 1 - int(np.argmax(score[::-1]))
    period = float(lags[k])
    if 0 < k < len(lags) - 1:
        a, b, c = score[k - 1], score[k], score[k + 1]
        denom = a - 2 * b + c
        if denom < 0:
            period += 0.5 * (a - c) / denom
    return period


def ellis_track(env, tempo_range=TEMPO_RANGES['generic'], tightness=680.0,
                start_bpm=120.0, trim=True):
    """
    Global-tempo dynamic programming beat tracker.

    The bands of ``env`` are summed and scaled to unit standard deviation,
    the period is estimated with :func:`estimate_tempo`, and the beat
    sequence maximises the summed onset strength plus ``tightness`` times the
    negative squared log ratio between each inter-beat interval and the
    period. Weak beats at both ends are trimmed.

    Raises
    ------
    ValueError
        If the envelope is shorter than two seconds.

    """
    fps = env.frame_rate
    onset = env.values.sum(axis=1)
    if len(onset) < 2.0 * fps:
        raise ValueError('ellis_track needs at least 2 s of envelope')
    std = onset.std()
    if std > 0:
        onset = onset / std
    period = estimate_tempo(onset, fps, tempo_range, start_bpm)
    local = gaussian_filter1d(onset, period / 32.0, mode='constant')
    n = len(local)
    cum = np.zeros(n)
    back = np.full(n, -1)
    lo_off = int(round(2 * period))
    hi_off = max(int(round(period / 2)), 1)
    for t in range(n):
        lo, hi = max(t - lo_off, 0), t - hi_off
        if hi < 0:
            cum[t] = local[t]
            continue
        cand = np.arange(lo, hi + 1)
        score = cum[cand] - tightness * np.log((t - cand) / period) ** 2
        k = int(np.argmax(score))
        if score[k] > 0:
            cum[t] = local[t] + score[k]
            back[t] = cand[k]
        else:
            cum[t] = local[t]
    # last beat: latest local maximum of the cumulative score that beats half
    # the median local maximum
    peaks = np.flatnonzero((cum[1:-1] > cum[:-2]) & (cum[1:-1] >= cum[2:])) + 1
    if len(peaks) == 0:
        peaks = np.array([int(np.argmax(cum))])
    good = peaks[cum[peaks] >= 0.5 * np.median(cum[peaks])]
    t = int(good[-1]) if len(good) else int(peaks[-1])
    beats = []
    while t >= 0:
        beats.append(t)
        t = int(back[t])
    beats = np.array(beats[::-1])
    if trim and len(beats):
        strength = local[beats]
        thresh = 0.5 * np.sqrt(np.mean(strength ** 2))
        keep = np.flatnonzero(strength >= thresh)
        if len(keep):
            beats = beats[keep[0]:keep[-1] + 1]
    return BeatList(np.unique(beats) / fps)
