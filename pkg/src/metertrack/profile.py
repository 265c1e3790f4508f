"""
Tatum strength profiles: distributions of locally normalised onset strength
per frequency band and tatum position within the bar.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .bayesbeat import complete_bars

log = logging.getLogger(__name__)

TATUMS_PER_BEAT = 4
ANCHOR_VARIANCE = 0.02
PROFILE_HALF_WINDOW = 1.5


@dataclass(frozen=True, eq=False)
class TatumProfile:
    """
    ``samples[band][tatum]`` holds the pooled strengths of that tatum, one
    per bar. Tatums are numbered from 1 in the output files.
    """

    samples: list
    beats_per_bar: int
    band_edges: tuple
    tatums_per_beat: int = TATUMS_PER_BEAT

    @property
    def num_tatums(self):
        return self.beats_per_bar * self.tatums_per_beat

    @property
    def num_bands(self):
        return len(self.samples)

    def counts(self):
        return np.array([[len(s) for s in band] for band in self.samples])


def _bar_tatum_strengths(env, times, tatums_per_beat):
    """Max strength in each tatum span of one bar, shape (tatums, bands)."""
    fps = env.frame_rate
    n = tatums_per_beat
    beat_idx = np.repeat(np.arange(len(times) - 1), n)
    frac = np.tile(np.arange(n) / n, len(times) - 1)
    period = np.diff(times)[beat_idx]
    centre = times[beat_idx] + frac * period
    half = 0.5 * period / n
    out = np.empty((len(centre), env.num_bands))
    for k, (c, h) in enumerate(zip(centre, half)):
        lo = int(np.ceil((c - h) * fps - 1e-9))
        hi = int(np.ceil((c + h) * fps - 1e-9))
        lo, hi = max(lo, 0), min(hi, env.num_frames)
        if hi > lo:
            out[k] = env.values[lo:hi].max(axis=0)
        else:
            nearest = min(max(int(round(c * fps)), 0), env.num_frames - 1)
            out[k] = env.values[nearest]
    return out


def compute_profile(excerpts, beats_per_bar, tatums_per_beat=TATUMS_PER_BEAT):
    """
    Pool per-bar tatum strengths over all excerpts.

    Parameters
    ----------
    excerpts : list of (OnsetEnvelope, BeatList)
        Locally normalised envelopes (values in [0, 1]) with annotations that
        carry metrical positions.
    beats_per_bar : int
    tatums_per_beat : int

    Returns
    -------
    TatumProfile
        Tatum spans are centred on the tatum instants, which divide every
        beat interval linearly; the strength of a tatum is the maximum
        envelope value inside its span. Excerpts without a complete bar are
        skipped with a warning.

    """
    band_edges = None
    rows = []
    for i, (env, beats) in enumerate(excerpts):
        if band_edges is None:
            band_edges = env.band_edges
        elif env.band_edges != band_edges:
            raise ValueError('all envelopes must share the same bands')
        if env.values.min(initial=0.0) < 0 or env.values.max(initial=0.0) > 1:
            raise ValueError('envelopes must be normalised to [0, 1]')
        bars = [(a, b) for a, b in complete_bars(beats, beats_per_bar)
                if beats.times[b] * env.frame_rate <= env.num_frames]
        if not bars:
            log.warning('excerpt %d has no complete bar, skipped', i)
            continue
        for a, b in bars:
            rows.append(_bar_tatum_strengths(env, beats.times[a:b + 1],
                                             tatums_per_beat))
    if band_edges is None:
        raise ValueError('no excerpts given')
    n_tatums = beats_per_bar * tatums_per_beat
    n_bands = len(band_edges)
    if rows:
        stacked = np.stack(rows)
        samples = [[stacked[:, t, b].copy() for t in range(n_tatums)]
                   for b in range(n_bands)]
    else:
        samples = [[np.zeros(0) for _ in range(n_tatums)]
                   for _ in range(n_bands)]
    return TatumProfile(samples, beats_per_bar, band_edges, tatums_per_beat)


@dataclass(frozen=True)
class TatumStats:
    band: int
    tatum: int          # 1-based
    median: float
    q1: float
    q3: float
    variance: float
    n: int
    anchor: bool


def profile_stats(profile, anchor_variance=ANCHOR_VARIANCE):
    """
    Median, quartiles and population variance of every (band, tatum).

    A tatum is flagged as an anchor when its variance is below
    ``anchor_variance``.

    Raises
    ------
    ValueError
        If a tatum has no samples.

    """
    out = []
    for b, band in enumerate(profile.samples):
        for t, s in enumerate(band):
            if len(s) == 0:
                raise ValueError(f'band {b} tatum {t + 1} has no samples')
            q1, med, q3 = np.quantile(s, [0.25, 0.5, 0.75])
            var = float(np.var(s))
            out.append(TatumStats(b, t + 1, float(med), float(q1), float(q3),
                                  var, len(s), var < anchor_variance))
    return out


def median_matrix(stats, num_bands, num_tatums):
    """Medians as a ``(bands, tatums)`` array."""
    m = np.zeros((num_bands, num_tatums))
    for s in stats:
        m[s.band, s.tatum - 1] = s.median
    return m


def _band_label(edges):
    lo, hi = edges
    return f'{lo:g}-{hi:g}' if hi is not None else f'>{lo:g}'


def save_profile_csv(profile, stats, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['band', 'tatum', 'median', 'q1', 'q3', 'variance',
                         'n', 'anchor'])
        for s in stats:
            writer.writerow([_band_label(profile.band_edges[s.band]), s.tatum,
                             f'{s.median:.6f}', f'{s.q1:.6f}', f'{s.q3:.6f}',
                             f'{s.variance:.6f}', s.n, int(s.anchor)])


def save_profile_raw_csv(profile, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['band', 'tatum', 'bar', 'value'])
        for b, band in enumerate(profile.samples):
            label = _band_label(profile.band_edges[b])
            for t, s in enumerate(band):
                for k, v in enumerate(s):
                    writer.writerow([label, t + 1, k, f'{v:.6f}'])
