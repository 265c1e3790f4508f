"""
Synthetic percussion recordings with exact beat and downbeat ground truth.

Strokes are placed on a tatum grid (four tatums per beat). Low strokes are
decaying tones between 80 and 180 Hz, high strokes are short high-passed noise
bursts. Three suites mimic the rhythmic traits used as test fixtures:
``samba_like`` (2/4, strong low accent on beat 2, constant tempo per track),
``candombe_like`` (4/4, accents on beats 3 and 4 plus a contrametric stroke,
tempo rising within a track) and ``ballroom_like`` (4/4, accented beats, loose
off-beat tatums).

"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import AudioBuffer, save_wav
from .beats import BeatList, save_beats
from .manifest import DatasetManifest

log = logging.getLogger(__name__)

TATUMS_PER_BEAT = 4
SUITES = ('candombe_like', 'samba_like', 'ballroom_like')


@dataclass(frozen=True)
class Stroke:
    """Accent of one tatum: zero-based tatum index within the bar."""

    tatum: int
    band: str            # 'low' or 'high'
    probability: float
    strength: float

    def __post_init__(self):
        if self.band not in ('low', 'high'):
            raise ValueError(f'unknown band {self.band!r}')
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError('stroke probability must lie in [0, 1]')


@dataclass(frozen=True)
class RhythmSpec:
    """
    Parameters of one synthetic recording.

    ``tempo_end_bpm`` enables a linear tempo drift over the beats;
    ``start_time`` is the time of the first downbeat and may be negative, in
    which case the recording starts mid-bar.
    """

    beats_per_bar: int
    tempo_bpm: float
    strokes: tuple
    n_bars: int
    seed: int = 0
    tempo_end_bpm: float | None = None
    start_time: float = 0.0
    duration: float | None = None
    timing_jitter: float = 0.0
    strength_jitter: float = 0.1
    low_freq: float | None = None
    noise_level: float = 1e-3

    def __post_init__(self):
        if self.tempo_bpm <= 0 or (self.tempo_end_bpm is not None and
                                   self.tempo_end_bpm <= 0):
            raise ValueError('tempo must be positive')
        if self.beats_per_bar < 1 or self.n_bars < 1:
            raise ValueError('need at least one beat per bar and one bar')
        n_tatums = self.beats_per_bar * TATUMS_PER_BEAT
        for stroke in self.strokes:
            if not 0 <= stroke.tatum < n_tatums:
                raise ValueError(f'tatum {stroke.tatum} outside bar')


def beat_times(spec):
    """Beat times of ``spec`` (before clipping to the recording)."""
    n_beats = spec.n_bars * spec.beats_per_bar
    end = spec.tempo_bpm if spec.tempo_end_bpm is None else spec.tempo_end_bpm
    bpm = np.linspace(spec.tempo_bpm, end, n_beats)
    intervals = 60.0 / bpm[:-1]
    return spec.start_time + np.concatenate([[0.0], np.cumsum(intervals)])


def _low_stroke(sample_rate, freq, strength, length=0.25):
    n = int(length * sample_rate)
    t = np.arange(n) / sample_rate
    attack = np.minimum(t / 0.002, 1.0)
    return strength * attack * np.exp(-t / 0.06) * np.sin(2 * np.pi * freq * t)


def _high_stroke(rng, sos, sample_rate, strength, length=0.08):
    n = int(length * sample_rate)
    t = np.arange(n) / sample_rate
    burst = sosfilt(sos, rng.standard_normal(n))
    burst /= np.max(np.abs(burst)) + 1e-12
    return 0.6 * strength * np.exp(-t / 0.015) * burst


def generate(spec, sample_rate=44100):
    """
    Render ``spec`` to audio.

    Returns
    -------
    audio : AudioBuffer
        Peak-normalised to at most 0.9.
    beats : BeatList
        Exact beat times with metrical positions, clipped to the recording.

    """
    rng = np.random.default_rng(spec.seed)
    times = beat_times(spec)
    n_beats = len(times)
    # tatum instants by linear interpolation between beats
    last = times[-1] + (times[-1] - times[-2] if n_beats > 1 else
                        60.0 / spec.tempo_bpm)
    ext = np.append(times, last)
    frac = np.arange(n_beats * TATUMS_PER_BEAT) / TATUMS_PER_BEAT
    tatum_times = np.interp(frac, np.arange(n_beats + 1), ext)

    duration = spec.duration if spec.duration is not None else last + 0.5
    n_samples = int(round(duration * sample_rate))
    out = rng.standard_normal(n_samples) * spec.noise_level
    low_freq = spec.low_freq or rng.uniform(80.0, 180.0)
    sos = butter(4, 2000.0, btype='highpass', fs=sample_rate, output='sos')

    n_tatums = spec.beats_per_bar * TATUMS_PER_BEAT
    for k, t0 in enumerate(tatum_times):
        tatum = k % n_tatums
        for stroke in spec.strokes:
            if stroke.tatum != tatum:
                continue
            # always draw, so that the stream of random numbers does not
            # depend on which strokes fire
            fire = rng.random() < stroke.probability
            gain = stroke.strength * (1.0 + spec.strength_jitter *
                                      rng.uniform(-1.0, 1.0))
            jitter = rng.normal(0.0, spec.timing_jitter) \
                if spec.timing_jitter > 0 else 0.0
            if not fire:
                continue
            if stroke.band == 'low':
                sound = _low_stroke(sample_rate, low_freq, gain)
            else:
                sound = _high_stroke(rng, sos, sample_rate, gain)
            start = int(round((t0 + jitter) * sample_rate))
            if start >= n_samples or start + len(sound) <= 0:
                continue
            a, b = max(start, 0), min(start + len(sound), n_samples)
            out[a:b] += sound[a - start:b - start]

    peak = np.max(np.abs(out)) if n_samples else 0.0
    if peak > 0.9:
        out *= 0.9 / peak
    positions = np.arange(n_beats) % spec.beats_per_bar + 1
    beats = BeatList(times, positions, spec.beats_per_bar)
    beats = beats.select((times >= 0) & (times < duration))
    return AudioBuffer(out, sample_rate), beats


# suites

def _strokes(table):
    return tuple(Stroke(t, band, p, s) for t, band, p, s in table)


def samba_strokes():
    low = [(0, 'low', 0.7, 0.6), (4, 'low', 1.0, 1.0), (6, 'low', 0.25, 0.3)]
    high = [(0, 'high', 0.9, 0.7), (1, 'high', 0.5, 0.4),
            (2, 'high', 0.9, 0.6), (3, 'high', 0.6, 0.5),
            (4, 'high', 0.9, 0.7), (5, 'high', 0.5, 0.4),
            (6, 'high', 0.9, 0.6), (7, 'high', 0.6, 0.5)]
    return _strokes(low + high)


def candombe_strokes():
    # piano drum: loose downbeat, contrametric stroke, beats 3 and 4
    low = [(0, 'low', 0.5, 0.7), (3, 'low', 1.0, 0.9), (8, 'low', 1.0, 1.0),
           (12, 'low', 1.0, 1.0)]
    # chico keeps the pulse off the beat, the clave marks a fixed cycle
    high = []
    for beat in range(4):
        base = 4 * beat
        high += [(base + 1, 'high', 1.0, 0.5), (base + 2, 'high', 1.0, 0.7),
                 (base + 3, 'high', 0.6, 0.4)]
    high += [(0, 'high', 1.0, 0.9), (6, 'high', 1.0, 0.8),
             (10, 'high', 0.7, 0.8), (13, 'high', 1.0, 0.8)]
    return _strokes(low + high)


def ballroom_strokes():
    strokes = []
    for beat in range(4):
        base = 4 * beat
        strength = (1.0, 0.75, 0.85, 0.75)[beat]
        strokes += [(base, 'low', 1.0, strength), (base, 'high', 1.0, 0.8),
                    (base + 1, 'high', 0.3, 0.4), (base + 2, 'high', 0.5, 0.5),
                    (base + 3, 'high', 0.3, 0.4), (base + 2, 'low', 0.2, 0.4)]
    return _strokes(strokes)


def suite_spec(kind, index, seed=0, duration=30.0):
    """
    :class:`RhythmSpec` of excerpt ``index`` of a suite.

    Tempo statistics per suite: ``samba_like`` constant tempo between 75 and
    115 bpm, ``candombe_like`` rising 3-10 % from 105-125 bpm, and
    ``ballroom_like`` constant between 85 and 150 bpm.
    """
    rng = np.random.default_rng([seed, SUITES.index(kind), index])
    if kind == 'samba_like':
        meter, strokes = 2, samba_strokes()
        tempo = rng.uniform(75.0, 115.0)
        tempo_end = None
    elif kind == 'candombe_like':
        meter, strokes = 4, candombe_strokes()
        tempo = rng.uniform(105.0, 125.0)
        tempo_end = tempo * rng.uniform(1.03, 1.10)
    elif kind == 'ballroom_like':
        meter, strokes = 4, ballroom_strokes()
        tempo = rng.uniform(85.0, 150.0)
        tempo_end = None
    else:
        raise ValueError(f'unknown suite {kind!r}; choose from {SUITES}')
    bar = meter * 60.0 / tempo
    start = -rng.uniform(0.0, bar)
    n_bars = int(np.ceil((duration - start) / (meter * 60.0 / max(
        tempo, tempo_end or tempo)) * 1.2)) + 1
    return RhythmSpec(meter, tempo, strokes, n_bars,
                      seed=int(rng.integers(2**31)), tempo_end_bpm=tempo_end,
                      start_time=start, duration=duration,
                      timing_jitter=0.004)


def make_suite(kind, out_dir, n_excerpts=93, duration=30.0, seed=0,
               sample_rate=44100):
    """
    Write a synthetic suite (WAV + annotation files + ``manifest.json``).

    Returns
    -------
    DatasetManifest

    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    meter = None
    for i in range(n_excerpts):
        spec = suite_spec(kind, i, seed, duration)
        meter = spec.beats_per_bar
        audio, beats = generate(spec, sample_rate)
        tid = f'{kind}_{i:03d}'
        save_wav(audio, os.path.join(out_dir, tid + '.wav'))
        save_beats(beats, os.path.join(out_dir, tid + '.beats'))
        entries.append((tid, tid + '.wav', tid + '.beats'))
    manifest = DatasetManifest(kind, meter, entries, os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, 'manifest.json'))
    log.info('wrote %d excerpts of %s to %s', n_excerpts, kind, out_dir)
    return manifest
