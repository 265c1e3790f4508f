"""
Audio front end: WAV input, magnitude spectrograms, band-wise spectral flux
onset envelopes, local normalisation and the filterbank features consumed by
the TCN.

All feature functions are pure; a frame index ``t`` of a centred analysis
corresponds to time ``t / frame_rate``.

"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.ndimage import maximum_filter1d, minimum_filter1d

#: reference analysis: 2048-sample Hann window at 44.1 kHz, 100 frames/s
REFERENCE_SAMPLE_RATE = 44100
REFERENCE_WINDOW = 2048
DEFAULT_FPS = 100.0

#: observation bands of the bar-pointer tracker (split at 250 Hz)
BAYES_BANDS = ((0.0, 250.0), (250.0, None))
#: bands of the tatum strength profiles
PROFILE_BANDS = ((20.0, 200.0), (200.0, None))

FRAME_RATE_RATIOS = (0.95, 0.975, 1.0, 1.025, 1.05)


class InputTooShortError(ValueError):
    pass


class EmptyBandError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono audio with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError('AudioBuffer holds mono audio only')
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError('sample_rate must be a positive integer')
        if not np.all(np.isfinite(samples)):
            raise ValueError('audio contains non-finite samples')
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def segment(self, start, stop):
        """Sub-buffer between ``start`` and ``stop`` seconds."""
        a = int(round(start * self.sample_rate))
        b = int(round(stop * self.sample_rate))
        return AudioBuffer(self.samples[max(a, 0):b], self.sample_rate)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    magnitudes: np.ndarray   # frames x bins
    frame_rate: float
    bin_freqs: np.ndarray

    @property
    def num_frames(self):
        return self.magnitudes.shape[0]


@dataclass(frozen=True, eq=False)
class OnsetEnvelope:
    """
    Per-frame, per-band onset strength.

    Parameters
    ----------
    values : numpy array, shape (frames, bands)
        Non-negative onset strength.
    frame_rate : float
        Frames per second.
    band_edges : tuple of (low, high) pairs
        Band limits [Hz]; ``high`` may be ``None`` for "up to Nyquist".

    """

    values: np.ndarray
    frame_rate: float
    band_edges: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError('envelope values must be frames x bands')
        if values.shape[1] != len(self.band_edges):
            raise ValueError('one band edge pair per column required')
        if np.any(values < 0):
            raise ValueError('onset strength must be non-negative')
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'band_edges', tuple(
            (float(lo), None if hi is None else float(hi))
            for lo, hi in self.band_edges))

    @property
    def num_frames(self):
        return self.values.shape[0]

    @property
    def num_bands(self):
        return self.values.shape[1]

    def replace(self, values):
        return OnsetEnvelope(values, self.frame_rate, self.band_edges)

    def segment(self, start, stop):
        a = int(round(start * self.frame_rate))
        b = int(round(stop * self.frame_rate))
        return self.replace(self.values[max(a, 0):b])


# audio I/O

def load_wav(path):
    """
    Read a PCM or float WAV file into a mono :class:`AudioBuffer`.

    Integer formats are scaled to [-1, 1]; multi-channel audio is averaged.

    """
    sample_rate, data = wavfile.read(os.fspath(path))
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:
            # unsigned 8-bit
            data = (data.astype(float) - 128.0) / 128.0
        else:
            data = data.astype(float) / float(-info.min)
    else:
        data = data.astype(float)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioBuffer(data, sample_rate)


def save_wav(audio, path):
    """Write 16-bit PCM."""
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767)
    wavfile.write(os.fspath(path), audio.sample_rate, pcm.astype(np.int16))


def save_csv(matrix, path, header=None):
    """Export a frames x columns matrix as CSV with a leading frame index."""
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    with open(path, 'w', encoding='utf-8') as fh:
        if header:
            fh.write(','.join(['frame'] + list(header)) + '\n')
        for i, row in enumerate(matrix):
            fh.write(','.join([str(i)] + [f'{v:.8g}' for v in row]) + '\n')


# spectral analysis

def scaled_window_size(sample_rate):
    """Window length keeping the reference 2048-at-44.1kHz duration."""
    return int(round(REFERENCE_WINDOW * sample_rate / REFERENCE_SAMPLE_RATE))


def stft(audio, window_size, hop_size, center=False):
    """
    Magnitude short-time Fourier transform with a Hann window.

    Parameters
    ----------
    audio : AudioBuffer
        Input signal.
    window_size : int
        Frame length [samples].
    hop_size : int
        Hop between frames [samples].
    center : bool, optional
        Pad ``window_size // 2`` zeros on both sides so that frame ``t`` is
        centred at sample ``t * hop_size``. Without padding, the number of
        frames is ``(len - window_size) // hop_size + 1``.

    Returns
    -------
    Spectrogram
        ``frame_rate = sample_rate / hop_size``.

    Raises
    ------
    InputTooShortError
        If the (unpadded) signal is shorter than one window.

    """
    window_size = int(window_size)
    hop_size = int(hop_size)
    if not window_size >= hop_size >= 1:
        raise ValueError('need window_size >= hop_size >= 1')
    samples = audio.samples
    if center:
        pad = window_size // 2
        samples = np.pad(samples, (pad, pad))
    if len(samples) < window_size:
        raise InputTooShortError(
            f'input too short: {len(samples)} samples < window '
            f'{window_size}')
    num_frames = (len(samples) - window_size) // hop_size + 1
    frames = np.lib.stride_tricks.as_strided(
        samples, shape=(num_frames, window_size),
        strides=(samples.strides[0] * hop_size, samples.strides[0]),
        writeable=False)
    # periodic Hann, as used for spectral analysis
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window_size) /
                                window_size)
    mags = np.abs(np.fft.rfft(frames * window, axis=1))
    bin_freqs = np.fft.rfftfreq(window_size, 1.0 / audio.sample_rate)
    return Spectrogram(mags, audio.sample_rate / hop_size, bin_freqs)


def _band_mask(bin_freqs, low, high):
    nyquist = bin_freqs[-1]
    if low < 0 or (high is not None and high > nyquist + 1e-9):
        raise ValueError(f'band [{low}, {high}] outside [0, {nyquist}] Hz')
    hi = np.inf if high is None else high
    return (bin_freqs >= low) & (bin_freqs < hi)


def spectral_flux(spec, band_edges, log_compress=True, log_mul=1.0):
    """
    Band-wise half-wave rectified spectral flux.

    For each band, sums ``max(0, L[t] - L[t-1])`` over the band's bins, where
    ``L = log(1 + log_mul * |X|)`` (or ``|X|`` without compression). The first
    frame has zero flux.

    Raises
    ------
    EmptyBandError
        If a band contains no spectrogram bin.

    """
    mags = spec.magnitudes
    lev = np.log1p(log_mul * mags) if log_compress else mags
    diff = np.zeros_like(lev)
    diff[1:] = np.maximum(lev[1:] - lev[:-1], 0.0)
    columns = []
    for low, high in band_edges:
        mask = _band_mask(spec.bin_freqs, low, high)
        if not mask.any():
            raise EmptyBandError(f'empty band [{low}, {high}] Hz')
        columns.append(diff[:, mask].sum(axis=1))
    values = np.stack(columns, axis=1) if columns else \
        np.zeros((len(mags), 0))
    return OnsetEnvelope(values, spec.frame_rate, tuple(band_edges))


def normalize_local(env, half_window):
    """
    Rescale each band to [0, 1] with a running min/max.

    The window is centred and spans ``2 * half_window`` seconds, truncated at
    the signal borders. Where the window is constant the output is 0.

    """
    if half_window <= 0:
        raise ValueError('half_window must be positive')
    half = max(int(round(half_window * env.frame_rate)), 0)
    size = 2 * half + 1
    vals = env.values
    lo = minimum_filter1d(vals, size, axis=0, mode='nearest')
    hi = maximum_filter1d(vals, size, axis=0, mode='nearest')
    span = hi - lo
    out = np.zeros_like(vals)
    ok = span > 0
    out[ok] = (vals[ok] - lo[ok]) / span[ok]
    return env.replace(np.clip(out, 0.0, 1.0))


def normalize_global(env, percentile=99.0):
    """
    Scale every band by its ``percentile``-th value.

    Positive rescaling of the input leaves the output unchanged; all-zero
    bands are passed through.

    """
    vals = env.values
    scale = np.percentile(vals, percentile, axis=0)
    peak = vals.max(axis=0)
    scale = np.where(scale > 0, scale, peak)
    scale = np.where(scale > 0, scale, 1.0)
    return env.replace(vals / scale)


def frame_rate_variants(base_fps):
    """Frame rates at -5 %, -2.5 %, 0, +2.5 % and +5 % of ``base_fps``."""
    if base_fps <= 0:
        raise ValueError('base_fps must be positive')
    return [base_fps * r for r in FRAME_RATE_RATIOS]


def hop_for_fps(sample_rate, fps):
    """Integer hop size closest to the requested frame rate."""
    return max(int(round(sample_rate / fps)), 1)


# filterbank

def _reference_band_triplets(fmin=30.0, fmax=17000.0, bands_per_octave=12,
                             fref=440.0):
    """
    Start/centre/stop frequencies [Hz] of the triangular log filters.

    Filter centres lie on a ``bands_per_octave`` grid and are snapped to the
    bins of the reference analysis; duplicates are merged, which yields 81
    filters for the default arguments.

    """
    left = np.floor(np.log2(fmin / fref) * bands_per_octave)
    right = np.ceil(np.log2(fmax / fref) * bands_per_octave)
    freqs = fref * 2.0 ** (np.arange(left, right) / bands_per_octave)
    freqs = freqs[(freqs >= fmin) & (freqs <= fmax)]
    ref_bins = np.fft.rfftfreq(REFERENCE_WINDOW, 1.0 / REFERENCE_SAMPLE_RATE)
    idx = np.unique(np.round(freqs / ref_bins[1]).astype(int))
    hz = ref_bins[idx]
    return np.stack([hz[:-2], hz[1:-1], hz[2:]], axis=1)


def log_filterbank(bin_freqs, fmin=30.0, fmax=17000.0, bands_per_octave=12):
    """
    Triangular filterbank matrix (bins x bands) with unit-area filters.

    Band frequencies are fixed in Hz, so the band count does not depend on the
    analysis resolution. Filters narrower than a bin fall back to the nearest
    bin; filters above Nyquist stay zero.

    """
    triplets = _reference_band_triplets(fmin, fmax, bands_per_octave)
    fb = np.zeros((len(bin_freqs), len(triplets)))
    for b, (start, centre, stop) in enumerate(triplets):
        rise = (bin_freqs - start) / (centre - start)
        fall = (stop - bin_freqs) / (stop - centre)
        tri = np.clip(np.minimum(rise, fall), 0.0, None)
        if tri.sum() == 0 and centre <= bin_freqs[-1]:
            tri[np.argmin(np.abs(bin_freqs - centre))] = 1.0
        if tri.sum() > 0:
            fb[:, b] = tri / tri.sum()
    return fb


def onset_envelope(audio, fps=DEFAULT_FPS, band_edges=BAYES_BANDS,
                   window_size=None, log_compress=True, log_mul=1.0):
    """Centred STFT followed by :func:`spectral_flux`."""
    window_size = window_size or scaled_window_size(audio.sample_rate)
    hop = hop_for_fps(audio.sample_rate, fps)
    spec = stft(audio, window_size, hop, center=True)
    return spectral_flux(spec, band_edges, log_compress, log_mul)


def tcn_features(audio, fps=DEFAULT_FPS, window_size=None):
    """
    Log-compressed filterbank spectrogram (frames x 81) for the TCN.

    Returns
    -------
    features : numpy array
    frame_rate : float
        Actual frame rate of the integer hop size.

    """
    window_size = window_size or scaled_window_size(audio.sample_rate)
    hop = hop_for_fps(audio.sample_rate, fps)
    spec = stft(audio, window_size, hop, center=True)
    fb = log_filterbank(spec.bin_freqs)
    return np.log1p(spec.magnitudes @ fb), spec.frame_rate


NUM_TCN_BANDS = len(_reference_band_triplets())
