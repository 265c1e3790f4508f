"""
Beat lists: ordered event times with metrical positions.

A :class:`BeatList` is the currency shared by annotations, tracker outputs and
the evaluation code. On disk it is a UTF-8 text file with one event per line,
``time<TAB>position``; the position column may be left empty for beat-only
lists.

"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class AnnotationError(ValueError):
    """Raised when an annotation file cannot be parsed."""


@dataclass(frozen=True)
class TempoRange:
    """Tempo constraint for decoders, in beats per minute."""

    min_bpm: float
    max_bpm: float

    def __post_init__(self):
        if not 0 < self.min_bpm < self.max_bpm:
            raise ValueError(
                f"invalid tempo range [{self.min_bpm}, {self.max_bpm}]")


@dataclass(frozen=True, eq=False)
class BeatList:
    """
    Ordered beat events.

    Parameters
    ----------
    times : numpy array
        Event times [seconds], strictly increasing.
    positions : numpy array, optional
        Metrical position of every event (1 marks a downbeat). ``None`` for
        beat-only lists.
    beats_per_bar : int, optional
        Bar length in beats, if known.

    """

    times: np.ndarray
    positions: np.ndarray | None = None
    beats_per_bar: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        object.__setattr__(self, 'times', times)
        if self.positions is not None:
            positions = np.asarray(self.positions, dtype=int).reshape(-1)
            if len(positions) != len(times):
                raise ValueError('times and positions differ in length')
            if len(positions) and positions.min() < 1:
                raise ValueError('metrical positions must be >= 1')
            object.__setattr__(self, 'positions', positions)
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError('beat times must be strictly increasing')
        if not np.all(np.isfinite(times)):
            raise ValueError('beat times must be finite')

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, BeatList):
            return NotImplemented
        if self.beats_per_bar != other.beats_per_bar:
            return False
        if (self.positions is None) != (other.positions is None):
            return False
        if not np.array_equal(self.times, other.times):
            return False
        return self.positions is None or np.array_equal(self.positions,
                                                        other.positions)

    @classmethod
    def empty(cls, with_positions=False, beats_per_bar=None):
        positions = np.zeros(0, dtype=int) if with_positions else None
        return cls(np.zeros(0), positions, beats_per_bar)

    @property
    def has_positions(self):
        return self.positions is not None

    def downbeats(self):
        """Times of position-1 events."""
        if self.positions is None:
            raise ValueError('beat list carries no metrical positions')
        return self.times[self.positions == 1]

    def select(self, mask):
        positions = None if self.positions is None else self.positions[mask]
        return BeatList(self.times[mask], positions, self.beats_per_bar)

    def clip(self, start, stop, offset=True):
        """Events within ``[start, stop)``, optionally re-offset to ``start``."""
        mask = (self.times >= start) & (self.times < stop)
        out = self.select(mask)
        if offset:
            out = out.shifted(-start)
        return out

    def shifted(self, delta):
        return BeatList(self.times + delta, self.positions, self.beats_per_bar)

    def tempi(self):
        """Local tempi [bpm] derived from inter-beat intervals."""
        if len(self.times) < 2:
            return np.zeros(0)
        return 60.0 / np.diff(self.times)


def infer_beats_per_bar(positions):
    """Largest metrical position seen, or ``None`` if there are none."""
    if positions is None or len(positions) == 0:
        return None
    return int(np.max(positions))


def load_beats(path, beats_per_bar=None):
    """
    Read a beat annotation file.

    Lines hold a time and an optional integer metrical position, separated by
    a tab, a comma or spaces. Blank lines and lines starting with ``#`` are
    skipped.

    Parameters
    ----------
    path : str or path-like
        Annotation file.
    beats_per_bar : int, optional
        Bar length; inferred from the largest position if omitted.

    Returns
    -------
    BeatList

    Raises
    ------
    AnnotationError
        If the file is missing or a line cannot be parsed. The message names
        the file and the offending line number.

    """
    path = os.fspath(path)
    try:
        with open(path, encoding='utf-8') as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise AnnotationError(f'{path}: cannot read annotation file '
                              f'({exc.strerror})') from exc
    times, positions = [], []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        fields = stripped.replace(',', ' ').replace('\t', ' ').split()
        try:
            times.append(float(fields[0]))
            if len(fields) > 1:
                pos = float(fields[1])
                if pos != int(pos):
                    raise ValueError(f'non-integer position {fields[1]!r}')
                positions.append(int(pos))
            else:
                positions.append(None)
        except (ValueError, IndexError) as exc:
            raise AnnotationError(f'{path}:{lineno}: {exc}') from exc
    has_pos = [p is not None for p in positions]
    if any(has_pos) and not all(has_pos):
        raise AnnotationError(f'{path}: position column present on some '
                              f'lines only')
    pos_arr = np.array(positions, dtype=int) if all(has_pos) and positions \
        else None
    order = np.argsort(times, kind='stable')
    times = np.asarray(times, dtype=float)[order]
    if pos_arr is not None:
        pos_arr = pos_arr[order]
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        dup = float(times[1:][np.diff(times) <= 0][0])
        raise AnnotationError(f'{path}: duplicate beat time {dup:.3f}')
    if beats_per_bar is None:
        beats_per_bar = infer_beats_per_bar(pos_arr)
    return BeatList(times, pos_arr, beats_per_bar)


def save_beats(beats, path):
    """Write ``beats`` as ``time<TAB>position`` lines (times to 6 decimals)."""
    with open(path, 'w', encoding='utf-8') as fh:
        for i, t in enumerate(beats.times):
            pos = '' if beats.positions is None else str(beats.positions[i])
            fh.write(f'{t:.6f}\t{pos}\n')
