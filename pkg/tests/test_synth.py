import hashlib

import numpy as np
import pytest

from metertrack.manifest import DatasetManifest
from metertrack.synth import (RhythmSpec, Stroke, beat_times, generate,
                              make_suite, suite_spec)


def test_constant_tempo_two_four():
    spec = RhythmSpec(2, 120.0, (Stroke(0, 'low', 1.0, 1.0),), 8)
    audio, beats = generate(spec, 8000)
    assert len(beats) == 16
    assert beats.times[0] == 0.0
    np.testing.assert_allclose(np.diff(beats.times), 0.5, atol=1e-12)
    assert np.max(np.abs(audio.samples)) <= 1.0


def test_tempo_drift_shortens_intervals():
    spec = RhythmSpec(4, 120.0, (), 6, tempo_end_bpm=130.0)
    assert np.all(np.diff(np.diff(beat_times(spec))) < 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        RhythmSpec(2, -1.0, (), 4)
    with pytest.raises(ValueError):
        Stroke(0, 'low', 1.5, 1.0)
    with pytest.raises(ValueError):
        RhythmSpec(2, 100.0, (Stroke(8, 'low', 1.0, 1.0),), 4)


@pytest.mark.parametrize('kind', ['samba_like', 'candombe_like',
                                  'ballroom_like'])
def test_suite_ground_truth(kind):
    spec = suite_spec(kind, 2, seed=1, duration=10.0)
    audio, beats = generate(spec, 16000)
    B = spec.beats_per_bar
    assert beats.beats_per_bar == B
    expected = (beats.positions[0] - 1 + np.arange(len(beats))) % B + 1
    np.testing.assert_array_equal(beats.positions, expected)
    assert np.max(np.abs(audio.samples)) <= 1.0
    assert 0 <= beats.times[0] and beats.times[-1] <= audio.duration


def test_suite_tempo_statistics():
    for i in range(5):
        _, samba = generate(suite_spec('samba_like', i, duration=10.0), 8000)
        assert np.std(samba.tempi()) < 1.0
        _, cand = generate(suite_spec('candombe_like', i, duration=10.0),
                           8000)
        assert cand.tempi()[-1] > cand.tempi()[0]


def test_generate_deterministic():
    spec = suite_spec('samba_like', 0, duration=5.0)
    a, _ = generate(spec, 8000)
    b, _ = generate(spec, 8000)
    np.testing.assert_array_equal(a.samples, b.samples)


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.iterdir()):
        if p.name != 'manifest.json':
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_suite_byte_identical(tmp_path):
    make_suite('candombe_like', str(tmp_path / 'a'), 3, 6.0, 5, 8000)
    make_suite('candombe_like', str(tmp_path / 'b'), 3, 6.0, 5, 8000)
    assert _digest(tmp_path / 'a') == _digest(tmp_path / 'b')
    man = DatasetManifest.load(str(tmp_path / 'a' / 'manifest.json'))
    assert man.meter == 4 and len(man.entries) == 3
