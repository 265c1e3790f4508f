import csv
import json

import numpy as np
import pytest

from metertrack.beats import BeatList, load_beats, save_beats
from metertrack.cli import main, merge_positions
from metertrack.config import (ConfigError, config_from_dict, default_seed,
                               load_config)
from metertrack.manifest import DatasetManifest

from conftest import tiny_config_dict


def test_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.schedule.initial_lr == 0.005
    assert cfg.finetune_schedule.initial_lr == 0.001
    path = tmp_path / 'c.json'
    path.write_text(json.dumps({'tcn': {'dilations': [1, 2, 4],
                                        'n_layers': 3}}))
    assert load_config(path).tcn.dilations == (1, 2, 4)


@pytest.mark.parametrize('data, key', [
    ({'bogus': 1}, 'bogus'),
    ({'tcn': {'width': 3}}, 'tcn.width'),
    ({'bayes': {'seed': 3}}, 'bayes.seed'),
])
def test_unknown_keys_rejected(data, key):
    with pytest.raises(ConfigError, match=f'unknown key {key}'):
        config_from_dict(data)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({'tcn': {'kernel_size': 4}})


def test_seed_fallback(monkeypatch):
    monkeypatch.delenv('MT_SEED', raising=False)
    assert default_seed() == 0
    monkeypatch.setenv('MT_SEED', '17')
    assert default_seed() == 17 and default_seed(3) == 3
    monkeypatch.setenv('MT_SEED', 'x')
    with pytest.raises(ConfigError):
        default_seed()


def test_merge_positions():
    beats = BeatList([0.5, 1.0, 1.5, 2.0])
    bars = BeatList([0.51, 1.02, 1.49, 2.0], [2, 1, 2, 1], 2)
    out = merge_positions(beats, bars)
    np.testing.assert_array_equal(out.times, beats.times)
    np.testing.assert_array_equal(out.positions, [2, 1, 2, 1])


def _write_ann(path):
    save_beats(BeatList(np.arange(8) * 0.5 + 0.25, np.arange(8) % 4 + 1, 4),
               path)


def test_evaluate_identity(tmp_path, capsys):
    _write_ann(tmp_path / 'a.txt')
    for task in ('beat', 'downbeat'):
        assert main(['evaluate', '--est', str(tmp_path / 'a.txt'), '--ann',
                     str(tmp_path / 'a.txt'), '--task', task]) == 0
        assert capsys.readouterr().out.strip() == \
            'f=1.000 cmlt=1.000 amlt=1.000'


def test_error_line_and_exit_code(tmp_path, capsys):
    assert main(['evaluate', '--est', str(tmp_path / 'none.txt'),
                 '--ann', str(tmp_path / 'none.txt')]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith('error: ')
    (tmp_path / 'bad.json').write_text('{"nope": 1}')
    _write_ann(tmp_path / 'a.txt')
    assert main(['--config', str(tmp_path / 'bad.json'), 'evaluate',
                 '--est', str(tmp_path / 'a.txt'),
                 '--ann', str(tmp_path / 'a.txt')]) == 1
    assert 'unknown key nope' in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(['train', '--model', 'svm'])
    assert exc.value.code == 2


@pytest.fixture
def tiny_cfg_file(tmp_path, tiny_config):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(tiny_config_dict(tiny_config.pretrained)))
    return str(path)


def test_train_track_evaluate_round_trip(tmp_path, tiny_suite,
                                         tiny_cfg_file, capsys):
    model = str(tmp_path / 'bayes.json')
    assert main(['--config', tiny_cfg_file, 'train', '--model', 'bayes',
                 '--manifest', str(tiny_suite), '--subset', '4',
                 '--seed', '0', '--out', model]) == 0
    man = DatasetManifest.load(str(tiny_suite))
    tid, audio, ann = man.entries[0]
    est = str(tmp_path / 'est.txt')
    assert main(['--config', tiny_cfg_file, 'track', '--model', model,
                 '--audio', man.resolve(audio), '--out', est]) == 0
    beats = load_beats(est)
    assert len(beats) > 0 and beats.has_positions
    copy = str(tmp_path / 'copy.txt')
    save_beats(beats, copy)
    assert open(copy).read() == open(est).read()
    capsys.readouterr()
    assert main(['evaluate', '--est', est, '--ann', copy]) == 0
    assert capsys.readouterr().out.strip() == 'f=1.000 cmlt=1.000 amlt=1.000'
    assert main(['evaluate', '--est', est, '--ann', man.resolve(ann)]) == 0
    f = float(capsys.readouterr().out.split()[0].split('=')[1])
    assert f > 0.5


def test_track_with_tcn(tmp_path, tiny_suite, tiny_config, tiny_cfg_file):
    man = DatasetManifest.load(str(tiny_suite))
    est = str(tmp_path / 'est.txt')
    assert main(['--config', tiny_cfg_file, 'track', '--model',
                 tiny_config.pretrained, '--audio',
                 man.resolve(man.entries[0][1]), '--out', est,
                 '--beats-per-bar', '2', '--min-bpm', '60',
                 '--max-bpm', '140']) == 0
    beats = load_beats(est)
    assert beats.beats_per_bar in (None, 2)
    assert np.all(np.isin(beats.positions, [1, 2]))


def test_experiment_row_counts(tmp_path, tiny_suite, tiny_cfg_file,
                               monkeypatch):
    monkeypatch.delenv('MT_SEED', raising=False)
    out = tmp_path / 'exp'
    assert main(['--config', tiny_cfg_file, 'experiment', '--manifest',
                 str(tiny_suite), '--strategies', 'bayes,fs', '--subsets',
                 '2,8', '--seeds', '2', '--out', str(out)]) == 0
    with open(out / 'runs.csv') as f:
        rows = list(csv.DictReader(f))
    for task in ('beat', 'downbeat'):
        assert sum(r['task'] == task for r in rows) == 8
    assert all(r['status'] == 'ok' for r in rows)


def test_profile_and_synth_commands(tmp_path, tiny_suite, tiny_cfg_file,
                                   capsys):
    out = tmp_path / 'prof'
    assert main(['profile', '--manifest', str(tiny_suite), '--out',
                 str(out)]) == 1
    assert 'no excerpts of 30 s' in capsys.readouterr().err
    assert main(['--config', tiny_cfg_file, 'profile', '--manifest', str(tiny_suite), '--out', str(out),
                 '--raw']) == 0
    with open(out / 'profile.csv') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 16
    low = [r for r in rows if r['band'] == rows[0]['band']]
    assert max(low, key=lambda r: float(r['median']))['tatum'] == '5'
    assert (out / 'profile_raw.csv').exists()
    assert main(['synth', '--suite', 'ballroom_like', '--out',
                 str(tmp_path / 's'), '--n-excerpts', '2', '--duration',
                 '4', '--sample-rate', '8000']) == 0
    assert len(DatasetManifest.load(str(tmp_path / 's' /
                                        'manifest.json')).entries) == 2
