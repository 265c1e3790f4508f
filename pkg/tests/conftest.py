import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metertrack.synth import generate, suite_spec

settings.register_profile(
    'default', deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile('default')


@pytest.fixture(scope='session')
def samba_excerpt():
    """A 12 s samba-like excerpt (audio, beats) at 22.05 kHz."""
    spec = suite_spec('samba_like', 0, seed=3, duration=12.0)
    return generate(spec, sample_rate=22050)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config_dict(pretrained, excerpt_seconds=12.0, max_epochs=4):
    """Settings small enough for whole-matrix runs in tests."""
    return {
        'tcn': {'n_layers': 2, 'base_channels': 4, 'kernel_size': 3,
                'dilations': [1, 2], 'dropout_rate': 0.1},
        'schedule': {'max_epochs': max_epochs, 'plateau_patience': 1,
                     'early_stop_patience': 2},
        'finetune_schedule': {'max_epochs': max_epochs,
                              'plateau_patience': 1,
                              'early_stop_patience': 2, 'initial_lr': 0.001},
        'bayes': {'n_positions': 320, 'max_tempo_states': 4},
        'decoder': {'num_tempi': 8},
        'protocol': {'excerpt_seconds': excerpt_seconds,
                     'bootstrap_resamples': 50},
        'pretrained': str(pretrained),
    }


@pytest.fixture(scope='session')
def tiny_suite(tmp_path_factory):
    """Ten 12 s samba-like recordings on disk; returns the manifest path."""
    from metertrack.synth import make_suite
    out = tmp_path_factory.mktemp('tiny_suite')
    make_suite('samba_like', str(out), n_excerpts=10, duration=12.0, seed=0,
               sample_rate=22050)
    return out / 'manifest.json'


@pytest.fixture(scope='session')
def tiny_config(tmp_path_factory):
    from metertrack.config import config_from_dict
    from metertrack.tcn import TcnConfig, init_weights, save_weights
    path = tmp_path_factory.mktemp('ckpt') / 'tiny.npz'
    save_weights(init_weights(TcnConfig(n_layers=2, base_channels=4,
                                        kernel_size=3, dilations=(1, 2),
                                        seed=99)), path)
    return config_from_dict(tiny_config_dict(path))


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line per acceptance criterion."""
    def record(number, title, ok, detail=''):
        line = f'criterion {number:>2} {"PASS" if ok else "FAIL"}: {title}'
        if detail:
            line += f' ({detail})'
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
