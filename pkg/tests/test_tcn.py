import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from metertrack.beats import BeatList
from metertrack.tcn import (ActivationPair, AdamState, History, Snippet,
                            TcnConfig, TcnWeights, TrainSchedule, adam_step,
                            finetune, forward, gradients, init_weights,
                            load_weights, loss, mean_loss, save_weights,
                            targets_from_annotations, train_from_scratch)
from metertrack.tcn import LOSS_EPS, _forward

from oracles import central_difference, max_relative_error


def toy_config(seed=0, layers=3, channels=4, kernel=3, bands=5, dropout=0.0):
    return TcnConfig(n_layers=layers, base_channels=channels,
                     kernel_size=kernel,
                     dilations=tuple(2 ** i for i in range(layers)),
                     dropout_rate=dropout, seed=seed, n_bands=bands)


def toy_snippet(rng, n_frames=60, bands=5, period=12):
    beats = BeatList(np.arange(5, n_frames, period) / 100.0,
                     (np.arange(len(range(5, n_frames, period))) % 2) + 1, 2)
    feats = rng.normal(size=(n_frames, bands)) * 0.1
    feats[np.round(beats.times * 100).astype(int)] += 1.0
    return Snippet.from_annotations(feats, beats, 100.0)


def test_config_invariants():
    with pytest.raises(ValueError):
        TcnConfig(kernel_size=4)
    with pytest.raises(ValueError):
        TcnConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        TcnConfig(n_layers=2, dilations=(2, 1))
    with pytest.raises(ValueError):
        TrainSchedule(lr_factor=1.0)
    with pytest.raises(ValueError):
        TrainSchedule(max_epochs=10)


def test_init_deterministic_and_seeded():
    a, b = init_weights(TcnConfig()), init_weights(TcnConfig())
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = init_weights(TcnConfig(seed=1))
    assert any(not np.array_equal(a.params[k], c.params[k])
               for k in a.params if k.endswith('weight'))


def test_init_kernel_mean_near_zero():
    w = init_weights(TcnConfig())
    for name in ('layer0.weight', 'layer4.weight'):
        k = w.params[name].ravel()
        fan_in = w.params[name].shape[0] * w.params[name].shape[1]
        sigma = np.sqrt(2.0 / fan_in)
        assert abs(k.mean()) < 3 * sigma / np.sqrt(k.size)
        assert 0.8 * sigma < k.std() < 1.2 * sigma


def test_zero_weights_give_one_half():
    w = init_weights(TcnConfig()).map(np.zeros_like)
    acts = forward(w, np.random.default_rng(0).normal(size=(120, 81)))
    np.testing.assert_array_equal(acts.beat, 0.5)
    np.testing.assert_array_equal(acts.downbeat, 0.5)


@given(n=st.integers(50, 500))
@settings(max_examples=10)
def test_output_length_matches_input(n):
    w = init_weights(toy_config())
    acts = forward(w, np.ones((n, 5)))
    assert len(acts) == n and len(acts.downbeat) == n
    assert np.all((acts.beat > 0) & (acts.beat < 1))


def test_band_mismatch_raises():
    with pytest.raises(ValueError, match='shape'):
        forward(init_weights(toy_config()), np.ones((10, 6)))


def test_receptive_field_perturbation(rng):
    cfg = TcnConfig(n_layers=4, base_channels=6, kernel_size=5,
                    dilations=(1, 2, 4, 8), dropout_rate=0.0, n_bands=5)
    radius = sum(d * (cfg.kernel_size - 1) // 2 for d in cfg.dilations)
    assert cfg.receptive_field == radius
    w = init_weights(cfg)
    x = rng.normal(size=(200, 5))
    y = x.copy()
    y[100] += 5.0
    a, b = forward(w, x), forward(w, y)
    changed = np.flatnonzero((a.beat != b.beat) | (a.downbeat != b.downbeat))
    assert changed.min() >= 100 - radius and changed.max() <= 100 + radius
    assert changed.min() < 100 - radius + 5 and changed.max() > 100 + radius - 5


def test_translation_consistency(rng):
    cfg = toy_config(layers=3, kernel=5)
    radius = sum(d * 2 for d in cfg.dilations)
    w = init_weights(cfg)
    x = rng.normal(size=(150, 5))
    s = 7
    a = forward(w, x[s:]).beat
    b = forward(w, x).beat[s:]
    np.testing.assert_allclose(a[radius:-radius], b[radius:-radius],
                               rtol=1e-12)


def test_dropout_only_in_train_mode(rng):
    w = init_weights(toy_config(dropout=0.5))
    x = rng.normal(size=(40, 5))
    eval1, eval2 = forward(w, x), forward(w, x)
    np.testing.assert_array_equal(eval1.beat, eval2.beat)
    train = forward(w, x, train_mode=True, rng=np.random.default_rng(1))
    assert not np.array_equal(train.beat, eval1.beat)


def test_loss_examples(rng):
    n = 50
    targets = (rng.random((n, 2)) < 0.3).astype(float)
    mask = np.ones((n, 2))
    half = ActivationPair(np.full(n, 0.5), np.full(n, 0.5), 100.0)
    assert loss(half, targets, mask) == pytest.approx(np.log(2), abs=1e-12)
    eps = 1e-7
    perfect = ActivationPair(np.clip(targets[:, 0], eps, 1 - eps),
                             np.clip(targets[:, 1], eps, 1 - eps), 100.0)
    assert loss(perfect, targets, mask) <= 2 * -np.log(1 - eps)
    acts = ActivationPair(rng.uniform(0.05, 0.95, n),
                          rng.uniform(0.05, 0.95, n), 100.0)
    weights = rng.uniform(0.1, 1.0, (n, 2))
    assert loss(acts, targets, weights) == pytest.approx(
        loss(acts, targets, 2 * weights), rel=1e-12)
    with pytest.raises(ValueError):
        loss(acts, targets[:-1], mask[:-1])


@given(seed=st.integers(0, 10_000), layers=st.integers(1, 3),
       kernel=st.sampled_from([1, 3, 5]))
@settings(max_examples=8)
def test_gradients_match_finite_differences(seed, layers, kernel):
    rng = np.random.default_rng(seed)
    cfg = toy_config(seed=seed, layers=layers, kernel=kernel)
    w = init_weights(cfg).map(
        lambda a: 0.5 * (a + 0.1 * rng.normal(size=a.shape)))
    x = rng.normal(size=(24, 5))
    targets = (rng.random((24, 2)) < 0.3).astype(float)
    mask = rng.uniform(0.2, 1.0, (24, 2))
    # near saturation 1 - p keeps too few digits for central differences
    logits, _, _ = _forward(w, x, [None] * layers)
    assume(np.max(np.abs(logits)) < 8)
    analytic = gradients(w, x, targets, mask)

    def objective(params):
        return loss(forward(TcnWeights(cfg, params), x), targets, mask)

    numeric = central_difference(objective, w.params, 1e-5)
    assert max_relative_error(analytic.params, numeric) < 1e-4


def test_head_gradients_vanish_at_stationary_point(rng):
    # small weights keep activations away from the output clip
    w = init_weights(toy_config()).map(lambda a: 0.3 * a)
    x = rng.normal(size=(30, 5))
    acts = forward(w, x)
    targets = np.stack([acts.beat, acts.downbeat], axis=1)
    g = gradients(w, x, targets, np.ones((30, 2)))
    for name in ('beat.weight', 'beat.bias', 'downbeat.weight',
                 'downbeat.bias'):
        assert np.max(np.abs(g.params[name])) < 1e-9


def test_saturated_wrong_frames_keep_gradient():
    cfg = toy_config(layers=1, kernel=1, bands=1)
    w = init_weights(cfg).map(np.zeros_like)
    w.params['beat.bias'][...] = 30.0
    x = np.zeros((10, 1))
    mask = np.ones((10, 2))
    g = gradients(w, x, np.zeros((10, 2)), mask)
    # beat output sits beyond the clip yet is wrong, so it is pushed down
    assert g.params['beat.bias'] == pytest.approx(0.5, rel=1e-9)
    assert loss(forward(w, x), np.zeros((10, 2)), mask) == pytest.approx(
        0.5 * -np.log(LOSS_EPS) + 0.5 * np.log(2.0))


def test_masked_head_has_zero_gradient(rng):
    w = init_weights(toy_config())
    x = rng.normal(size=(30, 5))
    mask = np.ones((30, 2))
    mask[:, 1] = 0.0
    g = gradients(w, x, np.ones((30, 2)), mask)
    assert np.all(g.params['downbeat.weight'] == 0)
    assert g.params['downbeat.bias'] == 0
    assert np.any(g.params['beat.weight'] != 0)


def test_adam_zero_gradient_is_noop():
    w = init_weights(toy_config())
    new, state = adam_step(w, w.map(np.zeros_like), AdamState.zeros(w), 0.01)
    assert all(np.array_equal(new.params[k], w.params[k]) for k in w.params)
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    w = init_weights(toy_config())
    grads = w.map(lambda a: np.full_like(a, -0.3))
    new, _ = adam_step(w, grads, AdamState.zeros(w), 0.01)
    for k in w.params:
        np.testing.assert_allclose(new.params[k] - w.params[k], 0.01,
                                   rtol=1e-6)


def test_adam_deterministic(rng):
    w = init_weights(toy_config())
    grads = w.map(lambda a: rng.normal(size=a.shape))

    def run():
        cur, state = w, AdamState.zeros(w)
        for _ in range(3):
            cur, state = adam_step(cur, grads, state, 0.005)
        return cur

    a, b = run(), run()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in w.params)


def test_targets_examples():
    t, m = targets_from_annotations(BeatList([0.37]), 100.0, 100)
    assert t[37, 0] == 1 and m[37, 0] == 1
    t, m = targets_from_annotations(BeatList([]), 100.0, 50)
    assert np.all(t == 0) and np.all(m[:, 0] == 1)
    t, m = targets_from_annotations(BeatList([1.0], [1], 4), 100.0, 200)
    for k in (98, 99, 101, 102):
        assert m[k, 0] == 0.5 and t[k, 0] == 1
        assert m[k, 1] == 0.5
    assert m[100, 0] == 1 and m[97, 0] == 1 and t[97, 0] == 0
    t, m = targets_from_annotations(BeatList([0.5, 1.0], [2, 3], 4), 100.0,
                                    200)
    assert np.all(t[:, 1] == 0)
    with pytest.raises(ValueError, match='2.500'):
        targets_from_annotations(BeatList([0.5, 2.5]), 100.0, 200)


def test_schedule_defaults():
    s = TrainSchedule()
    assert (s.initial_lr, s.plateau_patience, s.lr_factor, s.max_epochs,
            s.early_stop_patience) == (0.005, 10, 0.2, 100, 20)
    assert TrainSchedule.finetune_default().initial_lr == 0.001


def test_training_rejects_empty_sets(rng):
    with pytest.raises(ValueError, match='non-empty'):
        train_from_scratch(toy_config(), train_set=[toy_snippet(rng)])


def test_overfit_single_snippet():
    rng = np.random.default_rng(0)
    snip = toy_snippet(rng)
    sched = TrainSchedule(initial_lr=0.01, plateau_patience=3,
                          early_stop_patience=4, max_epochs=10)
    _, hist = train_from_scratch(toy_config(channels=8), sched, [snip],
                                 [snip], max_epochs=6)
    losses = hist.train_losses[1:6]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_early_stop_and_best_epoch_reproduced():
    rng = np.random.default_rng(1)
    train = [toy_snippet(rng)]
    # validation on unrelated noise so the model stops improving
    val = [Snippet.from_annotations(rng.normal(size=(60, 5)),
                                    BeatList([0.1, 0.33], [1, 2], 2), 100.0)]
    sched = TrainSchedule(initial_lr=0.05, plateau_patience=2,
                          early_stop_patience=3, max_epochs=60)
    w, hist = train_from_scratch(toy_config(), sched, train, val)
    assert len(hist.epochs) - 1 < 60
    assert hist.val_losses[hist.best_epoch] == min(hist.val_losses[
        :hist.best_epoch + 1])
    assert mean_loss(w, val) == pytest.approx(
        hist.val_losses[hist.best_epoch], rel=1e-12)
    lrs = [e['lr'] for e in hist.epochs]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_finetune_contracts(rng, tmp_path):
    snip = toy_snippet(rng)
    pre = init_weights(toy_config())
    same, hist = finetune(pre, train_set=[snip], val_set=[snip], max_epochs=0)
    assert same is pre and hist.epochs == []
    tuned, hist = finetune(pre, train_set=[snip], val_set=[snip],
                           max_epochs=2)
    assert hist.val_losses[0] == mean_loss(pre, [snip])
    assert hist.epochs[0]['lr'] == 0.001
    with pytest.raises(ValueError, match='bands'):
        finetune(pre, train_set=[toy_snippet(rng, bands=6)], val_set=[snip])


def test_weights_and_history_round_trip(tmp_path):
    w = init_weights(toy_config(seed=4))
    save_weights(w, tmp_path / 'w.npz')
    back = load_weights(tmp_path / 'w.npz')
    assert back.config == w.config
    assert list(back.params) == list(w.params)
    assert all(np.array_equal(back.params[k], w.params[k]) for k in w.params)
    h = History()
    h.append(0, 0.5, 0.6, 0.005, 0)
    h.save_csv(tmp_path / 'h.csv')
    lines = (tmp_path / 'h.csv').read_text().splitlines()
    assert lines[0] == 'epoch,train_loss,val_loss,lr,n_snippets'
    assert len(lines) == 2
