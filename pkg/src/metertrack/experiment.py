"""
Small-data adaptation protocol.

Recordings are cut into 30 s excerpts, split 80/20 into train and test, and
models are trained on nested subsets of the training excerpts, using only a
10 s region at the start of each (5 s train + 5 s validation for the TCN,
all 10 s for the bar pointer model). Test excerpts are tracked uncut. Every
snippet carries the track id of its excerpt so leakage can be audited.

Strategies:

``FS``
    TCN trained from scratch.
``FT``
    TCN fine-tuned from a pretrained checkpoint.
``FSA``, ``FTA``
    As above, with five frame-rate variants of every training snippet.
``BAYES``
    Bar pointer model with GMM observations.

"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import (BAYES_BANDS, frame_rate_variants, load_wav,
                    onset_envelope, tcn_features)
from .bayesbeat import bayes_track, bayes_train
from .beats import load_beats
from .config import ExperimentConfig
from .decoders import dbn_beat_decode, dbn_downbeat_decode
from .evaluation import bootstrap_summary, evaluate
from .manifest import DatasetManifest
from .tcn import Snippet, finetune, forward, load_weights, train_from_scratch

log = logging.getLogger(__name__)

STRATEGIES = ('FS', 'FT', 'FSA', 'FTA', 'BAYES')
SUBSET_SIZES = (4, 9, 18, 37, 55, 74)
TASKS = ('beat', 'downbeat')
METRICS = ('f', 'cmlt', 'amlt')


class CheckpointError(FileNotFoundError):
    pass


# data

@dataclass(frozen=True, eq=False)
class Excerpt:
    """
    Audio with annotations; ``span`` locates it inside the excerpt
    ``track_id`` (seconds) and keys the feature cache.
    """

    track_id: str
    audio: object
    beats: object
    span: tuple = (0.0, None)

    def __iter__(self):
        return iter((self.audio, self.beats))

    @property
    def duration(self):
        return self.audio.duration

    def clip(self, start, stop):
        base = self.span[0]
        return Excerpt(self.track_id, self.audio.segment(start, stop),
                       self.beats.clip(start, stop),
                       (base + start, base + stop))


def excerpt_bounds(duration, excerpt_seconds=30.0):
    """
    Non-overlapping excerpt windows of a recording; the remainder is dropped.

    A recording only slightly shorter than one excerpt (by up to 0.5 s, as
    with the "about 30 s" tracks of some collections) is kept whole.
    """
    n = int(np.floor((duration + 0.5) / excerpt_seconds))
    if n == 0:
        return []
    return [(k * excerpt_seconds, min((k + 1) * excerpt_seconds, duration))
            for k in range(n)]


def load_dataset(manifest, excerpt_seconds=30.0, max_excerpts=93, seed=0):
    """
    Excerpts of every manifest entry.

    Excerpts with fewer than two annotated beats are dropped. When more than
    ``max_excerpts`` remain, a seeded sample of that size is taken (kept in
    manifest order).

    Raises
    ------
    AnnotationError
        For a missing or unparsable annotation file (naming file and line).

    """
    if isinstance(manifest, (str, os.PathLike)):
        manifest = DatasetManifest.load(manifest)
    excerpts = []
    for tid, audio_path, ann_path in manifest.entries:
        beats = load_beats(manifest.resolve(ann_path), manifest.meter)
        audio = load_wav(manifest.resolve(audio_path))
        bounds = excerpt_bounds(audio.duration, excerpt_seconds)
        single = len(bounds) == 1
        for k, (start, stop) in enumerate(bounds):
            name = tid if single else f'{tid}#{k}'
            ex = Excerpt(name, audio, beats).clip(start, stop)
            ex = Excerpt(name, ex.audio, ex.beats)
            if len(ex.beats) < 2:
                log.info('dropping %s: fewer than two beats', name)
                continue
            excerpts.append(ex)
    if max_excerpts is not None and len(excerpts) > max_excerpts:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(excerpts), max_excerpts, replace=False))
        excerpts = [excerpts[i] for i in keep]
    return excerpts


def split_train_test(excerpts, seed=0, train_fraction=0.8):
    """Seeded shuffle, then the first ``round(0.8 n)`` excerpts train."""
    if len(excerpts) < 5:
        raise ValueError('need at least 5 excerpts to split')
    order = np.random.default_rng(seed).permutation(len(excerpts))
    n_train = int(round(train_fraction * len(excerpts)))
    train = [excerpts[i] for i in order[:n_train]]
    test = [excerpts[i] for i in order[n_train:]]
    return train, test


@dataclass(frozen=True)
class SubsetSpec:
    """
    ``n_tracks`` training excerpts (or ``'all'``) in the order given by
    ``seed``; snippets of ``snippet_seconds`` split evenly into train and
    validation parts.
    """

    n_tracks: int | str
    seed: int = 0
    snippet_seconds: float = 10.0

    def __post_init__(self):
        if self.n_tracks != 'all' and (not isinstance(self.n_tracks, int)
                                       or self.n_tracks < 1):
            raise ValueError("n_tracks must be a positive int or 'all'")

    @property
    def label(self):
        return str(self.n_tracks)

    @property
    def is_all(self):
        return self.n_tracks == 'all'


def subset_order(train, spec):
    """Seeded order of the training excerpts; subsets are its prefixes."""
    return np.random.default_rng(spec.seed).permutation(len(train))


def subset_minutes(spec, train):
    """Annotated minutes of audio used for training (and validation)."""
    if spec.is_all:
        return sum(e.duration for e in train) / 60.0
    return spec.n_tracks * spec.snippet_seconds / 60.0


def make_snippets(train, spec, mode='tcn', val_fraction=0.25):
    """
    Training material of a subset.

    Returns
    -------
    (train parts, val parts) for ``mode='tcn'``, a single list for
    ``mode='bayes'``. Subset mode takes the first ``snippet_seconds`` of each
    selected excerpt (TCN: first half trains, second half validates).
    ``'all'`` mode uses whole excerpts; the TCN validates on the last
    ``val_fraction`` of them.
    """
    order = subset_order(train, spec)
    if spec.is_all:
        chosen = [train[i] for i in order]
        if mode == 'bayes':
            return chosen
        n_val = max(int(round(val_fraction * len(chosen))), 1)
        return chosen[:-n_val], chosen[-n_val:]
    if spec.n_tracks > len(train):
        raise ValueError(f'subset of {spec.n_tracks} tracks exceeds the '
                         f'{len(train)} training excerpts')
    chosen = [train[i] for i in order[:spec.n_tracks]]
    length = spec.snippet_seconds
    for ex in chosen:
        if ex.duration < length - 1e-9:
            raise ValueError(f'excerpt {ex.track_id} is shorter than '
                             f'{length:g} s')
    if mode == 'bayes':
        return [ex.clip(0.0, length) for ex in chosen]
    if mode != 'tcn':
        raise ValueError(f'unknown snippet mode {mode!r}')
    half = length / 2
    return ([ex.clip(0.0, half) for ex in chosen],
            [ex.clip(half, length) for ex in chosen])


@dataclass(frozen=True, eq=False)
class PreparedDataset:
    name: str
    meter: int
    train: list
    test: list


def prepare_dataset(manifest, config=ExperimentConfig()):
    if isinstance(manifest, (str, os.PathLike)):
        manifest = DatasetManifest.load(manifest)
    p = config.protocol
    excerpts = load_dataset(manifest, p.excerpt_seconds, p.max_excerpts,
                            p.split_seed)
    train, test = split_train_test(excerpts, p.split_seed, p.train_fraction)
    return PreparedDataset(manifest.dataset_name, manifest.meter, train, test)


class FeatureCache:
    """Memoised features per excerpt span and frame rate."""

    def __init__(self):
        self._store = {}

    def tcn(self, excerpt, fps):
        key = ('tcn', excerpt.track_id, excerpt.span, fps)
        hit = self._store.get(key)
        if hit is None:
            feats, actual = tcn_features(excerpt.audio, fps)
            hit = self._store[key] = (feats.astype(np.float32), actual)
        return hit[0].astype(float), hit[1]

    def envelope(self, excerpt, fps):
        key = ('env', excerpt.track_id, excerpt.span, fps)
        hit = self._store.get(key)
        if hit is None:
            hit = self._store[key] = onset_envelope(excerpt.audio, fps,
                                                    BAYES_BANDS)
        return hit


# running

@dataclass(eq=False)
class RunRecord:
    strategy: str
    subset: str
    subset_minutes: float
    seed: int
    train_seconds: float = 0.0
    infer_seconds: float = 0.0
    metrics: dict = field(default_factory=dict)   # (track_id, task) -> report
    train_ids: tuple = ()
    test_ids: tuple = ()
    snippets_per_epoch: tuple = ()
    status: str = 'ok'

    @property
    def ok(self):
        return self.status == 'ok'


def _tcn_tracker(weights, config, dataset, cache):
    fps = config.features.frame_rate
    dec = config.decoder
    tempo_range = dec.tempo_range(dataset.name)
    options = dec.options(dataset.meter)

    def track(ex):
        feats, actual = cache.tcn(ex, fps)
        acts = forward(weights, feats, frame_rate=actual)
        beats = dbn_beat_decode(acts.beat, actual, tempo_range, dec.num_tempi,
                                dec.tempo_change_prob, dec.observation_lambda)
        bars = dbn_downbeat_decode(acts.beat, acts.downbeat, actual, options,
                                   tempo_range, dec.num_tempi,
                                   dec.tempo_change_prob,
                                   dec.observation_lambda)
        return beats, bars
    return track


def load_pretrained(config):
    path = config.pretrained_path()
    if not os.path.exists(path):
        raise CheckpointError(f'pretrained checkpoint not found: {path}')
    weights = load_weights(path)
    mine, theirs = config.tcn, weights.config
    if (mine.n_layers, mine.base_channels, mine.kernel_size, mine.dilations,
            mine.n_bands) != (theirs.n_layers, theirs.base_channels,
                              theirs.kernel_size, theirs.dilations,
                              theirs.n_bands):
        raise CheckpointError(f'{path}: architecture does not match the '
                              f'configured TCN')
    return weights


@dataclass(eq=False)
class FitResult:
    strategy: str
    model: object               # BarPointerModel or TcnWeights
    history: object             # tcn.History, None for BAYES
    train_seconds: float
    used_ids: tuple             # track ids of training + validation data
    snippets_per_epoch: tuple = ()


def fit_strategy(strategy, subset, dataset, config, cache=None):
    """
    Train one strategy on one subset; only the training call is timed.

    Raises
    ------
    CheckpointError
        If FT/FTA cannot find a compatible pretrained checkpoint.

    """
    strategy = strategy.upper()
    if strategy not in STRATEGIES:
        raise ValueError(f'unknown strategy {strategy!r}')
    cache = cache or FeatureCache()
    fps = config.features.frame_rate
    if strategy == 'BAYES':
        parts = make_snippets(dataset.train, subset, 'bayes',
                              config.protocol.all_val_fraction)
        data = [(cache.envelope(p, fps), p.beats) for p in parts]
        bayes_cfg = replace(config.bayes, seed=subset.seed, frame_rate=fps)
        t0 = time.perf_counter()
        model = bayes_train(data, dataset.meter, bayes_cfg)
        elapsed = time.perf_counter() - t0
        return FitResult(strategy, model, None, elapsed,
                         tuple(p.track_id for p in parts))

    pretrained = load_pretrained(config) if strategy in ('FT', 'FTA') \
        else None
    train_parts, val_parts = make_snippets(dataset.train, subset, 'tcn',
                                           config.protocol.all_val_fraction)
    rates = frame_rate_variants(fps) if strategy.endswith('A') else [fps]
    train_set = []
    for part in train_parts:
        for rate in rates:
            feats, actual = cache.tcn(part, rate)
            train_set.append(Snippet.from_annotations(feats, part.beats,
                                                      actual, part.track_id))
    val_set = []
    for part in val_parts:
        feats, actual = cache.tcn(part, fps)
        val_set.append(Snippet.from_annotations(feats, part.beats, actual,
                                                part.track_id))
    t0 = time.perf_counter()
    if pretrained is None:
        weights, history = train_from_scratch(
            replace(config.tcn, seed=subset.seed), config.schedule,
            train_set, val_set)
    else:
        weights, history = finetune(pretrained, config.finetune_schedule,
                                    train_set, val_set, seed=subset.seed)
    elapsed = time.perf_counter() - t0
    used = tuple(s.track_id for s in train_set + val_set)
    per_epoch = tuple(e['n_snippets'] for e in history.epochs[1:])
    return FitResult(strategy, weights, history, elapsed, used, per_epoch)


def make_tracker(fit, dataset, config, cache):
    """Callable mapping an :class:`Excerpt` to ``(beats, bars)``."""
    fps = config.features.frame_rate
    if fit.strategy == 'BAYES':
        def track(ex):
            est = bayes_track(fit.model, cache.envelope(ex, fps))
            return est, est
        return track
    return _tcn_tracker(fit.model, config, dataset, cache)


def run_strategy(strategy, subset, dataset, config=ExperimentConfig(),
                 cache=None):
    """
    Train ``strategy`` on ``subset`` and evaluate every test excerpt uncut.

    ``dataset`` is a :class:`PreparedDataset` or a manifest (path).

    Returns
    -------
    RunRecord

    Raises
    ------
    CheckpointError
        If FT/FTA cannot find a compatible pretrained checkpoint.

    """
    if not isinstance(dataset, PreparedDataset):
        dataset = prepare_dataset(dataset, config)
    cache = cache or FeatureCache()
    strategy = strategy.upper()
    fit = fit_strategy(strategy, subset, dataset, config, cache)
    track = make_tracker(fit, dataset, config, cache)
    record = RunRecord(strategy, subset.label,
                       subset_minutes(subset, dataset.train), subset.seed,
                       fit.train_seconds, 0.0, {},
                       tuple(sorted(set(fit.used_ids))),
                       tuple(ex.track_id for ex in dataset.test),
                       fit.snippets_per_epoch)
    infer = 0.0
    for ex in dataset.test:
        # features are computed outside the timed region
        if strategy == 'BAYES':
            cache.envelope(ex, config.features.frame_rate)
        else:
            cache.tcn(ex, config.features.frame_rate)
        t0 = time.perf_counter()
        beats, bars = track(ex)
        infer += time.perf_counter() - t0
        record.metrics[(ex.track_id, 'beat')] = evaluate(beats, ex.beats,
                                                         'beat')
        if ex.beats.has_positions:
            record.metrics[(ex.track_id, 'downbeat')] = evaluate(
                bars, ex.beats, 'downbeat')
    record.infer_seconds = infer
    return record


# matrix

_WORKER = {}


def _init_worker(manifest, config):
    _WORKER['dataset'] = prepare_dataset(manifest, config)
    _WORKER['config'] = config
    _WORKER['cache'] = FeatureCache()


def _run_cell(cell):
    strategy, n_tracks, seed = cell
    dataset, config = _WORKER['dataset'], _WORKER['config']
    subset = SubsetSpec(n_tracks, seed, config.protocol.snippet_seconds)
    try:
        return run_strategy(strategy, subset, dataset, config,
                            _WORKER['cache'])
    except Exception as exc:   # recorded per cell, the matrix continues
        log.warning('cell %s failed: %s', cell, exc)
        minutes = subset_minutes(subset, dataset.train) \
            if subset.is_all or n_tracks <= len(dataset.train) else 0.0
        return RunRecord(strategy.upper(), subset.label, minutes, seed,
                         test_ids=tuple(ex.track_id for ex in dataset.test),
                         status=f'error: {type(exc).__name__}: {exc}')


def run_matrix(manifest, strategies=STRATEGIES, subsets=SUBSET_SIZES,
               seeds=range(10), config=ExperimentConfig(), out_dir=None,
               workers=1):
    """
    Every (strategy, subset, seed) cell, optionally written to ``out_dir``.

    With ``workers > 1`` cells run in separate processes, each cell on a
    single worker; the worker count is written next to the timings.

    Returns
    -------
    list of RunRecord
        In cell order (strategy, subset, seed).

    """
    cells = [(s.upper(), n, int(seed)) for s, n, seed in
             itertools.product(strategies, subsets, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(manifest, config)) as pool:
            records = list(pool.map(_run_cell, cells))
    else:
        _init_worker(manifest, config)
        try:
            records = [_run_cell(c) for c in cells]
        finally:
            _WORKER.clear()
    if out_dir is not None:
        write_outputs(records, out_dir, config, workers)
    return records


# audit and outputs

@dataclass
class LeakageAudit:
    cells: int
    violations: list

    @property
    def ok(self):
        return not self.violations

    def to_json(self):
        return {'cells': self.cells, 'violations': self.violations,
                'ok': self.ok}


def audit_leakage(records, test_ids=None):
    """
    Check that no test excerpt fed any training or validation set, and that
    every successful cell scored every test excerpt.
    """
    violations = []
    for r in records:
        cell = f'{r.strategy}/{r.subset}/{r.seed}'
        tests = set(r.test_ids if test_ids is None else test_ids)
        if test_ids is not None and set(r.test_ids) != tests:
            violations.append(f'{cell}: test set differs')
        leaked = sorted(set(r.train_ids) & tests)
        if leaked:
            violations.append(f'{cell}: test tracks used in training: '
                              + ', '.join(leaked))
        if r.ok:
            scored = {tid for tid, task in r.metrics if task == 'beat'}
            if scored != tests:
                violations.append(f'{cell}: {len(scored)} of {len(tests)} '
                                  f'test tracks scored')
    return LeakageAudit(len(records), violations)


def _metric_values(report):
    return {'f': report.f_measure, 'cmlt': report.cmlt, 'amlt': report.amlt}


def write_outputs(records, out_dir, config=ExperimentConfig(), workers=1):
    """
    Write the result tables.

    ``results.csv`` (per track and task) and ``runs.csv`` (per cell and
    task, means over test tracks) hold only seeded quantities and are
    byte-reproducible; wall times go to ``plotdata_time.csv``.
    """
    os.makedirs(out_dir, exist_ok=True)
    minutes = {}
    with open(os.path.join(out_dir, 'results.csv'), 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(['strategy', 'subset', 'subset_minutes', 'seed',
                    'track_id', 'task', 'f', 'cmlt', 'amlt'])
        for r in records:
            minutes[(r.strategy, r.subset)] = r.subset_minutes
            for (tid, task), rep in sorted(r.metrics.items()):
                w.writerow([r.strategy, r.subset, f'{r.subset_minutes:.2f}',
                            r.seed, tid, task, f'{rep.f_measure:.6f}',
                            f'{rep.cmlt:.6f}', f'{rep.amlt:.6f}'])
    with open(os.path.join(out_dir, 'runs.csv'), 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(['strategy', 'subset', 'subset_minutes', 'seed', 'task',
                    'f', 'cmlt', 'amlt', 'n_tracks', 'status'])
        for r in records:
            for task in TASKS:
                reps = [v for (_, t), v in sorted(r.metrics.items())
                        if t == task]
                if not reps and r.ok:
                    continue
                means = [np.mean([_metric_values(x)[m] for x in reps])
                         if reps else float('nan') for m in METRICS]
                w.writerow([r.strategy, r.subset, f'{r.subset_minutes:.2f}',
                            r.seed, task] + [f'{v:.6f}' for v in means]
                           + [len(reps), r.status])
    with open(os.path.join(out_dir, 'plotdata_time.csv'), 'w',
              newline='') as f:
        w = csv.writer(f)
        w.writerow(['strategy', 'subset', 'subset_minutes', 'seed',
                    'train_seconds', 'infer_seconds', 'workers'])
        for r in records:
            w.writerow([r.strategy, r.subset, f'{r.subset_minutes:.2f}',
                        r.seed, f'{r.train_seconds:.6f}',
                        f'{r.infer_seconds:.6f}', workers])
    summary = summarize(records, config.protocol.bootstrap_resamples)
    with open(os.path.join(out_dir, 'plotdata_perf.csv'), 'w',
              newline='') as f:
        w = csv.writer(f)
        w.writerow(['strategy', 'subset', 'subset_minutes', 'task', 'metric',
                    'mean', 'ci_low', 'ci_high', 'n'])
        for (strategy, subset, task, metric), s in summary.items():
            w.writerow([strategy, subset,
                        f'{minutes[(strategy, subset)]:.2f}', task, metric,
                        f'{s.mean:.6f}', f'{s.ci_low:.6f}',
                        f'{s.ci_high:.6f}', s.n])
    write_table(summary, minutes, os.path.join(out_dir, 'summary.csv'))
    audit = audit_leakage(records)
    with open(os.path.join(out_dir, 'audit.json'), 'w') as f:
        json.dump(audit.to_json(), f, indent=2)
        f.write('\n')
    return audit


def summarize(records, n_resamples=1000, seed=0):
    """Bootstrap means per (strategy, subset, task, metric), pooled seeds."""
    groups = {}
    for r in records:
        for (tid, task), rep in r.metrics.items():
            for m, v in _metric_values(rep).items():
                groups.setdefault((r.strategy, r.subset, task, m),
                                  []).append(v)
    result = bootstrap_summary(groups, n_resamples, seed=seed)
    return dict(sorted(result.items(), key=lambda kv: _order(kv[0])))


def _order(key):
    strategy, subset, task, metric = key
    s = STRATEGIES.index(strategy) if strategy in STRATEGIES else 99
    n = float('inf') if subset == 'all' else int(subset)
    return (s, n, TASKS.index(task), METRICS.index(metric))


def write_table(summary, minutes, path):
    """Rows per model (strategy + minutes), F/CMLt/AMLt per task."""
    rows = {}
    for (strategy, subset, task, metric), s in summary.items():
        label = 'all' if subset == 'all' else \
            f'{minutes[(strategy, subset)]:.2f}'
        row = rows.setdefault((strategy, subset),
                              {'model': f'{strategy}_{label}'})
        row[f'{task}_{metric}'] = f'{s.mean:.4f}'
        row[f'{task}_{metric}_ci'] = f'{s.ci_low:.4f}-{s.ci_high:.4f}'
    columns = ['model'] + [f'{t}_{m}{suffix}' for t in TASKS for m in
                           ('f', 'cmlt', 'amlt') for suffix in ('', '_ci')]
    with open(path, 'w', newline='') as f:
        w = csv.DictWriter(f, columns, restval='')
        w.writeheader()
        for key in sorted(rows, key=lambda k: _order(k + ('beat', 'f'))):
            w.writerow(rows[key])
