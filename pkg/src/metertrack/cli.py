"""
Command line interface.

Subcommands: ``synth``, ``train``, ``track``, ``evaluate``, ``experiment``
and ``profile``. On failure a single line ``error: <Type>: <message>`` goes
to stderr and the exit code is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .audio import (PROFILE_BANDS, load_wav, normalize_local, onset_envelope,
                    tcn_features)
from .bayesbeat import MODEL_FORMAT, bayes_track, load_model, save_model
from .beats import BeatList, TempoRange, load_beats, save_beats
from .config import default_seed, load_config
from .decoders import dbn_beat_decode, dbn_downbeat_decode
from .evaluation import evaluate
from .experiment import (STRATEGIES, SubsetSpec, audit_leakage,
                         fit_strategy, load_dataset, prepare_dataset,
                         run_matrix)
from .manifest import DatasetManifest
from .profile import (compute_profile, profile_stats, save_profile_csv,
                      save_profile_raw_csv)
from .synth import SUITES, make_suite
from .tcn import forward, load_weights, save_weights

log = logging.getLogger('metertrack')


class CliError(Exception):
    pass


def _subset(value):
    if value == 'all':
        return 'all'
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count or 'all', "
                                         f"got {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError('subset must be positive')
    return n


def _csv_list(convert):
    def parse(value):
        try:
            return [convert(v) for v in value.split(',') if v]
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def build_parser():
    parser = argparse.ArgumentParser(
        prog='metertrack',
        description='Beat and downbeat tracking with small training sets.')
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('--config', help='JSON config file')
    parser.add_argument('--log-level', default='WARNING')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='write a synthetic corpus')
    p.add_argument('--suite', required=True, choices=SUITES)
    p.add_argument('--out', required=True)
    p.add_argument('--n-excerpts', type=int, default=93)
    p.add_argument('--duration', type=float, default=30.0)
    p.add_argument('--sample-rate', type=int, default=44100)
    p.add_argument('--seed', type=int)

    p = sub.add_parser('train', help='train a model on a subset')
    p.add_argument('--model', required=True, choices=('tcn', 'bayes'))
    p.add_argument('--strategy', default='fs',
                   choices=('fs', 'ft', 'fsa', 'fta'))
    p.add_argument('--manifest', required=True)
    p.add_argument('--subset', type=_subset, default='all')
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True)
    p.add_argument('--history', help='write the TCN training history CSV')

    p = sub.add_parser('track', help='track beats and downbeats')
    p.add_argument('--model', required=True)
    p.add_argument('--audio', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--min-bpm', type=float)
    p.add_argument('--max-bpm', type=float)
    p.add_argument('--beats-per-bar', type=_csv_list(int),
                   help='comma-separated options for the TCN bar decoder')

    p = sub.add_parser('evaluate', help='score estimates against annotations')
    p.add_argument('--est', required=True)
    p.add_argument('--ann', required=True)
    p.add_argument('--task', default='beat', choices=('beat', 'downbeat'))

    p = sub.add_parser('experiment', help='run the strategy/subset matrix')
    p.add_argument('--manifest', required=True)
    p.add_argument('--strategies', type=_csv_list(str),
                   default=list(STRATEGIES))
    p.add_argument('--subsets', type=_csv_list(_subset),
                   default=[4, 9, 18, 37, 55, 74])
    p.add_argument('--seeds', type=int, default=10,
                   help='number of seeds, counted up from $MT_SEED or 0')
    p.add_argument('--out', required=True)
    p.add_argument('--workers', type=int, default=1)

    p = sub.add_parser('profile', help='tatum strength profile of a dataset')
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--raw', action='store_true',
                   help='also write profile_raw.csv')
    return parser


def cmd_synth(args, config):
    seed = default_seed(args.seed)
    manifest = make_suite(args.suite, args.out, args.n_excerpts,
                          args.duration, seed, args.sample_rate)
    print(f'wrote {len(manifest.entries)} excerpts to {args.out}')


def cmd_train(args, config):
    seed = default_seed(args.seed)
    strategy = 'BAYES' if args.model == 'bayes' else args.strategy.upper()
    dataset = prepare_dataset(args.manifest, config)
    spec = SubsetSpec(args.subset, seed, config.protocol.snippet_seconds)
    fit = fit_strategy(strategy, spec, dataset, config)
    if strategy == 'BAYES':
        save_model(fit.model, args.out)
        print(f'trained bar pointer model on {len(fit.used_ids)} excerpts '
              f'in {fit.train_seconds:.2f} s')
        return
    save_weights(fit.model, args.out)
    if args.history:
        fit.history.save_csv(args.history)
    print(f'trained tcn for {len(fit.history.epochs) - 1} epochs in '
          f'{fit.train_seconds:.1f} s, best epoch {fit.history.best_epoch}')


def _is_bayes_model(path):
    with open(path, 'rb') as f:
        head = f.read(256)
    return head.lstrip().startswith(b'{') and MODEL_FORMAT.encode() in head


def merge_positions(beats, bars):
    """Beat times of ``beats`` labelled with the position of the nearest
    event of ``bars``."""
    if len(bars) == 0 or len(beats) == 0:
        return BeatList(beats.times, np.ones(len(beats), dtype=int)
                        if len(beats) else np.zeros(0, dtype=int),
                        bars.beats_per_bar)
    idx = np.abs(beats.times[:, None] - bars.times[None, :]).argmin(axis=1)
    return BeatList(beats.times, bars.positions[idx], bars.beats_per_bar)


def cmd_track(args, config):
    audio = load_wav(args.audio)
    fps = config.features.frame_rate
    if _is_bayes_model(args.model):
        model = load_model(args.model)
        est = bayes_track(model, onset_envelope(audio, model.frame_rate))
    else:
        weights = load_weights(args.model)
        dec = config.decoder
        tempo_range = dec.tempo_range('')
        if args.min_bpm is not None or args.max_bpm is not None:
            tempo_range = TempoRange(
                args.min_bpm if args.min_bpm is not None
                else tempo_range.min_bpm,
                args.max_bpm if args.max_bpm is not None
                else tempo_range.max_bpm)
        options = args.beats_per_bar or dec.beats_per_bar_options or (3, 4)
        feats, actual = tcn_features(audio, fps)
        acts = forward(weights, feats, frame_rate=actual)
        beats = dbn_beat_decode(acts.beat, actual, tempo_range, dec.num_tempi,
                                dec.tempo_change_prob, dec.observation_lambda)
        bars = dbn_downbeat_decode(acts.beat, acts.downbeat, actual, options,
                                   tempo_range, dec.num_tempi,
                                   dec.tempo_change_prob,
                                   dec.observation_lambda)
        est = merge_positions(beats, bars)
    save_beats(est, args.out)
    print(f'wrote {len(est)} beats to {args.out}')


def cmd_evaluate(args, config):
    est = load_beats(args.est)
    ann = load_beats(args.ann)
    if args.task == 'downbeat' and not (est.has_positions
                                        and ann.has_positions):
        raise CliError('downbeat evaluation needs positions in both files')
    rep = evaluate(est, ann, args.task)
    print(f'f={rep.f_measure:.3f} cmlt={rep.cmlt:.3f} amlt={rep.amlt:.3f}')


def cmd_experiment(args, config):
    base = default_seed()
    seeds = range(base, base + args.seeds)
    for s in args.strategies:
        if s.upper() not in STRATEGIES:
            raise CliError(f'unknown strategy {s!r}')
    t0 = time.perf_counter()
    records = run_matrix(args.manifest, args.strategies, args.subsets, seeds,
                         config, args.out, args.workers)
    audit = audit_leakage(records)
    failed = sum(not r.ok for r in records)
    print(f'{len(records)} cells ({failed} failed) in '
          f'{time.perf_counter() - t0:.1f} s; leakage audit '
          f'{"passed" if audit.ok else "FAILED"}; results in {args.out}')
    if not audit.ok:
        raise CliError('leakage audit failed: ' + audit.violations[0])


def cmd_profile(args, config):
    manifest = DatasetManifest.load(args.manifest)
    p = config.protocol
    excerpts = load_dataset(manifest, p.excerpt_seconds, p.max_excerpts,
                            p.split_seed)
    if not excerpts:
        raise CliError(f'no excerpts of {p.excerpt_seconds:g} s in '
                       f'{args.manifest}')
    fps = config.features.frame_rate
    pairs = [(normalize_local(onset_envelope(ex.audio, fps, PROFILE_BANDS),
                              config.features.profile_half_window), ex.beats)
             for ex in excerpts]
    profile = compute_profile(pairs, manifest.meter)
    stats = profile_stats(profile)
    os.makedirs(args.out, exist_ok=True)
    save_profile_csv(profile, stats, os.path.join(args.out, 'profile.csv'))
    if args.raw:
        save_profile_raw_csv(profile, os.path.join(args.out,
                                                   'profile_raw.csv'))
    print(f'profile of {len(excerpts)} excerpts written to {args.out}')


COMMANDS = {'synth': cmd_synth, 'train': cmd_train, 'track': cmd_track,
            'evaluate': cmd_evaluate, 'experiment': cmd_experiment,
            'profile': cmd_profile}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        config = load_config(args.config)
        COMMANDS[args.command](args, config)
    except Exception as exc:
        print(f'error: {type(exc).__name__}: {" ".join(str(exc).split())}',
              file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
