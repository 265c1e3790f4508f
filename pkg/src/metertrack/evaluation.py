"""
Beat and downbeat evaluation: F-measure, continuity scores (CMLt, AMLt) and
bootstrap confidence intervals.

Downbeat scores apply the same functions to the position-1 events. Full tracks
are evaluated; pass ``skip`` to ignore an initial warm-up period.

"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .beats import BeatList

F_WINDOW = 0.07
PHASE_TOL = 0.175
PERIOD_TOL = 0.175


@dataclass(frozen=True)
class MetricReport:
    f_measure: float
    cmlt: float
    amlt: float
    precision: float
    recall: float
    hits: int
    false_pos: int
    false_neg: int

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FMeasure:
    f_measure: float
    precision: float
    recall: float
    hits: int
    false_pos: int
    false_neg: int


def _times(events):
    if isinstance(events, BeatList):
        return events.times
    return np.asarray(events, dtype=float).reshape(-1)


def match_events(est, ann, window):
    """
    One-to-one matching within ``window``; closest pairs are matched first.

    Returns a list of ``(est_index, ann_index)`` pairs.
    """
    est, ann = _times(est), _times(ann)
    if len(est) == 0 or len(ann) == 0:
        return []
    diff = np.abs(est[:, None] - ann[None, :])
    i, j = np.nonzero(diff <= window + 1e-12)
    order = np.lexsort((j, i, diff[i, j]))
    used_e, used_a, pairs = set(), set(), []
    for k in order:
        a, b = int(i[k]), int(j[k])
        if a in used_e or b in used_a:
            continue
        used_e.add(a)
        used_a.add(b)
        pairs.append((a, b))
    return sorted(pairs)


def f_measure(est, ann, window=F_WINDOW):
    """
    F-measure of estimated against annotated events.

    Two empty lists score 1; a single empty list scores 0.
    """
    est, ann = _times(est), _times(ann)
    if len(est) == 0 and len(ann) == 0:
        return FMeasure(1.0, 1.0, 1.0, 0, 0, 0)
    hits = len(match_events(est, ann, window))
    precision = hits / len(est) if len(est) else 0.0
    recall = hits / len(ann) if len(ann) else 0.0
    f = 0.0 if precision + recall == 0 else \
        2 * precision * recall / (precision + recall)
    return FMeasure(f, precision, recall, hits, len(est) - hits,
                    len(ann) - hits)


def _continuity_correct(est, ref, phase_tol, period_tol):
    """Number of estimates that are correct at the metrical level ``ref``."""
    if len(est) == 0 or len(ref) < 2:
        return 0
    ref_int = np.diff(ref)
    n_ref = len(ref)
    # nearest annotation and phase check for every estimate
    nearest = np.abs(est[:, None] - ref[None, :]).argmin(axis=1)
    local = np.where(nearest < n_ref - 1,
                     ref_int[np.minimum(nearest, n_ref - 2)],
                     ref_int[np.maximum(nearest - 1, 0)])
    in_phase = np.abs(est - ref[nearest]) <= phase_tol * local
    used = set()
    correct = 0
    for i in range(len(est)):
        j = int(nearest[i])
        if not in_phase[i] or j in used:
            continue
        if i > 0 and j > 0:
            # continuity: previous estimate matched the previous annotation
            if not (in_phase[i - 1] and nearest[i - 1] == j - 1):
                continue
            period = ref[j] - ref[j - 1]
            ok = abs((est[i] - est[i - 1]) - period) <= period_tol * period
        else:
            # first estimate, or first annotation: nothing to continue from,
            # so the interval to the next beat is checked instead
            if i + 1 >= len(est) or j + 1 >= n_ref:
                continue
            period = ref[j + 1] - ref[j]
            ok = abs((est[i + 1] - est[i]) - period) <= period_tol * period
        if ok:
            used.add(j)
            correct += 1
    return correct


def metrical_variations(ann):
    """
    Annotation sequences accepted by AMLt, keyed by name.

    ``identity``, ``double``, ``half_odd``/``half_even``, ``offbeat``,
    ``triple`` and the three phases of ``third``.
    """
    ann = _times(ann)
    out = {'identity': ann}
    if len(ann) >= 2:
        mid = (ann[:-1] + ann[1:]) / 2
        out['offbeat'] = mid
        out['double'] = np.sort(np.concatenate([ann, mid]))
        out['half_odd'] = ann[::2]
        out['half_even'] = ann[1::2]
        step = np.diff(ann) / 3
        out['triple'] = np.sort(np.concatenate(
            [ann, ann[:-1] + step, ann[:-1] + 2 * step]))
        for k in range(3):
            out[f'third_{k}'] = ann[k::3]
    return out


def continuity(est, ann, phase_tol=PHASE_TOL, period_tol=PERIOD_TOL,
               skip=0.0):
    """
    Continuity-based accuracy ``(CMLt, AMLt)``.

    An estimate is correct when it lies within ``phase_tol`` times the local
    annotated interval of an annotation, its preceding estimate matched the
    preceding annotation, and the inter-beat interval is within
    ``period_tol`` of the annotated one. CMLt counts correct estimates over
    the number of annotations; AMLt takes the best score over the accepted
    metrical variations.

    Raises
    ------
    ValueError
        With fewer than two annotations.

    """
    est, ann = _times(est), _times(ann)
    if skip > 0:
        est, ann = est[est >= skip], ann[ann >= skip]
    if len(ann) < 2:
        raise ValueError('continuity needs at least two annotations')
    scores = {}
    for name, ref in metrical_variations(ann).items():
        if len(ref) < 2:
            continue
        scores[name] = _continuity_correct(est, ref, phase_tol,
                                           period_tol) / len(ref)
    cmlt = scores['identity']
    return cmlt, max(scores.values())


def evaluate(est, ann, task='beat', window=F_WINDOW, skip=0.0):
    """
    Full :class:`MetricReport` for the beat or downbeat task.

    For ``task='downbeat'`` both lists are reduced to position-1 events.
    Continuity scores are 0 when fewer than two reference events exist.
    """
    if task == 'downbeat':
        est_t, ann_t = est.downbeats(), ann.downbeats()
    elif task == 'beat':
        est_t, ann_t = _times(est), _times(ann)
    else:
        raise ValueError(f'unknown task {task!r}')
    if skip > 0:
        est_t, ann_t = est_t[est_t >= skip], ann_t[ann_t >= skip]
    fm = f_measure(est_t, ann_t, window)
    if len(ann_t) >= 2:
        cmlt, amlt = continuity(est_t, ann_t)
    else:
        cmlt = amlt = 0.0
    return MetricReport(fm.f_measure, cmlt, amlt, fm.precision, fm.recall,
                        fm.hits, fm.false_pos, fm.false_neg)


@dataclass(frozen=True)
class BootstrapSummary:
    mean: float
    ci_low: float
    ci_high: float
    n: int


def bootstrap_summary(groups, n_resamples=1000, ci=0.95, seed=0):
    """
    Percentile bootstrap of the mean for every group of scores.

    Parameters
    ----------
    groups : mapping
        Group key to a sequence of scores (e.g. all per-track scores of one
        strategy and subset, pooled over seeds).
    n_resamples : int
    ci : float
        Confidence level.
    seed : int
        Seed of the resampling; each group draws from its own stream in the
        order of ``sorted(groups)``.

    Returns
    -------
    dict
        Group key to :class:`BootstrapSummary`.

    """
    out = {}
    keys = sorted(groups, key=lambda k: tuple(str(x) for x in (
        k if isinstance(k, tuple) else (k,))))
    for n, key in enumerate(keys):
        scores = np.asarray(groups[key], dtype=float)
        if len(scores) == 0:
            raise ValueError(f'group {key!r} has no scores')
        rng = np.random.default_rng([seed, n])
        idx = rng.integers(0, len(scores), size=(n_resamples, len(scores)))
        means = scores[idx].mean(axis=1)
        alpha = (1.0 - ci) / 2.0
        lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
        mean = float(scores.mean())
        # guard against rounding in the all-equal case
        lo, hi = min(float(lo), mean), max(float(hi), mean)
        out[key] = BootstrapSummary(mean, lo, hi, len(scores))
    return out
