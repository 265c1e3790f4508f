"""
Temporal convolutional network for beat and downbeat activations.

A stack of non-causal dilated 1-D convolutions with ELU non-linearities
(residual from the second layer on) feeds two 1x1 sigmoid heads. Everything,
including back-propagation and the Adam optimiser, is written in numpy.

Layout of a :class:`TcnWeights` tensor set, in storage order:

* ``layer{i}.weight`` with shape ``(kernel_size, in_channels, channels)``
* ``layer{i}.bias`` with shape ``(channels,)``
* ``beat.weight``, ``downbeat.weight`` with shape ``(channels,)``
* ``beat.bias``, ``downbeat.bias`` with shape ``()``

"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .audio import NUM_TCN_BANDS

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOSS_EPS = 1e-7
MIN_IMPROVEMENT = 1e-5
WIDEN_FRAMES = 2
WIDEN_WEIGHT = 0.5
WEIGHTS_FORMAT = 'metertrack-tcn/1'


@dataclass(frozen=True)
class TcnConfig:
    n_layers: int = 8
    base_channels: int = 16
    kernel_size: int = 5
    dilations: tuple = (1, 2, 4, 8, 16, 32, 64, 128)
    dropout_rate: float = 0.1
    seed: int = 0
    n_bands: int = NUM_TCN_BANDS

    def __post_init__(self):
        object.__setattr__(self, 'dilations',
                           tuple(int(d) for d in self.dilations))
        d = self.dilations
        if len(d) != self.n_layers or self.n_layers < 1:
            raise ValueError('need one dilation per layer')
        if any(x < 1 or x & (x - 1) for x in d):
            raise ValueError('dilations must be powers of 2')
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError('dilations must be strictly increasing')
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError('kernel_size must be odd')
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError('dropout_rate must be in [0, 1)')
        if self.base_channels < 1 or self.n_bands < 1:
            raise ValueError('channel counts must be positive')

    @property
    def receptive_field(self):
        """Frames of context on each side of the output frame."""
        return sum(d * (self.kernel_size - 1) // 2 for d in self.dilations)


def parameter_shapes(config):
    shapes = {}
    c_in = config.n_bands
    for i in range(config.n_layers):
        shapes[f'layer{i}.weight'] = (config.kernel_size, c_in,
                                      config.base_channels)
        shapes[f'layer{i}.bias'] = (config.base_channels,)
        c_in = config.base_channels
    for head in ('beat', 'downbeat'):
        shapes[f'{head}.weight'] = (config.base_channels,)
        shapes[f'{head}.bias'] = ()
    return shapes


@dataclass(frozen=True, eq=False)
class TcnWeights:
    config: TcnConfig
    params: dict

    def __post_init__(self):
        shapes = parameter_shapes(self.config)
        if list(self.params) != list(shapes):
            raise ValueError('parameter names do not match the config')
        for name, shape in shapes.items():
            value = self.params[name]
            if np.shape(value) != shape:
                raise ValueError(f'{name}: expected shape {shape}, '
                                 f'got {np.shape(value)}')
            if not np.all(np.isfinite(value)):
                raise ValueError(f'{name} has non-finite values')

    def copy(self):
        return TcnWeights(self.config,
                          {k: np.array(v, dtype=float)
                           for k, v in self.params.items()})

    def map(self, fn):
        return TcnWeights(self.config,
                          {k: np.asarray(fn(v), dtype=float)
                           for k, v in self.params.items()})


@dataclass(frozen=True, eq=False)
class ActivationPair:
    beat: np.ndarray
    downbeat: np.ndarray
    frame_rate: float

    def __post_init__(self):
        if len(self.beat) != len(self.downbeat):
            raise ValueError('beat and downbeat activations differ in length')

    def __len__(self):
        return len(self.beat)


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float = 0.005
    plateau_patience: int = 10
    lr_factor: float = 0.2
    max_epochs: int = 100
    early_stop_patience: int = 20

    def __post_init__(self):
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError('lr_factor must be in (0, 1)')
        if self.initial_lr <= 0:
            raise ValueError('initial_lr must be positive')
        if (self.plateau_patience >= self.max_epochs
                or self.early_stop_patience >= self.max_epochs):
            raise ValueError('patiences must be smaller than max_epochs')

    @classmethod
    def finetune_default(cls):
        return cls(initial_lr=0.001)


def init_weights(config):
    """He-normal kernels (fan-in = kernel taps x input channels), zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith('.bias'):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return TcnWeights(config, params)


# forward / backward

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _conv(x, w, b, dilation):
    """'Same' zero-padded dilated convolution; returns output and padded x."""
    k = w.shape[0]
    pad = (k - 1) // 2 * dilation
    n = x.shape[0]
    xp = np.pad(x, ((pad, pad), (0, 0)))
    y = np.broadcast_to(b, (n, w.shape[2])).copy()
    for j in range(k):
        y += xp[j * dilation:j * dilation + n] @ w[j]
    return y, xp


def _conv_backward(dy, xp, w, dilation, need_dx=True):
    k = w.shape[0]
    n = dy.shape[0]
    pad = (k - 1) // 2 * dilation
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for j in range(k):
        seg = slice(j * dilation, j * dilation + n)
        dw[j] = xp[seg].T @ dy
        if need_dx:
            dxp[seg] += dy @ w[j].T
    dx = dxp[pad:pad + n] if need_dx else None
    return dw, dy.sum(axis=0), dx


def _dropout_masks(config, n_frames, rng):
    if rng is None or config.dropout_rate == 0:
        return [None] * config.n_layers
    keep = 1.0 - config.dropout_rate
    return [(rng.random((n_frames, config.base_channels)) < keep) / keep
            for _ in range(config.n_layers)]


def _forward(weights, features, masks):
    cfg = weights.config
    p = weights.params
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != cfg.n_bands:
        raise ValueError(f'expected features of shape (frames, {cfg.n_bands}),'
                         f' got {x.shape}')
    cache = []
    h = x
    for i, d in enumerate(cfg.dilations):
        z, xp = _conv(h, p[f'layer{i}.weight'], p[f'layer{i}.bias'], d)
        a = np.where(z > 0, z, np.expm1(np.minimum(z, 0)))
        if masks[i] is not None:
            a = a * masks[i]
        cache.append((xp, z))
        h = a if i == 0 else h + a
    logits = np.stack([h @ p['beat.weight'] + p['beat.bias'],
                       h @ p['downbeat.weight'] + p['downbeat.bias']], axis=1)
    return logits, h, cache


def forward(weights, features, train_mode=False, rng=None, frame_rate=100.0):
    """
    Beat and downbeat activations for a ``(frames, bands)`` feature matrix.

    Dropout is applied only with ``train_mode`` (drawing from ``rng``, or
    from a generator seeded with the config seed).
    """
    features = np.asarray(features, dtype=float)
    masks = [None] * weights.config.n_layers
    if train_mode:
        if rng is None:
            rng = np.random.default_rng(weights.config.seed)
        masks = _dropout_masks(weights.config, features.shape[0], rng)
    logits, _, _ = _forward(weights, features, masks)
    act = np.clip(_sigmoid(logits), LOSS_EPS, 1.0 - LOSS_EPS)
    return ActivationPair(act[:, 0], act[:, 1], frame_rate)


def _head_normalisers(mask):
    total = mask.sum(axis=0)
    return np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)


def loss(acts, targets, mask):
    """
    Mean over both heads of the mask-weighted binary cross-entropy.

    Each head is normalised by the sum of its mask weights (a head with an
    all-zero mask contributes 0), so the loss is invariant to scaling the
    mask.

    Parameters
    ----------
    acts : ActivationPair
    targets, mask : numpy array, shape (frames, 2)
        Beat and downbeat columns.

    """
    p = np.stack([acts.beat, acts.downbeat], axis=1)
    targets = np.asarray(targets, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if targets.shape != p.shape or mask.shape != p.shape:
        raise ValueError(f'activations {p.shape}, targets {targets.shape} '
                         f'and mask {mask.shape} differ in shape')
    p = np.clip(p, LOSS_EPS, 1.0 - LOSS_EPS)
    bce = -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p))
    return float(0.5 * np.sum((mask * bce).sum(axis=0)
                              * _head_normalisers(mask)))


def _loss_and_grads(weights, features, targets, mask, masks):
    cfg = weights.config
    p = weights.params
    logits, h, cache = _forward(weights, features, masks)
    targets = np.asarray(targets, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if targets.shape != logits.shape or mask.shape != logits.shape:
        raise ValueError('targets and mask must have shape (frames, 2)')
    norm = 0.5 * _head_normalisers(mask)
    prob = _sigmoid(logits)
    clipped = np.clip(prob, LOSS_EPS, 1.0 - LOSS_EPS)
    bce = -(targets * np.log(clipped) + (1.0 - targets) * np.log1p(-clipped))
    value = float(np.sum((mask * bce).sum(axis=0) * norm))
    # unclipped gradient, so confidently wrong frames can still recover
    dlogits = mask * (prob - targets) * norm
    grads = {}
    grads['beat.weight'] = h.T @ dlogits[:, 0]
    grads['beat.bias'] = np.asarray(dlogits[:, 0].sum())
    grads['downbeat.weight'] = h.T @ dlogits[:, 1]
    grads['downbeat.bias'] = np.asarray(dlogits[:, 1].sum())
    dh = (np.outer(dlogits[:, 0], p['beat.weight'])
          + np.outer(dlogits[:, 1], p['downbeat.weight']))
    for i in range(cfg.n_layers - 1, -1, -1):
        xp, z = cache[i]
        da = dh if masks[i] is None else dh * masks[i]
        dz = da * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0)))
        dw, db, dx = _conv_backward(dz, xp, p[f'layer{i}.weight'],
                                    cfg.dilations[i], need_dx=i > 0)
        grads[f'layer{i}.weight'] = dw
        grads[f'layer{i}.bias'] = db
        if i > 0:
            dh = dh + dx
    ordered = {name: grads[name] for name in p}
    return value, TcnWeights(cfg, ordered)


def gradients(weights, features, targets, mask):
    """Gradient of :func:`loss` (dropout disabled) for every tensor.

    Exact wherever no output probability is clipped. Clipped frames keep
    the unclipped cross-entropy gradient instead of the flat zero.
    """
    _, grads = _loss_and_grads(weights, features, targets, mask,
                               [None] * weights.config.n_layers)
    return grads


# optimiser

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, weights):
        return cls({k: np.zeros_like(v) for k, v in weights.params.items()},
                   {k: np.zeros_like(v) for k, v in weights.params.items()})


def adam_step(weights, grads, state, lr):
    """One bias-corrected Adam update; returns new weights and state."""
    step = state.step + 1
    m, v, params = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for name, w in weights.params.items():
        g = grads.params[name]
        m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        params[name] = w - lr * (m[name] / c1) / (np.sqrt(v[name] / c2)
                                                   + ADAM_EPS)
    return TcnWeights(weights.config, params), AdamState(m, v, step)


# targets and training data

def targets_from_annotations(ann, frame_rate, n_frames):
    """
    Frame targets and mask weights, shape ``(n_frames, 2)`` each.

    Column 0 holds every beat, column 1 the downbeats. The nearest frame of
    an event gets target 1 (weight 1); the two frames on either side get
    target 1 with weight 0.5. Without metrical positions the downbeat mask is
    all zero, so that head is not trained.

    Raises
    ------
    ValueError
        If an annotation falls outside ``[0, n_frames / frame_rate]``.

    """
    targets = np.zeros((n_frames, 2))
    mask = np.ones((n_frames, 2))
    times = ann.times
    bad = times[(times < 0) | (times > n_frames / frame_rate + 1e-9)]
    if len(bad):
        raise ValueError('annotations outside the feature range: '
                         + ', '.join(f'{t:.3f}' for t in bad))
    columns = [times]
    if ann.has_positions:
        columns.append(ann.downbeats())
    else:
        mask[:, 1] = 0.0
    for col, events in enumerate(columns):
        frames = np.minimum(np.round(events * frame_rate).astype(int),
                            n_frames - 1)
        for off in range(-WIDEN_FRAMES, WIDEN_FRAMES + 1):
            if off == 0:
                continue
            near = frames + off
            near = near[(near >= 0) & (near < n_frames)]
            targets[near, col] = 1.0
            mask[near, col] = WIDEN_WEIGHT
        targets[frames, col] = 1.0
        mask[frames, col] = 1.0
    return targets, mask


@dataclass(frozen=True, eq=False)
class Snippet:
    """Features of one training excerpt with its frame targets."""

    features: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    frame_rate: float
    track_id: str = ''

    @classmethod
    def from_annotations(cls, features, beats, frame_rate, track_id=''):
        features = np.asarray(features, dtype=float)
        targets, mask = targets_from_annotations(beats, frame_rate,
                                                 features.shape[0])
        return cls(features, targets, mask, frame_rate, track_id)


def _as_snippets(items, frame_rate):
    out = []
    for item in items:
        if isinstance(item, Snippet):
            out.append(item)
        else:
            features, beats = item
            out.append(Snippet.from_annotations(features, beats, frame_rate))
    return out


# training

@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch, train_loss, val_loss, lr, n_snippets):
        self.epochs.append({'epoch': epoch, 'train_loss': train_loss,
                            'val_loss': val_loss, 'lr': lr,
                            'n_snippets': n_snippets})

    @property
    def val_losses(self):
        return [e['val_loss'] for e in self.epochs]

    @property
    def train_losses(self):
        return [e['train_loss'] for e in self.epochs]

    def save_csv(self, path):
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['epoch', 'train_loss', 'val_loss', 'lr',
                             'n_snippets'])
            for e in self.epochs:
                writer.writerow([e['epoch'], f"{e['train_loss']:.8f}",
                                 f"{e['val_loss']:.8f}", f"{e['lr']:.8g}",
                                 e['n_snippets']])


def mean_loss(weights, snippets):
    """Average eval-mode loss over ``snippets``."""
    total = 0.0
    for s in snippets:
        total += loss(forward(weights, s.features), s.targets, s.mask)
    return total / len(snippets)


def _fit(weights, schedule, train_set, val_set, seed, max_epochs):
    if not train_set or not val_set:
        raise ValueError('training and validation sets must be non-empty')
    rng = np.random.default_rng(seed)
    cfg = weights.config
    best = weights
    history = History()
    lr = schedule.initial_lr
    train_loss = mean_loss(weights, train_set)
    best_val = mean_loss(weights, val_set)
    history.append(0, train_loss, best_val, lr, 0)
    state = AdamState.zeros(weights)
    since_best = since_plateau = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for k in order:
            s = train_set[k]
            masks = _dropout_masks(cfg, s.features.shape[0], rng)
            value, grads = _loss_and_grads(weights, s.features, s.targets,
                                           s.mask, masks)
            weights, state = adam_step(weights, grads, state, lr)
            total += value
        val = mean_loss(weights, val_set)
        history.append(epoch, total / len(train_set), val, lr, len(order))
        if val < best_val - MIN_IMPROVEMENT:
            best, best_val = weights, val
            history.best_epoch = epoch
            since_best = since_plateau = 0
        else:
            since_best += 1
            since_plateau += 1
        if since_best >= schedule.early_stop_patience:
            log.debug('early stop after epoch %d', epoch)
            break
        if since_plateau >= schedule.plateau_patience:
            lr *= schedule.lr_factor
            since_plateau = 0
    return best, history


def train_from_scratch(config, schedule=TrainSchedule(), train_set=(),
                       val_set=(), frame_rate=100.0, max_epochs=None):
    """
    Train a freshly initialised network.

    Parameters
    ----------
    config : TcnConfig
    schedule : TrainSchedule
    train_set, val_set : list
        :class:`Snippet` objects or ``(features, BeatList)`` pairs (taken at
        ``frame_rate``).
    max_epochs : int, optional
        Overrides ``schedule.max_epochs``.

    Returns
    -------
    weights : TcnWeights
        Weights of the epoch with the lowest validation loss (epoch 0 is the
        evaluation before any update).
    history : History

    """
    train_set = _as_snippets(train_set, frame_rate)
    val_set = _as_snippets(val_set, frame_rate)
    epochs = schedule.max_epochs if max_epochs is None else max_epochs
    return _fit(init_weights(config), schedule, train_set, val_set,
                config.seed, epochs)


def finetune(pretrained, schedule=TrainSchedule.finetune_default(),
             train_set=(), val_set=(), frame_rate=100.0, max_epochs=None,
             seed=None):
    """
    Continue training ``pretrained`` (all layers) with the same loop as
    :func:`train_from_scratch`; ``max_epochs=0`` returns it unchanged.
    """
    train_set = _as_snippets(train_set, frame_rate)
    val_set = _as_snippets(val_set, frame_rate)
    for s in train_set + val_set:
        if s.features.shape[1] != pretrained.config.n_bands:
            raise ValueError('feature bands do not match the pretrained model')
    seed = pretrained.config.seed if seed is None else seed
    epochs = schedule.max_epochs if max_epochs is None else max_epochs
    if epochs == 0:
        return pretrained, History()
    weights = TcnWeights(replace(pretrained.config, seed=seed),
                         pretrained.copy().params)
    return _fit(weights, schedule, train_set, val_set, seed, epochs)


# persistence

def save_weights(weights, path):
    """``.npz`` container: JSON ``meta`` (format, config, order) + tensors."""
    meta = {'format': WEIGHTS_FORMAT, 'config': asdict(weights.config),
            'order': list(weights.params)}
    with open(path, 'wb') as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **weights.params)


def load_weights(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data['meta']))
        if meta.get('format') != WEIGHTS_FORMAT:
            raise ValueError(f'{path}: not a {WEIGHTS_FORMAT} file')
        cfg = meta['config']
        cfg['dilations'] = tuple(cfg['dilations'])
        config = TcnConfig(**cfg)
        params = {name: np.array(data[name], dtype=float)
                  for name in meta['order']}
    return TcnWeights(config, params)
