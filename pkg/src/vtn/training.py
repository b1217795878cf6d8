"""Losses, optimizer, LR schedule and the training loop.

Training uses clip-level logits (frame logits averaged over the sequence).
Distillation mixes cross-entropy with a temperature-scaled KL term against
fused teacher probabilities.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .decoder import DecoderConfig, DecoderWeights, classify_clip, forward_with_cache, \
    decoder_backward, init_weights
from .errors import ConfigError, DomainError, NumericError
from .tensor import stable_softmax

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _check_labels(labels, num_classes: int):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer) or np.any(labels < 0) or np.any(labels >= num_classes):
        raise DomainError(f"label(s) {labels} out of range for {num_classes} classes")
    return labels


def cross_entropy(logits, label):
    """Return ``(loss, dloss/dlogits)``; works on one vector or a ``(B, C)`` batch."""
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy: non-finite logits")
    label = _check_labels(label, z.shape[-1])
    logp = log_softmax(z)
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, label[..., None], 1.0, axis=-1)
    loss = -np.take_along_axis(logp, label[..., None], axis=-1)[..., 0]
    return loss, np.exp(logp) - onehot


def fuse_predictions(*probs, mode: str = "probs", tol: float = 1e-9) -> np.ndarray:
    """Fuse per-model class probabilities (mean of probabilities by default).

    ``mode="logits"`` averages log-probabilities instead and re-applies softmax.
    Accepts one or more ``(C,)`` vectors or ``(B, C)`` batches.
    """
    if not probs:
        raise DomainError("fuse_predictions needs at least one prediction")
    arrs = [np.asarray(p, dtype=float) for p in probs]
    for p in arrs:
        if p.shape != arrs[0].shape:
            raise DomainError("predictions to fuse have different shapes")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
            raise DomainError("fuse_predictions: input is not a probability distribution")
    if mode == "probs":
        fused = sum(arrs) / len(arrs)
        return fused / fused.sum(axis=-1, keepdims=True)
    if mode == "logits":
        return stable_softmax(sum(np.log(np.maximum(p, PROB_CLAMP)) for p in arrs) / len(arrs))
    raise DomainError(f"unknown fusion mode {mode!r}")


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 4.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


def kd_loss(student_logits, teacher_probs, label, cfg: KDConfig = KDConfig()):
    """(1-a)*CE(student, label) + a*T^2*KL(teacher_T || student_T).

    Teacher logits are taken as log(teacher_probs); zero probabilities are
    clamped to 1e-12. Returns ``(loss, dloss/dstudent_logits)``.
    """
    z = np.asarray(student_logits, dtype=float)
    p = np.asarray(teacher_probs, dtype=float)
    if p.shape != z.shape:
        raise DomainError(f"teacher probs {p.shape} vs student logits {z.shape}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9) or np.any(p < 0):
        raise DomainError("kd_loss: teacher_probs are not normalized")
    if np.any(p < PROB_CLAMP):
        warnings.warn("teacher probabilities below 1e-12 clamped for KL stability", RuntimeWarning)
        p = np.maximum(p, PROB_CLAMP)
    tau, alpha = cfg.temperature, cfg.alpha
    ce, ce_grad = cross_entropy(z, label)
    logq_t = log_softmax(np.log(p) / tau)
    logp_s = log_softmax(z / tau)
    kl = np.sum(np.exp(logq_t) * (logq_t - logp_s), axis=-1)
    loss = (1.0 - alpha) * ce + alpha * tau * tau * kl
    grad = (1.0 - alpha) * ce_grad + alpha * tau * (np.exp(logp_s) - np.exp(logq_t))
    return loss, grad


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState):
    """One Adam step with bias correction and decoupled weight decay.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} does not mirror parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_step: non-finite gradient")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append(p - state.lr * update - state.lr * state.weight_decay * p)
    return out


def adam_step(weights: DecoderWeights, grads: DecoderWeights, state: OptimizerState):
    new = adam_update(weights.tensors(), grads.tensors(), state)
    return DecoderWeights.from_tensors(weights.config, new), state


@dataclass
class PlateauSchedule:
    lr: float = 1e-4
    patience: int = 5
    factor: float = 0.1
    min_lr: float = 1e-7
    threshold: float = 1e-4
    best_loss: float = math.inf
    num_bad_epochs: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must be in (0, 1), got {self.factor}")

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss is {val_loss}")
        if val_loss < self.best_loss - self.threshold:
            self.best_loss = val_loss
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
            if self.num_bad_epochs >= self.patience:
                new = self.lr * self.factor
                # snap to the floor when only rounding keeps us above it
                self.lr = self.min_lr if new <= self.min_lr * (1 + 1e-9) else new
                self.num_bad_epochs = 0
        return self.lr


def plateau_step(sched: PlateauSchedule, val_loss: float) -> float:
    return sched.step(val_loss)


# ---------------------------------------------------------------- data + loop

@dataclass
class LabeledDataset:
    clips: np.ndarray   # (n, t, width)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clips.ndim != 3:
            raise ConfigError(f"clips must be (n, t, width), got {self.clips.shape}")
        if self.labels.shape != (self.clips.shape[0],):
            raise ConfigError("one label per clip required")

    def __len__(self):
        return self.clips.shape[0]

    @property
    def width(self) -> int:
        return self.clips.shape[2]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.clips[idx], self.labels[idx])


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-4
    batch: int = 8
    epochs: int = 50
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    kd: KDConfig = field(default_factory=KDConfig)
    patience: int = 5
    factor: float = 0.1
    min_lr: float = 1e-7
    shuffle: bool = True
    stride: int = 2


def _check_dataset(ds: LabeledDataset, cfg: DecoderConfig, what: str):
    if len(ds) == 0:
        raise ConfigError(f"{what} is empty")
    if ds.width != cfg.input_dim:
        raise ConfigError(f"{what} clips are {ds.width} wide, model expects {cfg.input_dim}")
    if ds.clips.shape[1] < 1:
        raise ConfigError(f"{what} clips have no frames")
    _check_labels(ds.labels, cfg.num_classes)


def evaluate(w: DecoderWeights, ds: LabeledDataset, batch: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy over a dataset."""
    losses, correct = [], 0
    for s in range(0, len(ds), batch):
        x, y = ds.clips[s:s + batch], ds.labels[s:s + batch]
        frame_logits, probs = classify_clip(x, w)
        losses.append(cross_entropy(frame_logits.mean(axis=-2), y)[0])
        correct += int(np.sum(np.argmax(probs, axis=-1) == y))
    return float(np.mean(np.concatenate(losses))), correct / len(ds)


def train(dataset: LabeledDataset, model_config: DecoderConfig, config: TrainConfig = TrainConfig(),
          val_set: LabeledDataset | None = None, teacher_probs: np.ndarray | None = None,
          init: DecoderWeights | None = None):
    """Train a decoder from scratch (or from ``init``); returns ``(weights, history)``.

    ``teacher_probs`` (one fused distribution per training clip) switches the
    loss to distillation. The plateau schedule watches the validation loss, or
    the training loss when no validation set is given.
    """
    _check_dataset(dataset, model_config, "training set")
    if val_set is not None:
        _check_dataset(val_set, model_config, "validation set")
    if teacher_probs is not None:
        teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
        if teacher_probs.shape != (len(dataset), model_config.num_classes):
            raise ConfigError(f"teacher_probs shape {teacher_probs.shape} != "
                              f"{(len(dataset), model_config.num_classes)}")
    if config.batch < 1 or config.epochs < 0:
        raise ConfigError("batch must be >= 1 and epochs >= 0")

    rng = np.random.default_rng(config.seed)
    w = init.copy() if init is not None else init_weights(model_config, seed=config.seed)
    opt = OptimizerState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                         weight_decay=config.weight_decay)
    sched = PlateauSchedule(lr=config.lr, patience=config.patience, factor=config.factor,
                            min_lr=config.min_lr)
    history = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for s in range(0, n, config.batch):
            idx = order[s:s + config.batch]
            logits, cache = forward_with_cache(dataset.clips[idx], w)
            if teacher_probs is None:
                losses, grad = cross_entropy(logits, dataset.labels[idx])
            else:
                losses, grad = kd_loss(logits, teacher_probs[idx], dataset.labels[idx], config.kd)
            total += float(np.sum(losses))
            grads, _ = decoder_backward(cache, grad / len(idx))
            opt.lr = sched.lr
            w, _ = adam_step(w, grads, opt)
        train_loss = total / n
        _, train_acc = evaluate(w, dataset)
        if val_set is not None:
            val_loss, val_acc = evaluate(w, val_set)
        else:
            val_loss, val_acc = train_loss, train_acc
        row = dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc,
                   lr=sched.lr, train_acc=train_acc)
        history.append(row)
        log.debug("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f lr %.2e",
                  epoch, train_loss, val_loss, val_acc, sched.lr)
        if sched.lr <= sched.min_lr:
            break
        sched.step(val_loss)
    return w, history


def split_columns(x: np.ndarray, teachers: list[DecoderWeights]) -> list[np.ndarray]:
    """Route input columns to teachers.

    A teacher whose input width equals the data width sees the whole clip;
    otherwise teachers take consecutive column slices in order (e.g. the RGB
    teacher the first half of a stacked clip, the RGB-diff teacher the second).
    """
    width = x.shape[-1]
    out, col = [], 0
    for t in teachers:
        k = t.config.input_dim
        if k == width:
            out.append(x)
            continue
        if col + k > width:
            raise ConfigError(f"teachers need more than the {width} available input columns")
        out.append(x[..., col:col + k])
        col += k
    return out


def teacher_predictions(teachers: list[DecoderWeights], clips: np.ndarray,
                        mode: str = "probs") -> np.ndarray:
    """Fused clip probabilities of one or more teachers for every clip."""
    if not teachers:
        raise ConfigError("at least one teacher is required")
    num_classes = {t.config.num_classes for t in teachers}
    if len(num_classes) != 1:
        raise ConfigError("teachers disagree on the number of classes")
    inputs = split_columns(np.asarray(clips, dtype=np.float64), teachers)
    probs = [classify_clip(x, t.astype(np.float64))[1] for x, t in zip(inputs, teachers)]
    return fuse_predictions(*probs, mode=mode)


# ---------------------------------------------------------------- config files

_MODEL_KEYS = {f.name for f in fields(DecoderConfig)}
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_run_config(text: str) -> tuple[TrainConfig, dict]:
    """Parse ``key=value`` lines into a TrainConfig and model-config overrides.

    Recognized keys: seed, lr, batch, epochs, weight_decay, kd.tau, kd.alpha,
    schedule.patience, schedule.factor, schedule.min_lr, shuffle, clip.stride and
    ``model.<DecoderConfig field>``. ``#`` starts a comment.
    """
    cfg = TrainConfig()
    tau, alpha = cfg.kd.temperature, cfg.kd.alpha
    model = {}
    simple = {"seed": ("seed", int), "lr": ("lr", float), "batch": ("batch", int),
              "epochs": ("epochs", int), "weight_decay": ("weight_decay", float),
              "schedule.patience": ("patience", int), "schedule.factor": ("factor", float),
              "schedule.min_lr": ("min_lr", float), "shuffle": ("shuffle", _parse_bool),
              "clip.stride": ("stride", int)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in simple:
                attr, conv = simple[key]
                cfg = replace(cfg, **{attr: conv(value)})
            elif key == "kd.tau":
                tau = float(value)
            elif key == "kd.alpha":
                alpha = float(value)
            elif key.startswith("model.") and key[6:] in _MODEL_KEYS:
                name = key[6:]
                model[name] = _parse_bool(value) if name in ("attn_residual", "post_concat_proj") \
                    else int(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from e
    return replace(cfg, kd=KDConfig(tau, alpha)), model


def load_run_config(path) -> tuple[TrainConfig, dict]:
    with open(path) as f:
        return parse_run_config(f.read())


def write_history_csv(history: list[dict], path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
