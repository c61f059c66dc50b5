"""Loss, optimizer, training loop, and checkpoint evaluation.

Protocol defaults: batch size 8, learning rate 1e-3, decay 1e-4, at most 100
epochs, early stop after 10 consecutive epochs without validation-loss
improvement (> ``improvement_epsilon``).  The decay rate is applied as
decoupled weight decay; ``lr_decay_per_epoch`` (off by default) instead
multiplies the learning rate by (1 - rate) after every epoch, for the other
reading of "decay".

Training math runs in float32 for speed; the loss itself is verified in
float64 by the gradient suite.  Runs are pure functions of their seeds: the
same configuration produces bit-identical loss logs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bfseg import data as D
from bfseg import metrics as X
from bfseg import model as M
from bfseg import tensor as T
from bfseg.tensor import GradError, Tensor

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DICE_SMOOTH = 1.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    improvement_epsilon: float = 1e-4
    ce_weight: float = 0.5
    dice_weight: float = 0.5
    seed: int = 0
    lr_decay_per_epoch: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.ce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be non-negative")


def loss(logits, masks, ce_weight=0.5, dice_weight=0.5, smooth=DICE_SMOOTH):
    """Weighted cross-entropy + soft-Dice segmentation loss.

    ``logits``: Tensor [N, K, H, W]; ``masks``: integer array [N, H, W].
    The Dice term pools each class over every pixel in the batch:
    dice_k = (2*sum(p_k t_k) + smooth) / (sum(p_k) + sum(t_k) + smooth).
    """
    n, k, h, w = logits.shape
    masks = np.asarray(masks)
    if masks.shape != (n, h, w):
        raise T.ShapeError(f"masks {masks.shape} do not match logits {logits.shape}")
    if masks.min() < 0 or masks.max() >= k:
        raise ValueError(f"mask classes must lie in [0, {k}), got [{masks.min()}, {masks.max()}]")
    onehot = Tensor(
        (masks[:, None, :, :] == np.arange(k)[None, :, None, None]).astype(logits.dtype)
    )
    ce = -(T.log_softmax(logits, axis=1) * onehot).sum() / float(n * h * w)
    probs = T.softmax(logits, axis=1)
    inter = (probs * onehot).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + onehot.sum(axis=(0, 2, 3))
    dice = ((inter * 2.0 + smooth) / (denom + smooth)).mean()
    return ce * ce_weight + (1.0 - dice) * dice_weight


@dataclass
class OptimizerState:
    step: int
    m: dict  # first-moment accumulator per parameter name
    v: dict  # second-moment accumulator per parameter name


def init_optimizer(params):
    zeros = {name: np.zeros_like(t.array) for name, t in M.named_tensors(params)}
    return OptimizerState(step=0, m=zeros, v={k: v.copy() for k, v in zeros.items()})


def optimizer_step(params, grads, state, config):
    """Adaptive-moment update with decoupled weight decay, in place.

    Returns (params, state); parameter arrays are mutated directly.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    lr = config.learning_rate
    wd = config.weight_decay
    for name, tensor in M.named_tensors(params):
        g = grads.get(name)
        if g is None:
            raise GradError(f"missing gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if wd:
            update = update + wd * tensor.array
        tensor.array -= lr * update
    return params, state


@dataclass
class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without improvement."""

    patience: int
    min_improvement: float
    best: float = float("inf")
    stagnant: int = 0

    def update(self, value):
        """Record one epoch's validation loss; True when it improved."""
        if value < self.best - self.min_improvement:
            self.best = value
            self.stagnant = 0
            return True
        self.stagnant += 1
        return False

    @property
    def should_stop(self):
        return self.stagnant >= self.patience


LOG_HEADER = "epoch,train_loss,val_loss,f1,se,sp,ac,js,seconds"


@dataclass
class TrainResult:
    log_rows: list  # dicts keyed by the CSV header fields
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool
    checkpoint_path: str
    descent_warning: str | None = None


def _forward_batches(samples, config, params, batch_size):
    """Deterministic unshuffled forward over samples; yields (logits, masks)."""
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk]).astype(np.float32)
        masks = np.stack([s.mask for s in chunk])
        yield M.forward(Tensor(images), config, params), masks


def train(model_config, train_config, dataset_root, out_dir, progress=None):
    """Full training run; writes the log CSV, best checkpoint, and configs.

    ``progress``, when given, receives each epoch's log row as a dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = D.load_dataset(dataset_root)
    if not samples:
        raise D.DataError(f"no samples found under {dataset_root}")
    split = D.split_dataset(samples, seed=train_config.seed)
    by_id = {s.id: s for s in samples}
    train_set = [by_id[i] for i in split.train]
    val_set = [by_id[i] for i in split.val]
    if not train_set or not val_set:
        raise D.DataError(
            f"empty split: {len(train_set)} train / {len(val_set)} val samples"
        )
    (out / "split.json").write_text(split.to_json(), encoding="utf-8")
    save_run_config(model_config, train_config, out / "config.json")

    params = M.init_params(model_config, seed=train_config.seed, dtype=np.float32)
    state = init_optimizer(params)
    stopper = EarlyStopper(train_config.patience, train_config.improvement_epsilon)
    ckpt_path = out / "best.ckpt"
    lr_scale_cfg = dataclasses.replace(train_config)

    rows = []
    best_epoch = 0
    epochs_run = 0
    for epoch in range(1, train_config.max_epochs + 1):
        tic = time.perf_counter()
        seen = 0
        train_loss = 0.0
        for images, masks in D.batches(
            train_set, train_config.batch_size, seed=train_config.seed, epoch=epoch
        ):
            logits = M.forward(Tensor(images.astype(np.float32)), model_config, params)
            batch_loss = loss(
                logits, masks,
                ce_weight=train_config.ce_weight, dice_weight=train_config.dice_weight,
            )
            M.zero_grads(params)
            T.backward(batch_loss)
            grads = {name: t.grad for name, t in M.named_tensors(params)}
            optimizer_step(params, grads, state, lr_scale_cfg)
            train_loss += batch_loss.item() * images.shape[0]
            seen += images.shape[0]
        train_loss /= seen

        with T.no_grad():
            val_loss = 0.0
            preds, truths = [], []
            for logits, masks in _forward_batches(
                val_set, model_config, params, train_config.batch_size
            ):
                batch_loss = loss(
                    logits, masks,
                    ce_weight=train_config.ce_weight, dice_weight=train_config.dice_weight,
                )
                val_loss += batch_loss.item() * masks.shape[0]
                preds.extend(np.argmax(logits.array, axis=1))
                truths.extend(masks)
            val_loss /= len(val_set)
        val_metrics = X.evaluate_dataset(preds, truths, positive_class=D.CLASS_DISEASED)

        epochs_run = epoch
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        row.update({k: val_metrics.pooled[k] for k in X.METRIC_ORDER})
        row["seconds"] = time.perf_counter() - tic
        rows.append(row)
        if progress is not None:
            progress(row)

        if stopper.update(val_loss):
            best_epoch = epoch
            M.save_checkpoint(params, ckpt_path)
        if stopper.should_stop:
            break
        if train_config.lr_decay_per_epoch:
            lr_scale_cfg = dataclasses.replace(
                lr_scale_cfg,
                learning_rate=lr_scale_cfg.learning_rate
                * (1.0 - train_config.lr_decay_per_epoch),
            )

    _write_log(rows, out / "train_log.csv")
    warning = _descent_warning([r["train_loss"] for r in rows])
    if warning:
        log.warning(warning)
    return TrainResult(
        log_rows=rows,
        best_epoch=best_epoch,
        best_val_loss=stopper.best,
        epochs_run=epochs_run,
        stopped_early=stopper.should_stop,
        checkpoint_path=str(ckpt_path),
        descent_warning=warning,
    )


def _write_log(rows, path):
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(
            f"{r['epoch']},{r['train_loss']:.10g},{r['val_loss']:.10g},"
            + ",".join(f"{r[k]:.6f}" for k in X.METRIC_ORDER)
            + f",{r['seconds']:.3f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _descent_warning(losses, window=10, required=0.9):
    """Loose sanity check: most 10-epoch windows should not increase the loss."""
    if len(losses) <= window:
        return None
    ok = sum(losses[i + window] <= losses[i] for i in range(len(losses) - window))
    frac = ok / (len(losses) - window)
    if frac < required:
        return (
            f"training loss descended in only {frac:.0%} of {window}-epoch windows "
            f"(expected >= {required:.0%})"
        )
    return None


# -- run config I/O ------------------------------------------------------------


def save_run_config(model_config, train_config, path):
    """One flat JSON document holding both config field sets."""
    merged = dataclasses.asdict(model_config)
    merged.update(dataclasses.asdict(train_config))
    Path(path).write_text(json.dumps(merged, indent=2) + "\n", encoding="utf-8")


def load_run_config(path):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise M.CheckpointError(f"cannot read run config {path}: {e}") from e
    model_fields = {f.name for f in dataclasses.fields(M.ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - model_fields - train_fields
    if unknown:
        raise T.ConfigError(f"unknown config fields: {sorted(unknown)}")
    model_config = M.ModelConfig(**{k: v for k, v in raw.items() if k in model_fields})
    train_config = TrainConfig(**{k: v for k, v in raw.items() if k in train_fields})
    return model_config, train_config


# -- evaluation -------------------------------------------------------------------


def evaluate(checkpoint, dataset_root, split_name, positive_class=D.CLASS_DISEASED):
    """Metrics of a checkpoint over one split of a dataset.

    The run config and split manifest are read from the checkpoint's
    directory; the split falls back to recomputing from the stored seed.
    Returns (DatasetMetrics, report rows) ready for formatting.
    """
    ckpt = Path(checkpoint)
    model_config, train_config = load_run_config(ckpt.parent / "config.json")
    params = M.load_checkpoint(ckpt, model_config)
    samples = D.load_dataset(dataset_root)
    if not samples:
        raise D.DataError(f"no samples found under {dataset_root}")
    manifest = ckpt.parent / "split.json"
    if manifest.exists():
        split = D.DatasetSplit.from_json(manifest.read_text(encoding="utf-8"))
    else:
        split = D.split_dataset(samples, seed=train_config.seed)
    wanted = getattr(split, split_name, None)
    if wanted is None:
        raise ValueError(f"unknown split {split_name!r}; use train, val, or test")
    by_id = {s.id: s for s in samples}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise D.DataError(f"split id {missing[0]!r} not present in {dataset_root}")
    subset = [by_id[i] for i in wanted]
    preds, truths = [], []
    with T.no_grad():
        for logits, masks in _forward_batches(
            subset, model_config, params, train_config.batch_size
        ):
            preds.extend(np.argmax(logits.array, axis=1))
            truths.extend(masks)
    result = X.evaluate_dataset(preds, truths, positive_class=positive_class)
    rows = [(split_name, result.pooled)]
    flags = {split_name: result.degenerate} if result.degenerate else None
    return result, rows, flags
