"""Epoch/batch training driver with the callback stack (checkpoint ->
plateau -> early stop), stratified validation split, and evaluation.

Per epoch: seeded shuffle, 32-sample batches (final partial batch
allowed), forward/loss/backward/step under the cosine x plateau learning
rate, then a full infer-mode validation pass and the callbacks in their
fixed order. Early stopping with restore_best copies the best-epoch
snapshot (parameters and batch-norm buffers) back in place, so the
restored model re-evaluates to exactly the recorded best loss.
"""

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as metrics_mod
from .checkpoint import checkpoint_from_model, save_checkpoint
from .data import AugmentConfig, Dataset, batches
from .errors import ClassTooSmall, EmptyDataset, LabelOutOfRange, NonFiniteLoss
from .layers import cross_entropy_loss
from .optim import CosineSchedule, OptimizerState, PlateauReducer, apply_step, cosine_lr
from .tensor import Tape, backward

LR_FLOOR = 1e-6  # floor on the composed cosine x plateau rate


@dataclass
class PlateauParams:
    enabled: bool = True
    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-6
    min_delta: float = 0.0


@dataclass
class CosineParams:
    enabled: bool = True
    lr_min: float = 0.0
    total_steps: int | None = None  # None -> max_epochs * batches per epoch


@dataclass
class TrainConfig:
    max_epochs: int = 20
    batch_size: int = 32
    val_fraction: float = 0.2
    early_stop_patience: int = 5
    restore_best: bool = True
    optimizer: str = "adam_like"
    base_lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau: PlateauParams = field(default_factory=PlateauParams)
    cosine: CosineParams = field(default_factory=CosineParams)
    seed: int = 0
    dtype: str = "f32"
    shuffle: bool = True
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    @classmethod
    def baseline(cls, **overrides):
        """20-epoch cap, from-scratch defaults."""
        return cls(**{"max_epochs": 20, **overrides})

    @classmethod
    def finetune(cls, **overrides):
        """12-epoch cap and the small fine-tuning rate."""
        return cls(**{"max_epochs": 12, "base_lr": 1e-4, **overrides})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr_used: float
    wall_time: float
    n_batches: int = 0
    events: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: object
    history: list
    best_checkpoint: object  # Checkpoint or None
    stopped_early: bool = False


class EarlyStopper:
    """Patience counter over validation loss with strict improvement."""

    def __init__(self, patience, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch, val_loss):
        """Returns True when training should stop after this epoch."""
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait == self.patience


def snapshot_state(model):
    return {name: t.data.copy() for name, t in model.named_tensors().items()}


def restore_state(model, snapshot):
    for name, t in model.named_tensors().items():
        t.data[...] = snapshot[name]


def split_train_val(dataset, fraction=0.2, seed=0):
    """Stratified split: per class, round(n * fraction) samples held out.

    Deterministic under seed; the two subsets are disjoint and cover the
    input. Raises ClassTooSmall when any class has fewer than 2 samples.
    """
    by_class = {}
    for i, img in enumerate(dataset.images):
        by_class.setdefault(img.label, []).append(i)
    for label, idxs in sorted(by_class.items()):
        if len(idxs) < 2:
            raise ClassTooSmall(f"class {label} has {len(idxs)} sample(s); need >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**30]))
    train_idx, val_idx = [], []
    for label in sorted(by_class):
        idxs = np.array(by_class[label])
        perm = rng.permutation(len(idxs))
        n_val = int(len(idxs) * fraction + 0.5)
        val_idx.extend(idxs[perm[:n_val]])
        train_idx.extend(idxs[perm[n_val:]])
    train_idx.sort()
    val_idx.sort()
    mk = lambda idxs: Dataset(
        images=[dataset.images[i] for i in idxs],
        class_names=dataset.class_names,
        augment=dataset.augment,
        dataset_id=dataset.dataset_id,
    )
    return mk(train_idx), mk(val_idx)


def _forward_dataset(model, dataset, batch_size, dtype):
    """Infer-mode forward over a dataset in its stored order (no shuffle,
    no augmentation); returns (probs[N,K], labels[N])."""
    probs = []
    labels = []
    for x, y in batches(
        dataset, batch_size=batch_size, train=False, dtype=dtype,
        workers=1, shuffle=False,
    ):
        probs.append(model.forward(x, mode="infer").data)
        labels.append(y)
    return np.concatenate(probs), np.concatenate(labels)


def dataset_loss_acc(model, dataset, batch_size=32, dtype="f32"):
    probs, labels = _forward_dataset(model, dataset, batch_size, dtype)
    n = len(labels)
    picked = np.maximum(probs[np.arange(n), labels], 1e-12)
    loss = float(-np.log(picked).sum() / n)
    acc = float((probs.argmax(axis=1) == labels).mean())
    return loss, acc


def evaluate(model, dataset, batch_size=32, model_id="model"):
    """Full infer-mode evaluation producing an EvalReport (argmax with the
    lowest-index tie-break, one-vs-rest AUC from the softmax scores)."""
    if len(dataset.images) == 0:
        raise EmptyDataset("cannot evaluate an empty dataset")
    if model.class_count is None:
        raise ValueError("model has no classification head")
    probs, labels = _forward_dataset(model, dataset, batch_size, model.dtype)
    preds = probs.argmax(axis=1)  # np.argmax picks the lowest index on ties
    cm = metrics_mod.confusion_from_predictions(labels, preds, dataset.class_names)
    return metrics_mod.build_report(
        cm, probs, labels, model_id=model_id, dataset_id=dataset.dataset_id
    )


def train(model, dataset, cfg, checkpoint_path=None):
    """Run the full training protocol; returns TrainResult.

    Callbacks run after each epoch's validation pass in the fixed order
    checkpoint -> plateau -> early-stop, so the best model is persisted
    before any stop decision. NonFiniteLoss aborts immediately with a
    diagnostic rather than skipping the bad batch.
    """
    if len(dataset.images) == 0:
        raise EmptyDataset("training needs a non-empty dataset")
    if model.class_count is None:
        raise ValueError("attach a classification head before training")
    labels = dataset.labels()
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise LabelOutOfRange(
            f"dataset labels exceed the model's {model.class_count} classes"
        )

    train_set, val_set = split_train_val(dataset, cfg.val_fraction, cfg.seed)
    if cfg.augment is not None:
        train_set = replace(train_set, augment=cfg.augment)
    n_batches = -(-len(train_set.images) // cfg.batch_size)

    cosine = None
    if cfg.cosine.enabled:
        total = cfg.cosine.total_steps or max(1, cfg.max_epochs * n_batches)
        cosine = CosineSchedule(cfg.base_lr, cfg.cosine.lr_min, total)
    reducer = None
    plateau_mult = 1.0
    if cfg.plateau.enabled:
        reducer = PlateauReducer(
            factor=cfg.plateau.factor,
            patience=cfg.plateau.patience,
            min_lr=cfg.plateau.min_lr,
            min_delta=cfg.plateau.min_delta,
        )

    opt = OptimizerState(
        rule=cfg.optimizer,
        base_lr=cfg.base_lr,
        current_lr=cfg.base_lr,
        momentum=cfg.momentum,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )
    stopper = EarlyStopper(cfg.early_stop_patience)
    history = []
    best_snapshot = None
    best_ckpt = None
    best_loss = math.inf
    step = 0
    stopped = False

    def effective_lr(step_idx):
        base = cosine_lr(cosine, step_idx) if cosine is not None else cfg.base_lr
        if reducer is not None:
            return max(base * plateau_mult, LR_FLOOR)
        return base

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.reseed_dropout(cfg.seed, epoch)
        shuffle_epoch = epoch if cfg.shuffle else 0
        loss_sum = 0.0
        correct = 0
        seen = 0
        batch_count = 0
        lr_used = effective_lr(step)
        for x, y in batches(
            train_set, batch_size=cfg.batch_size, seed=cfg.seed,
            epoch=shuffle_epoch, train=True, dtype=cfg.dtype,
        ):
            opt.current_lr = effective_lr(step)
            with Tape():
                probs = model.forward(x, mode="train")
                # once-per-batch finiteness check (release-mode NaN policy)
                if not np.all(np.isfinite(probs.data)):
                    raise NonFiniteLoss(
                        f"non-finite activations at epoch {epoch}, batch {batch_count}"
                    )
                loss = cross_entropy_loss(probs, y)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch}, batch {batch_count}"
                    )
                backward(loss)
            apply_step(opt, model)
            bs = len(y)
            loss_sum += loss_val * bs
            correct += int((probs.data.argmax(axis=1) == y).sum())
            seen += bs
            step += 1
            batch_count += 1

        val_loss, val_acc = dataset_loss_acc(
            model, val_set, batch_size=cfg.batch_size, dtype=cfg.dtype
        )
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=correct / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            lr_used=lr_used,
            wall_time=time.perf_counter() - t0,
            n_batches=batch_count,
        )

        # callbacks, fixed order: checkpoint -> plateau -> early stop
        if val_loss < best_loss:
            best_loss = val_loss
            best_snapshot = snapshot_state(model)
            if model.descriptor is not None:
                best_ckpt = checkpoint_from_model(
                    model,
                    epoch=epoch,
                    best_val_loss=val_loss,
                    best_val_acc=val_acc,
                    optimizer_hyperparams={
                        "rule": cfg.optimizer,
                        "base_lr": cfg.base_lr,
                        "step_count": opt.step_count,
                    },
                    rng_state={"seed": cfg.seed, "epoch": epoch},
                )
                if checkpoint_path is not None:
                    save_checkpoint(best_ckpt, checkpoint_path)
            record.events.append("checkpoint:best")
        else:
            record.events.append("checkpoint:skip")

        if reducer is not None:
            if reducer.update(val_loss):
                plateau_mult *= reducer.factor
                record.events.append("plateau:reduce")
            else:
                record.events.append(f"plateau:wait={reducer.wait}")

        stop = stopper.update(epoch, val_loss)
        record.events.append(f"early_stop:wait={stopper.wait}")
        history.append(record)
        if stop:
            record.events.append("early_stop:stop")
            stopped = True
            break

    if stopped and cfg.restore_best and best_snapshot is not None:
        restore_state(model, best_snapshot)
    return TrainResult(
        model=model, history=history, best_checkpoint=best_ckpt, stopped_early=stopped
    )


def write_history_csv(history, path):
    """CSV columns: epoch,train_loss,train_acc,val_loss,val_acc,lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])
        for r in history:
            writer.writerow(
                [
                    r.epoch,
                    f"{r.train_loss:.17g}",
                    f"{r.train_acc:.17g}",
                    f"{r.val_loss:.17g}",
                    f"{r.val_acc:.17g}",
                    f"{r.lr_used:.17g}",
                ]
            )
