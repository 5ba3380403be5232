"""Experiment orchestration: folds, outlier exclusion, training, fine-tuning."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, NumericalError
from .unet import (
    LRSchedule,
    ModelState,
    UNetConfig,
    adam_step,
    backward,
    build_model,
    dice_ce_loss,
    forward,
    poly_lr,
    preset,
)
from .volume import REGIONS, Domain, region_mask

log = logging.getLogger(__name__)

OUTLIER_IDS = ("00051", "00097", "00041", "00084")
DATASET_SELECTORS = ("GLI", "GLI+SSA", "GLI+SSA2")
PSEUDO_DICE_DECAY = 0.9


# ---------------------------------------------------------------------------
# Folds and case selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: dict[str, int]
    seed: int

    def val_ids(self, fold: int) -> list[str]:
        self._check(fold)
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        self._check(fold)
        return sorted(i for i, f in self.assignment.items() if f != fold)

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.assignment.values() if f == j) for j in range(self.k)]

    def _check(self, fold: int):
        if not 0 <= fold < self.k:
            raise DataError(f"fold {fold} outside [0, {self.k})")


def make_folds(case_ids, seed: int, k: int = 5) -> FoldSplit:
    """Seeded shuffle of the sorted ids, then round-robin fold assignment."""
    ids = sorted(set(case_ids))
    if len(ids) != len(list(case_ids)):
        raise DataError("duplicate case ids")
    if len(ids) < k:
        raise DataError(f"{k}-fold split needs at least {k} cases, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(k, {ids[j]: pos % k for pos, j in enumerate(order)}, seed)


def exclude_outliers(case_ids, exclusion=OUTLIER_IDS) -> list[str]:
    """Drop excluded ids, keeping input order; warns about ids that are absent."""
    ids = list(case_ids)
    present = set(ids)
    missing = sorted(set(exclusion) - present)
    if missing:
        warnings.warn(f"exclusion ids not in dataset: {missing}", UserWarning, stacklevel=2)
    drop = set(exclusion)
    return [i for i in ids if i not in drop]


_ROLE = {Domain.GLI: "GLI", Domain.PHANTOM_CLEAN: "GLI", Domain.SSA: "SSA", Domain.PHANTOM_DEGRADED: "SSA"}


def select_cases(cases, selector: str, exclusion=OUTLIER_IDS) -> list:
    """Filter cases for a dataset selector; clean phantoms stand in for GLI, degraded for SSA."""
    if selector not in DATASET_SELECTORS:
        raise DataError(f"unknown dataset selector {selector!r}")
    cases = list(cases)
    if selector == "GLI":
        return [c for c in cases if _ROLE[c.domain] == "GLI"]
    if selector == "GLI+SSA":
        return cases
    keep = set(exclude_outliers([c.id for c in cases], exclusion))
    return [c for c in cases if c.id in keep]


# ---------------------------------------------------------------------------
# Configuration and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "GLI+SSA"
    epochs: int = 30
    unet: str = "desk2d"
    seed: int = 0
    initial_lr: float = 1e-2
    poly_exponent: float = 0.9
    iterations_per_epoch: int = 50
    val_batches: int = 4
    oversample_foreground: float = 0.5
    finetune_lr_factor: float = 0.1

    def __post_init__(self):
        if self.dataset not in DATASET_SELECTORS:
            raise DataError(f"unknown dataset selector {self.dataset!r}")
        if self.epochs < 0 or self.iterations_per_epoch < 1 or self.val_batches < 1:
            raise DataError("epochs must be >= 0; iterations and val batches >= 1")

    def unet_config(self) -> UNetConfig:
        return preset(self.unet, seed=self.seed)

    def schedule(self, finetune: bool = False) -> LRSchedule:
        lr = self.initial_lr * (self.finetune_lr_factor if finetune else 1.0)
        return LRSchedule(lr, self.poly_exponent, max(self.epochs, 1))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    pseudo_dice: float
    seconds: float
    phase: str = "TRAIN"


CSV_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "pseudo_dice", "seconds")


def write_records_csv(records, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, *(repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:])])


def read_records_csv(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        return [EpochRecord(int(row["epoch"]), *(float(row[c]) for c in CSV_COLUMNS[1:]))
                for row in reader]


def pseudo_dice_update(prev: float | None, epoch_dice: float) -> float:
    """Exponential moving average with decay 0.9; the first epoch passes through."""
    if prev is None:
        return float(epoch_dice)
    return PSEUDO_DICE_DECAY * prev + (1.0 - PSEUDO_DICE_DECAY) * epoch_dice


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------


@dataclass
class _Volume:
    id: str
    image: np.ndarray  # (4, D, H, W)
    labels: np.ndarray  # (D, H, W)
    fg: np.ndarray = field(init=False)

    def __post_init__(self):
        self.fg = np.argwhere(self.labels > 0)


def _as_volumes(cases) -> list[_Volume]:
    vols = []
    for c in cases:
        if c.truth is None:
            raise DataError(f"case {c.id} has no ground truth")
        vols.append(_Volume(c.id, c.images.stack(), c.truth.labels))
    return vols


def _crop(vol: _Volume, centre, patch, nd):
    """Patch of spatial size ``patch`` around ``centre`` (zero-padded at borders)."""
    dims = vol.labels.shape
    if nd == 2:
        lead, centre = (int(centre[0]),), centre[1:]
        space = dims[1:]
    else:
        lead, space = (), dims
    starts = [int(min(max(c - p // 2, 0), max(n - p, 0))) for c, p, n in zip(centre, patch, space)]
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch))
    img = vol.image[(slice(None), *lead, *sl)]
    lab = vol.labels[(*lead, *sl)]
    if img.shape[1:] != tuple(patch):
        pad = [(0, p - n) for p, n in zip(patch, img.shape[1:])]
        img = np.pad(img, [(0, 0), *pad])
        lab = np.pad(lab, pad)
    return img, lab


def sample_batch(vols: list[_Volume], config: UNetConfig, rng: np.random.Generator,
                 oversample: float):
    nd = config.dimensionality
    xs, ys, ids = [], [], []
    for _ in range(config.batch_size):
        vol = vols[int(rng.integers(len(vols)))]
        if vol.fg.size and rng.random() < oversample:
            centre = vol.fg[int(rng.integers(len(vol.fg)))]
        else:
            centre = [int(rng.integers(n)) for n in vol.labels.shape]
        x, y = _crop(vol, centre, config.patch_size, nd)
        xs.append(x)
        ys.append(y)
        ids.append(vol.id)
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.intp), ids


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TrainResult(NamedTuple):
    best: ModelState
    latest: ModelState
    records: list[EpochRecord]


def _region_counts(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    out = np.zeros((len(REGIONS), 3), np.int64)
    for i, region in enumerate(REGIONS.values()):
        p = region_mask(pred, region)
        t = region_mask(truth, region)
        out[i] = [np.sum(p & t), np.sum(p & ~t), np.sum(~p & t)]
    return out


def global_dice(counts: np.ndarray) -> float:
    """Mean over regions of 2TP / (2TP + FP + FN); regions absent everywhere score 1."""
    scores = []
    for tp, fp, fn in counts:
        denom = 2 * tp + fp + fn
        scores.append(1.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def validate(model: ModelState, batches) -> tuple[float, float]:
    """Mean deep-supervised loss and global foreground Dice over fixed batches."""
    losses = []
    counts = np.zeros((len(REGIONS), 3), np.int64)
    for x, y, _ in batches:
        logits = forward(model, x)
        losses.append(dice_ce_loss(logits, y).total)
        counts += _region_counts(np.argmax(logits[0], axis=1), y)
    return float(np.mean(losses)), global_dice(counts)


def fit(model: ModelState, train_cases, val_cases, schedule: LRSchedule, epochs: int,
        iterations_per_epoch: int = 50, val_batches: int = 4, oversample: float = 0.5,
        phase: str = "TRAIN", best: ModelState | None = None, val_seed: int | None = None,
        on_batch=None) -> TrainResult:
    """Run epochs ``model.epoch .. epochs - 1`` in place on ``model``.

    Validation uses a fixed set of patches drawn once from ``val_cases`` so
    that per-epoch numbers are comparable. ``on_batch(ids)`` is called with the
    case ids of every training batch.
    """
    cfg = model.config
    train_vols = _as_volumes(train_cases)
    val_vols = _as_volumes(val_cases)
    if not train_vols or not val_vols:
        raise DataError("training and validation sets must be non-empty")
    val_ids = {v.id for v in val_vols}
    overlap = val_ids & {v.id for v in train_vols}
    if overlap and val_cases is not train_cases:
        raise DataError(f"cases in both training and validation sets: {sorted(overlap)}")
    vrng = np.random.default_rng([cfg.seed if val_seed is None else val_seed, 7])
    vbatches = [sample_batch(val_vols, cfg, vrng, oversample) for _ in range(val_batches)]

    records: list[EpochRecord] = []
    for epoch in range(model.epoch, epochs):
        t0 = time.perf_counter()
        lr = poly_lr(schedule, min(epoch, schedule.max_epochs))
        losses = []
        for it in range(iterations_per_epoch):
            x, y, ids = sample_batch(train_vols, cfg, model.rng, oversample)
            if on_batch is not None:
                on_batch(ids)
            logits, cache = forward(model, x, keep_cache=True)
            loss = dice_ce_loss(logits, y)
            if not np.isfinite(loss.total):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {it}")
            adam_step(model, backward(model, cache, loss.grads), lr)
            losses.append(loss.total)
        val_loss, epoch_dice = validate(model, vbatches)
        pseudo = pseudo_dice_update(model.meta.get("pseudo_dice"), epoch_dice)
        model.epoch = epoch + 1
        model.meta["pseudo_dice"] = pseudo
        model.meta.setdefault("epoch_dice", []).append(epoch_dice)
        rec = EpochRecord(epoch + 1, lr, float(np.mean(losses)), val_loss, pseudo,
                          time.perf_counter() - t0, phase)
        records.append(rec)
        log.info("%s epoch %d lr %.3g train %.4f val %.4f pseudo-dice %.4f", phase, rec.epoch,
                 lr, rec.train_loss, val_loss, pseudo)
        if best is None or pseudo > best.meta.get("pseudo_dice", -1.0):
            best = model.copy()
    if best is None:
        best = model.copy()
    return TrainResult(best, model, records)


def train(model: ModelState, fold_split: FoldSplit, fold_index: int, dataset,
          config: ExperimentConfig, best: ModelState | None = None) -> TrainResult:
    """Train on every fold but ``fold_index`` and validate on that fold."""
    cases = {c.id: c for c in dataset}
    val_ids = fold_split.val_ids(fold_index)
    train_ids = fold_split.train_ids(fold_index)
    unknown = set(fold_split.assignment) - set(cases)
    if unknown:
        raise DataError(f"fold split references unknown cases: {sorted(unknown)[:5]}")
    val_set = set(val_ids)

    def hygiene(ids):
        leaked = val_set.intersection(ids)
        if leaked:
            raise AssertionError(f"validation cases in a training batch: {sorted(leaked)}")

    return fit(model, [cases[i] for i in train_ids], [cases[i] for i in val_ids],
               config.schedule(), config.epochs, config.iterations_per_epoch, config.val_batches,
               config.oversample_foreground, "TRAIN", best, on_batch=hygiene)


_ARCH_FIELDS = ("dimensionality", "base_features", "stage_count", "strides", "kernels",
                "patch_size", "deep_supervision_levels", "num_classes", "in_channels", "max_features")


def same_architecture(a: UNetConfig, b: UNetConfig) -> bool:
    return all(getattr(a, f) == getattr(b, f) for f in _ARCH_FIELDS)


def finetune(pretrained: ModelState, cases, config: ExperimentConfig, val_cases=None) -> TrainResult:
    """Continue training a copy of ``pretrained`` with reset optimizer moments.

    The learning rate starts at ``finetune_lr_factor`` times the pretraining
    rate with its own polynomial decay. Validation defaults to the training
    cases when no held-out set is given.
    """
    if not same_architecture(pretrained.config, config.unet_config()):
        raise DataError(f"pretrained architecture does not match config id {config.unet!r}")
    model = pretrained.copy()
    model.reset_optimizer()
    model.epoch = 0
    model.meta = {}
    model.rng = np.random.default_rng([config.seed, 2])
    cases = list(cases)
    val = list(val_cases) if val_cases is not None else cases
    if config.epochs == 0:
        return TrainResult(model, model, [])
    return fit(model, cases, val, config.schedule(finetune=True), config.epochs,
               config.iterations_per_epoch, config.val_batches, config.oversample_foreground,
               "FINETUNE", val_seed=config.seed)


def new_model(config: ExperimentConfig) -> ModelState:
    return build_model(config.unet_config())


def evaluate_cases(model: ModelState, cases) -> list:
    """Sliding-window predictions and region Dice reports for each case."""
    from .metrics import region_dice_report
    from .unet import sliding_window_predict

    out = []
    for c in cases:
        pred = sliding_window_predict(model, c)
        out.append((pred, region_dice_report(pred, c.truth, c.id)))
    return out


def records_equal(a, b, ignore=("seconds",)) -> bool:
    """Compare record sequences on every deterministic field."""
    names = [f.name for f in fields(EpochRecord) if f.name not in ignore]
    return len(a) == len(b) and all(
        all(getattr(x, n) == getattr(y, n) for n in names) for x, y in zip(a, b))


def empty_prediction(pred, region: str = "WT") -> bool:
    return not region_mask(pred, region).any()

