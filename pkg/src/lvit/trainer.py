"""Semi-supervised training: labeled supervision, EMA pseudo-labels, text-guided consistency."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .losses import LossConfig, binarize, dice_score, lv_loss, miou, sup_loss, unsup_loss
from .model import LViT
from .seeding import stream
from .synth import Dataset, SynthCase, apply_label_ratio
from .tensor import Tensor

# -- exponential pseudo-label iteration ------------------------------------


def epi_update(old: np.ndarray, new: np.ndarray, beta: float) -> np.ndarray:
    """beta·old + (1 − beta)·new."""
    old, new = np.asarray(old), np.asarray(new)
    if old.shape != new.shape:
        raise T.ShapeError(f"pseudo-label shape {old.shape} vs prediction {new.shape}")
    if new.size and (new.min() < 0 or new.max() > 1):
        raise ValueError("predictions must lie in [0, 1]")
    return beta * old + (1.0 - beta) * new


def epi_closed_form(p0: np.ndarray, preds: list, beta: float) -> np.ndarray:
    """Unrolled EMA: beta^n·P0 + (1 − beta)·Σ_i beta^(n−i)·P_i, preds oldest first."""
    if not preds:
        raise ValueError("need at least one prediction")
    n = len(preds)
    out = beta**n * np.asarray(p0, dtype=np.float64)
    for i, p in enumerate(preds, start=1):
        out = out + (1.0 - beta) * beta ** (n - i) * np.asarray(p, dtype=np.float64)
    return out


class PseudoLabelStore:
    """Soft pseudo-labels for the unlabeled cases, refined once per epoch.

    The first prediction for a case initialises its entry (iteration 0); each
    later update applies the EMA and advances that case's iteration by one.
    """

    def __init__(self, case_ids, beta: float = 0.99):
        if not 0 < beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        self.beta = beta
        self.case_ids = list(case_ids)
        self._known = set(self.case_ids)
        self.probs: dict[str, np.ndarray] = {}
        self.iteration: dict[str, int] = {}

    def update(self, case_id: str, pred: np.ndarray) -> np.ndarray:
        if case_id not in self._known:
            raise KeyError(f"case {case_id!r} is not in the unlabeled split")
        pred = np.asarray(pred, dtype=np.float64)
        if case_id not in self.probs:
            if pred.size and (pred.min() < 0 or pred.max() > 1):
                raise ValueError("predictions must lie in [0, 1]")
            self.probs[case_id] = pred.copy()
            self.iteration[case_id] = 0
        else:
            self.probs[case_id] = epi_update(self.probs[case_id], pred, self.beta)
            self.iteration[case_id] += 1
        return self.probs[case_id]

    def targets(self, case_ids) -> np.ndarray:
        return np.stack([self.probs[c] for c in case_ids])

    def complete(self) -> bool:
        return set(self.probs) == self._known

    def __len__(self) -> int:
        return len(self.probs)


# -- optimiser ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update, in place on ``params[k].data``."""
    if set(params) != set(grads) or set(params) != set(state.m):
        missing = set(params) ^ set(grads) | set(params) ^ set(state.m)
        raise KeyError(f"parameter/gradient/state keys differ: {sorted(missing)[:5]}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    beta: float = 0.99
    lr: float = 3e-4
    batch_size: int = 8
    patience: int = 10
    max_epochs: int = 100
    label_ratio: float = 0.25
    use_text: bool = True
    seed: int = 0
    # stop once train Dice on the labeled cases reaches this (overfit checks)
    target_train_dice: float | None = None

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0 < self.label_ratio <= 1:
            raise ValueError("label_ratio must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    sup_loss: float
    unsup_loss: float | None
    val_dice: float
    val_miou: float
    train_dice: float | None = None
    seconds: float = 0.0


@dataclass
class FitResult:
    history: list[EpochMetrics]
    best_epoch: int
    best_val_dice: float
    best_state: dict[str, np.ndarray] = field(repr=False)
    stopped_early: bool = False
    seconds: float = 0.0


def _images(cases: list[SynthCase]) -> np.ndarray:
    return np.stack([c.image for c in cases])


def _masks(cases: list[SynthCase]) -> np.ndarray:
    return np.stack([c.mask for c in cases]).astype(np.float64)


def predict(model: LViT, images: np.ndarray, tokens=None, batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities for a stack of images (no graph)."""
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            tok = None if tokens is None else tokens[i : i + batch_size]
            out.append(model(images[i : i + batch_size].astype(model.dtype), tok).data)
    model.train(was_training)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0,))


def evaluate(model: LViT, cases: list[SynthCase], tokens=None, batch_size: int = 8) -> tuple[float, float]:
    """Mean per-case Dice and mIoU of thresholded predictions."""
    if not cases:
        return float("nan"), float("nan")
    probs = predict(model, _images(cases), tokens, batch_size)
    pred, truth = binarize(probs), _masks(cases).astype(bool)
    dice = [dice_score(p, y) for p, y in zip(pred, truth)]
    iou = [miou(p, y) for p, y in zip(pred, truth)]
    return float(np.mean(dice)), float(np.mean(iou))


class Trainer:
    """Holds the per-run state (optimiser, pseudo-label store, text bank)."""

    def __init__(self, model: LViT, dataset: Dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None):
        self.model = model
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        apply_label_ratio(dataset.cases, cfg.label_ratio)
        train = dataset.split("train")
        self.labeled = [c for c in train if c.labeled]
        self.unlabeled = [c for c in train if not c.labeled]
        self.val = dataset.split("val")
        if not self.labeled:
            raise ValueError("no labeled training cases")
        self.store = PseudoLabelStore([c.id for c in self.unlabeled], cfg.beta)
        self.opt = OptimizerState.for_params(model.named_parameters())
        self.shuffle = stream(cfg.seed, "shuffle")
        self.epoch_index = 0

        self.tokens: dict[str, np.ndarray] = {}
        self.contrast: dict[str, np.ndarray] = {}
        self.bank = None
        if cfg.use_text:
            self._build_text(train)

    def _build_text(self, train: list[SynthCase]) -> None:
        from .text import ContrastiveBank, encode, select_contrastive

        max_tokens = self.model.config.max_tokens
        for c in train + self.val:
            self.tokens[c.id] = np.array(encode(c.report, max_tokens))
        # snapshot of the initial embedding table: retrieval is fixed for the run
        self.bank = ContrastiveBank(self.model.text_embedding.data)
        for c in self.labeled:
            self.bank.add(c.id, self.tokens[c.id], c.mask.astype(np.float64))
        for c in self.unlabeled:
            self.contrast[c.id], _ = select_contrastive(self.bank.vector(self.tokens[c.id]), self.bank)

    def _tokens(self, cases):
        if not self.cfg.use_text:
            return None
        return np.stack([self.tokens[c.id] for c in cases])

    def _batches(self, cases):
        order = self.shuffle.permutation(len(cases))
        bs = self.cfg.batch_size
        return [[cases[i] for i in order[k : k + bs]] for k in range(0, len(cases), bs)]

    def _step(self, loss: Tensor) -> None:
        params = self.model.named_parameters()
        self.model.zero_grad()
        grads = T.backward(loss, params=params.values())
        adam_step(params, {k: grads[p] for k, p in params.items()}, self.opt, self.cfg.lr)

    def epoch(self) -> EpochMetrics:
        start = time.perf_counter()
        model, dtype = self.model, self.model.dtype
        model.train()
        model.set_bn_update(True)

        sup = []
        for batch in self._batches(self.labeled):
            p = model(_images(batch).astype(dtype), self._tokens(batch))
            loss = sup_loss(p, _masks(batch).astype(dtype), self.loss_cfg)
            self._step(loss)
            sup.append(loss.item())

        unsup = []
        if self.unlabeled:
            probs = predict(model, _images(self.unlabeled), self._tokens(self.unlabeled), self.cfg.batch_size)
            for c, prob in zip(self.unlabeled, probs):
                self.store.update(c.id, prob)
            if not self.store.complete():
                raise RuntimeError("pseudo-label store does not cover the unlabeled split")

            model.train()
            model.set_bn_update(False)
            for batch in self._batches(self.unlabeled):
                ids = [c.id for c in batch]
                p = model(_images(batch).astype(dtype), self._tokens(batch))
                target = self.store.targets(ids).astype(dtype)
                if self.cfg.use_text:
                    lv = T.mean(T.concat([
                        T.reshape(lv_loss(p[i], self.contrast[cid].astype(dtype)), (1,))
                        for i, cid in enumerate(ids)
                    ], axis=0))
                    loss = unsup_loss(p, target, lv, self.loss_cfg)
                else:
                    loss = sup_loss(p, target, self.loss_cfg)
                self._step(loss)
                unsup.append(loss.item())
            model.set_bn_update(True)

        val_dice, val_miou = evaluate(model, self.val, self._tokens(self.val), self.cfg.batch_size)
        train_dice = None
        if self.cfg.target_train_dice is not None:
            train_dice, _ = evaluate(model, self.labeled, self._tokens(self.labeled), self.cfg.batch_size)
        metrics = EpochMetrics(
            epoch=self.epoch_index,
            sup_loss=float(np.mean(sup)),
            unsup_loss=float(np.mean(unsup)) if unsup else None,
            val_dice=val_dice,
            val_miou=val_miou,
            train_dice=train_dice,
            seconds=time.perf_counter() - start,
        )
        self.epoch_index += 1
        return metrics


def snapshot(model: LViT) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.state().items()}


def restore(model: LViT, state: dict[str, np.ndarray]) -> None:
    for k, t in model.state().items():
        t.data = state[k].copy()


def fit(model: LViT, dataset: Dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
        history_path=None, trainer: Trainer | None = None) -> FitResult:
    """Train with early stopping on validation Dice; leaves the best weights in ``model``."""
    start = time.perf_counter()
    trainer = trainer or Trainer(model, dataset, cfg, loss_cfg)
    history: list[EpochMetrics] = []
    best, best_epoch, best_state = -np.inf, -1, snapshot(model)
    stale, stopped = 0, False
    log = open(history_path, "w") if history_path else None
    try:
        for _ in range(cfg.max_epochs):
            m = trainer.epoch()
            history.append(m)
            if log:
                log.write(json.dumps(asdict(m)) + "\n")
                log.flush()
            if m.val_dice > best:
                best, best_epoch, best_state, stale = m.val_dice, m.epoch, snapshot(model), 0
            else:
                stale += 1
            if cfg.target_train_dice is not None and m.train_dice is not None and m.train_dice >= cfg.target_train_dice:
                break
            if stale >= cfg.patience:
                stopped = True
                break
    finally:
        if log:
            log.close()
    restore(model, best_state)
    return FitResult(history, best_epoch, float(best), best_state, stopped, time.perf_counter() - start)


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
