"""Loss, Adam, LR plateau decay, early stopping, and the training loop.

One training example is an augmented triple (h, r, t): the model scores every
entity as a tail for (h, r) and the loss pushes probability mass onto t.
The default loss is softmax cross entropy over all entities; a multi-label
sigmoid variant over all train-true tails is available behind loss="bce".
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate
from .model import DeepEModel, ModelConfig
from .numkernel import Rng


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending epoch/batch diagnostics."""


LOSSES = ("softmax", "bce")


@dataclass
class TrainConfig:
    lr: float = 0.003
    plateau_factor: float = 0.8
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 1000
    batch_size: int = 512
    l2: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 0
    eval_every: int = 1
    loss: str = "softmax"

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("max_epochs, batch_size and eval_every must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")


def cross_entropy_loss(scores: np.ndarray, gold: np.ndarray,
                       label_smoothing: float = 0.0) -> tuple[float, np.ndarray]:
    """Softmax cross entropy over entities; returns (mean loss, d loss / d scores).

    With label smoothing s, the target distribution is (1-s) on the gold
    entity plus s/|E| everywhere. The gradient is (softmax - target) / batch.
    """
    batch, n_classes = scores.shape
    gold = np.asarray(gold)
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0])

    rows = np.arange(batch)
    nll = log_denom - shifted[rows, gold]
    if label_smoothing > 0.0:
        smooth = log_denom - shifted.mean(axis=1)
        loss = float(((1 - label_smoothing) * nll + label_smoothing * smooth).mean())
    else:
        loss = float(nll.mean())

    dscores = exp  # turned into the softmax in place; exp is not reused
    dscores /= denom
    dscores[rows, gold] -= 1 - label_smoothing
    if label_smoothing > 0.0:
        dscores -= label_smoothing / n_classes
    dscores /= batch
    return loss, dscores.astype(scores.dtype, copy=False)


def binary_ce_loss(scores: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Elementwise sigmoid cross entropy against a multi-hot target matrix."""
    # log(1 + e^-|x|) plus a linear term is stable for both signs of x.
    loss_matrix = np.maximum(scores, 0) - scores * targets + np.log1p(np.exp(-np.abs(scores)))
    loss = float(loss_matrix.mean())
    sig = np.where(
        scores >= 0,
        1.0 / (1.0 + np.exp(-scores)),
        np.exp(scores) / (1.0 + np.exp(scores)),
    )
    dscores = (sig - targets) / scores.size
    return loss, dscores.astype(scores.dtype, copy=False)


class Adam:
    """Adam with bias correction; L2 enters as grad + l2 * param before the moments."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, named_params):
        self.named_params = list(named_params)
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(p), np.zeros_like(p)) for name, p, _ in self.named_params
        }

    def step(self, lr: float, l2: float = 0.0):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.BETA1 ** t
        bias2 = 1.0 - self.BETA2 ** t
        for name, param, grad in self.named_params:
            if param.shape != grad.shape:
                raise ValueError(f"parameter/gradient shape mismatch for {name}")
            g = grad + l2 * param if l2 else grad
            m, v = self.moments[name]
            m[...] = self.BETA1 * m + (1 - self.BETA1) * g
            v[...] = self.BETA2 * v + (1 - self.BETA2) * np.square(g)
            param[...] = param - lr * (m / bias1) / (np.sqrt(v / bias2) + self.EPS)

    def state_arrays(self) -> dict:
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"{name}.adam_m"] = m
            out[f"{name}.adam_v"] = v
        return out


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` consecutive epochs without a new best loss.

    Improvement is a strict decrease. The non-improvement counter resets both
    on improvement and right after a decay.
    """

    def __init__(self, lr: float, factor: float = 0.8, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = None
        self.bad_epochs = 0

    def observe(self, train_loss: float) -> float:
        if self.best is None or train_loss < self.best:
            self.best = train_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopper:
    """Stop when the tracked value fails to improve for `patience` consecutive checks."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = None
        self.bad_checks = 0

    def observe(self, value: float) -> bool:
        if self.best is None or value > self.best:
            self.best = value
            self.bad_checks = 0
            return True
        self.bad_checks += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_checks >= self.patience


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    lr: float
    valid_mrr: float | None = None
    valid_mr: float | None = None
    valid_hits1: float | None = None
    valid_hits10: float | None = None


@dataclass
class TrainResult:
    model: DeepEModel
    best_valid_mrr: float
    best_epoch: int
    epochs_run: int
    log: list = field(default_factory=list)
    final_state: dict = field(default_factory=dict)
    optimizer: Adam | None = None


LOG_COLUMNS = ("epoch", "train_loss", "lr", "valid_mrr", "valid_mr", "valid_hits1", "valid_hits10")


def write_log_csv(log: list, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log:
            cells = [str(row.epoch), f"{row.train_loss:.6g}", f"{row.lr:.6g}"]
            for value in (row.valid_mrr, row.valid_mr, row.valid_hits1, row.valid_hits10):
                cells.append("" if value is None else f"{value:.6g}")
            fh.write(",".join(cells) + "\n")


def _batch_bounds(n: int, batch_size: int) -> list:
    """Contiguous (start, stop) slices; a trailing 1-row slice is merged into
    its predecessor because train-mode batch norm needs at least 2 rows."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        start, _ = bounds.pop()
        prev_start, _ = bounds.pop()
        bounds.append((prev_start, n))
    return bounds


def _bce_target_matrix(dataset, heads, rels, n_entities, dtype):
    targets = np.zeros((len(heads), n_entities), dtype=dtype)
    for i, (h, r) in enumerate(zip(heads, rels)):
        tails = dataset.train_tails.get((int(h), int(r)))
        if tails is not None:
            targets[i, tails] = 1
    return targets


def train_loop(dataset, model_config: ModelConfig, train_config: TrainConfig,
               verbose: bool = False) -> TrainResult:
    """Train on shuffled augmented triples, keeping the checkpoint with best valid MRR.

    Training loss drives the plateau decay; filtered valid MRR (computed every
    eval_every epochs) drives best-model selection and early stopping.
    """
    model = DeepEModel(model_config, dataset.n_entities, dataset.n_relations)
    optimizer = Adam(model.named_parameters())
    scheduler = PlateauScheduler(
        train_config.lr, train_config.plateau_factor, train_config.plateau_patience
    )
    stopper = EarlyStopper(train_config.early_stop_patience)
    run_rng = Rng(train_config.seed)
    shuffle_rng = run_rng.child(1)
    mask_rng = run_rng.child(2)

    triples = dataset.train_augmented
    best_state = model.state_dict()
    best_mrr = -math.inf
    best_epoch = 0
    log = []
    epochs_run = 0

    for epoch in range(1, train_config.max_epochs + 1):
        epochs_run = epoch
        order = shuffle_rng.permutation(len(triples))
        total_loss = 0.0
        for start, stop in _batch_bounds(len(order), train_config.batch_size):
            batch = triples[order[start:stop]]
            heads, rels, tails = batch[:, 0], batch[:, 1], batch[:, 2]
            scores = model.score_all(heads, rels, "train", mask_rng)
            if train_config.loss == "softmax":
                loss, dscores = cross_entropy_loss(scores, tails, train_config.label_smoothing)
            else:
                targets = _bce_target_matrix(dataset, heads, rels, model.n_entities, scores.dtype)
                loss, dscores = binary_ce_loss(scores, targets)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}"
                )
            model.zero_grad()
            model.backward(dscores)
            optimizer.step(scheduler.lr, train_config.l2)
            total_loss += loss * len(batch)
        epoch_loss = total_loss / len(triples)
        lr = scheduler.observe(epoch_loss)

        row = EpochLog(epoch=epoch, train_loss=epoch_loss, lr=lr)
        if epoch % train_config.eval_every == 0:
            report = evaluate(model, dataset, "valid")
            row.valid_mrr = report.overall.mrr
            row.valid_mr = report.overall.mr
            row.valid_hits1 = report.overall.hits1
            row.valid_hits10 = report.overall.hits10
            if stopper.observe(report.overall.mrr):
                best_mrr = report.overall.mrr
                best_epoch = epoch
                best_state = model.state_dict()
        log.append(row)
        if verbose:
            mrr_str = "" if row.valid_mrr is None else f" valid_mrr={row.valid_mrr:.4f}"
            print(f"epoch {epoch}: loss={epoch_loss:.5f} lr={lr:.5g}{mrr_str}", flush=True)
        if stopper.should_stop:
            break

    final_state = model.state_dict()
    model.load_state_dict(best_state)
    return TrainResult(
        model=model,
        best_valid_mrr=best_mrr,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        log=log,
        final_state=final_state,
        optimizer=optimizer,
    )
