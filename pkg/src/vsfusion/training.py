"""Loss, Adam, plateau decay, early stopping, the epoch loop and the CV harness."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from . import tensor as tn
from .data import Dataset, SplitPlan, make_split_plan
from .metrics import EvalReport, evaluate
from .preprocess import Preprocessor, PrepConfig, ResampleReport

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
MIN_DELTA = 1e-9


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 500
    learning_rate: float = 1e-3
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 7
    restore_best: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


# --- loss ----------------------------------------------------------------------

def cross_entropy_loss(probs, labels, weights=(), l2: float = 0.0) -> tn.Tensor:
    """Mean of -log p[label] (input floored at 1e-12) plus ``l2`` times the squared weight norms."""
    labels = np.asarray(labels, dtype=np.int64)
    K = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"label index out of range [0, {K})")
    nll = tn.neg(tn.mean(tn.log(tn.clamp_min(tn.pick(probs, labels), LOG_FLOOR))))
    if l2 and weights:
        penalty = tn.sum(tn.stack([tn.sum(tn.square(w)) for w in weights]))
        nll = tn.add(nll, tn.mul(penalty, l2))
    return nll


def l2_penalty(params: dict[str, np.ndarray], l2: float) -> float:
    return l2 * float(sum(np.sum(v * v) for k, v in params.items() if M.is_weight(k)))


def nll_value(probs: np.ndarray, labels) -> float:
    p = probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
    return float(-np.mean(np.log(np.maximum(p, LOG_FLOOR))))


# --- optimiser ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise tn.DimensionError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_p, AdamState(new_m, new_v, t)


# --- schedules ------------------------------------------------------------------------

def _stagnation_events(history, patience: int, min_delta: float = MIN_DELTA) -> list[int]:
    """Epoch indices (0-based) at which ``patience`` stagnant epochs complete.

    The counter restarts on improvement and after each event.
    """
    best = math.inf
    wait = 0
    fired = []
    for i, value in enumerate(history):
        if value < best - min_delta:
            best, wait = value, 0
        else:
            wait += 1
            if wait >= patience:
                fired.append(i)
                wait = 0
    return fired


def plateau_scheduler(history, lr: float, patience: int = 5, factor: float = 0.1) -> float:
    """Learning rate after the last epoch in ``history`` (monitored values, lower is better).

    Decays by ``factor`` when ``patience`` epochs have passed without an
    improvement larger than 1e-9 since the last improvement or the last decay.
    """
    if history and (len(history) - 1) in _stagnation_events(history, patience):
        return lr * factor
    return lr


def epochs_since_best(history, min_delta: float = MIN_DELTA) -> int:
    best = math.inf
    wait = 0
    for value in history:
        if value < best - min_delta:
            best, wait = value, 0
        else:
            wait += 1
    return wait


def early_stop(history, patience: int = 10) -> bool:
    """True once ``patience`` consecutive epochs pass without improvement.

    Learning-rate decays do not reset this counter.
    """
    return bool(history) and epochs_since_best(history) >= patience


# --- fit ---------------------------------------------------------------------------------

@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int | None = None
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def loss_trajectory(self, key: str = "train_loss") -> list[float]:
        return [e[key] for e in self.epochs]


def _weights_of(P: dict[str, tn.Tensor]) -> list[tn.Tensor]:
    return [t for k, t in sorted(P.items()) if M.is_weight(k)]


def fit(train_x: dict, train_y, val_x: dict, val_y, config: M.ModelConfig,
        tconfig: TrainConfig, params: dict[str, np.ndarray] | None = None,
        on_epoch=None) -> tuple[dict[str, np.ndarray], RunRecord]:
    """Mini-batch training with plateau decay, early stopping and best-weight restore.

    ``train_x`` / ``val_x`` map eye/ppg/semantic to (N, T, D) arrays. The
    monitored quantity is the validation cross-entropy (without the L2 term).
    """
    tconfig.validate()
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    n = train_y.size
    if n == 0 or val_y.size == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = M.init_params(config) if params is None else {k: v.copy() for k, v in params.items()}
    record = RunRecord(config={"model": config.to_dict(), "train": asdict(tconfig)})
    state = AdamState.zeros_like(params)
    lr = tconfig.learning_rate
    monitored: list[float] = []
    best = (math.inf, params, None)
    started = time.perf_counter()

    for epoch in range(tconfig.max_epochs):
        order = np.random.default_rng(tconfig.seed + epoch).permutation(n)
        losses, correct = [], 0
        for start in range(0, n, tconfig.batch_size):
            idx = order[start:start + tconfig.batch_size]
            batch = {k: v[idx] for k, v in train_x.items()}
            P = M.as_tensors(params, requires_grad=True)
            with tn.GradTape() as tape:
                probs = M.forward(batch, P, config)
                loss = cross_entropy_loss(probs, train_y[idx], _weights_of(P), config.l2)
            value = loss.item()
            if not math.isfinite(value):
                record.stop_reason = "diverged"
                record.wall_time = time.perf_counter() - started
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}", record)
            grads = tape.gradient(loss, list(P.values()))
            params, state = adam_step(params, {k: grads[P[k]] for k in params}, state, lr,
                                      tconfig.beta1, tconfig.beta2, tconfig.epsilon)
            losses.append(value * idx.size)
            correct += int(np.sum(np.argmax(probs.data, axis=1) == train_y[idx]))

        val_probs = M.predict_proba(params, val_x, config)
        val_nll = nll_value(val_probs, val_y)
        monitored.append(val_nll)
        record.lr_history.append(lr)
        record.epochs.append({
            "epoch": epoch + 1,
            "train_loss": float(np.sum(losses) / n),
            "train_acc": correct / n,
            "val_loss": val_nll,
            "val_loss_l2": val_nll + l2_penalty(params, config.l2),
            "val_acc": float(np.mean(np.argmax(val_probs, axis=1) == val_y)),
            "lr": lr,
        })
        if on_epoch is not None:
            on_epoch(record.epochs[-1])
        if val_nll < best[0] - MIN_DELTA:
            best = (val_nll, params, epoch + 1)
        if early_stop(monitored, tconfig.early_stop_patience):
            record.stop_reason = "early_stop"
            break
        lr = plateau_scheduler(monitored, lr, tconfig.plateau_patience, tconfig.plateau_factor)
    else:
        record.stop_reason = "max_epochs"

    if tconfig.restore_best and best[2] is not None:
        params = best[1]
    record.best_epoch = best[2]
    record.wall_time = time.perf_counter() - started
    return params, record


# --- cross-validation ---------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    val_report: EvalReport
    test_report: EvalReport
    record: RunRecord
    params: dict[str, np.ndarray]
    model_config: M.ModelConfig
    preprocessor: Preprocessor
    resample: ResampleReport | None
    fit_ids: tuple[str, ...]


@dataclass
class CVResult:
    folds: list[FoldResult]
    plan: SplitPlan
    aggregate: dict


def resolve_model_config(template: M.ModelConfig, dataset: Dataset, prep: Preprocessor) -> M.ModelConfig:
    dims = prep.output_dims(dataset)
    return replace(template, eye_dim=dims["eye"], ppg_dim=dims["ppg"],
                   semantic_dim=dims["semantic"], n_classes=dataset.n_classes)


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Mean and population std across folds for accuracy, macro recall and macro F1."""
    out = {"n_folds": len(reports)}
    for key in ("accuracy", "macro_recall", "macro_f1"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std())
    K = len(reports[0].roc)
    for c in range(K):
        aucs = [r.roc[c].auc for r in reports if r.roc[c].auc is not None]
        out.setdefault("auc_mean", []).append(float(np.mean(aucs)) if aucs else None)
    out["param_count"] = reports[0].param_count
    out["param_mb"] = reports[0].param_mb
    return out


def train_fold(train: Dataset, val: Dataset, test: Dataset | None, template: M.ModelConfig,
               tconfig: TrainConfig, pconfig: PrepConfig, fold: int = 0,
               seed: int = 7) -> FoldResult:
    """Fit preprocessing on ``train`` only, resample, train, evaluate on val and test."""
    prep = Preprocessor(pconfig).fit(train)
    config = resolve_model_config(template, train, prep)
    config = replace(config, seed=template.seed + fold)
    tr_x = prep.transform(train)
    tr_x, tr_y, resample = prep.resample(tr_x, train.labels, seed + fold)
    va_x = prep.transform(val)
    params, record = fit(tr_x, tr_y, va_x, val.labels, config, replace(tconfig, seed=seed + fold))
    n_params = M.count_params(params)
    meta = {"param_count": n_params, "param_mb": M.params_megabytes(n_params), "fold": fold,
            "seed": seed, "config": config.to_dict()}
    val_report = evaluate(M.predict_proba(params, va_x, config), val.labels, config.n_classes, **meta)
    if test is not None:
        test_report = evaluate(M.predict_proba(params, prep.transform(test), config), test.labels,
                               config.n_classes, **meta)
    else:
        test_report = val_report
    return FoldResult(fold, val_report, test_report, record, params, config, prep, resample,
                      prep.fitted_ids)


def run_cv(dataset: Dataset, template: M.ModelConfig, tconfig: TrainConfig,
           pconfig: PrepConfig, k: int = 5, ratio: float = 0.8, seed: int = 7,
           folds: list[int] | None = None) -> CVResult:
    """8:2 split, k stratified folds on the training part, each evaluated on val and test."""
    plan = make_split_plan(dataset, ratio, k, seed)
    test = dataset.subset(plan.test)
    results = []
    for i, (tr_ids, va_ids) in enumerate(plan.folds):
        if folds is not None and i not in folds:
            continue
        logger.info("fold %d/%d: %d train, %d val, %d test", i + 1, k, len(tr_ids), len(va_ids), len(plan.test))
        results.append(train_fold(dataset.subset(tr_ids), dataset.subset(va_ids), test,
                                  template, tconfig, pconfig, i, seed))
    agg = {"test": aggregate_reports([r.test_report for r in results]),
           "validation": aggregate_reports([r.val_report for r in results])}
    return CVResult(results, plan, agg)
