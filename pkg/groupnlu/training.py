"""Stochastic multi-task training: lazy Adam, epoch loop, early stopping and the Trainer."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from groupnlu import autograd as ag
from groupnlu.autograd import Variable
from groupnlu.checkpoint import save_checkpoint
from groupnlu.data import make_batches, replace_singletons, singleton_words
from groupnlu.errors import ContractError, NumericError
from groupnlu.evaluation import TaskMetrics, mean_metrics, score_predictions
from groupnlu.models import Batch, Utterance
from groupnlu.mtl_model import MtlModel, Prediction, batch_objective, decode

logger = logging.getLogger(__name__)

PATIENCE_MODES = ("any", "all")


@dataclass
class OptimizerState:
    """Adam state. Moments and step counts are kept per parameter name.

    Only parameters that received a gradient in a step are updated, so a batch
    of one task leaves every other task's private weights and moments alone.
    """

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def moments(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {"m": dict(self.first_moment), "v": dict(self.second_moment)}

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "counts": dict(self.counts),
        }

    @classmethod
    def restore(cls, payload: dict, moments: Mapping[str, Mapping[str, np.ndarray]]) -> "OptimizerState":
        return cls(
            lr=float(payload["lr"]),
            beta1=float(payload["beta1"]),
            beta2=float(payload["beta2"]),
            eps=float(payload["eps"]),
            step=int(payload["step"]),
            first_moment=dict(moments.get("m", {})),
            second_moment=dict(moments.get("v", {})),
            counts={k: int(v) for k, v in payload.get("counts", {}).items()},
        )


def _with_grads(params: Mapping[str, Variable]) -> List[Tuple[str, Variable]]:
    return [(name, var) for name, var in params.items() if var.requires_grad and var._grad is not None]


def clip_gradients(params: Mapping[str, Variable], max_norm: float) -> float:
    """Rescale gradients in place to a global L2 norm of at most ``max_norm``; returns the norm before clipping."""
    active = _with_grads(params)
    norm = math.sqrt(sum(float(np.sum(var._grad * var._grad)) for _, var in active))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for _, var in active:
            var._grad = var._grad * factor
    return norm


def adam_step(state: OptimizerState, params: Mapping[str, Variable]) -> int:
    """Bias-corrected Adam update; returns how many parameters moved. Gradients are cleared afterwards."""
    active = _with_grads(params)
    for name, var in active:
        if not np.all(np.isfinite(var._grad)):
            raise NumericError(f"non-finite gradient for {name}", parameter=name)
    state.step += 1
    for name, var in active:
        grad = var._grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or m.shape != var.shape:
            m = np.zeros_like(var.data)
            v = np.zeros_like(var.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        t = state.counts.get(name, 0) + 1
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        var.data = var.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.first_moment[name] = m
        state.second_moment[name] = v
        state.counts[name] = t
    for var in params.values():
        var.zero_grad()
    return len(active)


@dataclass
class EarlyStopState:
    patience: int = 6
    max_epochs: int = 50
    mode: str = "any"
    best_f1: float = -math.inf
    best_acc: float = -math.inf
    since_improvement: int = 0
    epoch: int = 0

    def to_dict(self) -> dict:
        payload = asdict(self)
        for key in ("best_f1", "best_acc"):
            if math.isinf(payload[key]):
                payload[key] = None
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "EarlyStopState":
        values = dict(payload)
        for key in ("best_f1", "best_acc"):
            if values.get(key) is None:
                values[key] = -math.inf
        return cls(**values)


def early_stop_update(state: EarlyStopState, slot_f1: float, intent_acc: float) -> str:
    """Record one epoch's aggregated dev metrics; returns "continue" or "stop".

    In ``any`` mode an epoch improves when either metric beats its best; in
    ``all`` mode both have to. Each best is tracked on its own.
    """
    if state.mode not in PATIENCE_MODES:
        raise ContractError(f"patience mode must be one of {PATIENCE_MODES}, got {state.mode!r}")
    state.epoch += 1
    f1_better = slot_f1 > state.best_f1
    acc_better = intent_acc > state.best_acc
    improved = (f1_better or acc_better) if state.mode == "any" else (f1_better and acc_better)
    if f1_better:
        state.best_f1 = slot_f1
    if acc_better:
        state.best_acc = intent_acc
    if improved:
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    if state.since_improvement >= state.patience or state.epoch >= state.max_epochs:
        return "stop"
    return "continue"


def epoch_budget_update(state: EarlyStopState) -> str:
    """Count an epoch without dev metrics: patience is not touched, only max_epochs can stop."""
    state.epoch += 1
    return "stop" if state.epoch >= state.max_epochs else "continue"


@dataclass
class TrainSettings:
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 6
    patience_mode: str = "any"
    clip_norm: Optional[float] = 5.0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    unk_replace: float = 0.0


@dataclass
class EpochStats:
    epoch: int
    task_loss: Dict[str, float]
    steps: int
    selections: List[Tuple[str, int]] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    seconds: float = 0.0


def train_epoch(
    model: MtlModel,
    task_batches: Mapping[str, Sequence[Batch]],
    optimizer: OptimizerState,
    settings: TrainSettings,
    selection_rng: np.random.Generator,
    dropout_rng: Optional[np.random.Generator] = None,
    epoch: int = 0,
) -> EpochStats:
    """Pick a random task with batches left, then a random remaining batch, step, repeat until all are used."""
    task_ids = model.registry.task_ids
    if not task_ids:
        raise ContractError("cannot train an empty task registry")
    for task_id in task_ids:
        if not task_batches.get(task_id):
            raise ContractError(f"task {task_id!r} has no training batches")

    started = time.monotonic()
    params = model.named_parameters()
    remaining = {task_id: list(range(len(task_batches[task_id]))) for task_id in task_ids}
    sums: Dict[str, float] = {task_id: 0.0 for task_id in task_ids}
    stats = EpochStats(epoch=epoch, task_loss={}, steps=0)

    while True:
        available = [task_id for task_id in task_ids if remaining[task_id]]
        if not available:
            break
        task_id = available[int(selection_rng.integers(len(available)))]
        pool = remaining[task_id]
        batch_index = pool.pop(int(selection_rng.integers(len(pool))))
        batch = task_batches[task_id][batch_index]

        with ag.recording() as tape:
            objective = batch_objective(model, batch, training=True, rng=dropout_rng)
        loss = objective.loss.item()
        if not math.isfinite(loss):
            for var in params.values():
                var.zero_grad()
            raise NumericError(f"non-finite loss on task {task_id} (epoch {epoch}, batch {batch_index})")
        ag.backward(objective.loss, tape)
        if settings.clip_norm:
            clip_gradients(params, settings.clip_norm)
        adam_step(optimizer, params)

        sums[task_id] += objective.task.item()
        stats.selections.append((task_id, batch_index))
        stats.losses.append(loss)
        stats.steps += 1

    stats.task_loss = {task_id: sums[task_id] / len(task_batches[task_id]) for task_id in task_ids}
    stats.seconds = time.monotonic() - started
    return stats


def predict_corpus(model: MtlModel, batches: Sequence[Batch]) -> List[Prediction]:
    predictions: List[Prediction] = []
    for batch in batches:
        predictions.extend(decode(model, batch))
    return predictions


def evaluate_model(
    model: MtlModel,
    corpora: Mapping[str, Sequence[Utterance]],
    batch_size: int = 32,
    gold_as_prediction: bool = False,
) -> List[TaskMetrics]:
    """Score every registered task that has a corpus, in registry order."""
    results = []
    for spec in model.registry:
        corpus = corpora.get(spec.task_id)
        if not corpus:
            continue
        gold_tags = [list(u.slots) for u in corpus]
        gold_intents = [u.intent for u in corpus]
        if gold_as_prediction:
            pred_tags, pred_intents = gold_tags, gold_intents
        else:
            batches = make_batches(list(corpus), model.vocab, batch_size, shuffle=False)
            predictions = predict_corpus(model, batches)
            pred_tags = [p.tags for p in predictions]
            pred_intents = [p.intent for p in predictions]
        results.append(
            score_predictions(spec.task_id, spec.group_id, gold_tags, gold_intents, pred_tags, pred_intents)
        )
    return results


def selection_key(metrics: Sequence[TaskMetrics], epoch: int) -> Tuple[float, float, int]:
    """Higher is better: mean slot F1, then mean intent accuracy, then the earlier epoch."""
    f1, acc = mean_metrics(metrics)
    return f1, acc, -epoch


@dataclass
class TrainResult:
    best_epoch: int
    best_dev: List[TaskMetrics]
    epochs_run: int
    stop_reason: str
    history: List[dict]


class Trainer:
    """Runs epochs until early stopping, writing train_log.jsonl, last.ckpt and best.ckpt to ``output_dir``."""

    def __init__(
        self,
        model: MtlModel,
        train: Mapping[str, Sequence[Utterance]],
        dev: Mapping[str, Sequence[Utterance]],
        settings: TrainSettings,
        output_dir: Optional[str] = None,
        run_config: Optional[dict] = None,
    ) -> None:
        self.model = model
        self.train = {task_id: list(train[task_id]) for task_id in model.registry.task_ids}
        self.dev = dev
        self.settings = settings
        self.output_dir = output_dir
        self.run_config = run_config or {}
        self.optimizer = OptimizerState(lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2, eps=settings.eps)
        self.stopper = EarlyStopState(
            patience=settings.patience, max_epochs=settings.max_epochs, mode=settings.patience_mode
        )
        selection, dropout, shuffle, unk = np.random.SeedSequence(settings.seed).spawn(4)
        self.selection_rng = np.random.default_rng(selection)
        self.dropout_rng = np.random.default_rng(dropout)
        self.shuffle_rng = np.random.default_rng(shuffle)
        self.unk_rng = np.random.default_rng(unk)
        self.singletons = singleton_words(self.train.values(), model.vocab)
        self.best_key: Optional[Tuple[float, float, int]] = None
        self.best_dev: List[TaskMetrics] = []
        self.history: List[dict] = []
        self.finished = False
        self._log_mode = "w"

    def _path(self, name: str) -> Optional[str]:
        return os.path.join(self.output_dir, name) if self.output_dir else None

    def training_state(self) -> dict:
        return {
            "early_stop": self.stopper.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "rng": {
                "selection": self.selection_rng.bit_generator.state,
                "dropout": self.dropout_rng.bit_generator.state,
                "shuffle": self.shuffle_rng.bit_generator.state,
                "unk": self.unk_rng.bit_generator.state,
            },
            "best_key": list(self.best_key) if self.best_key is not None else None,
            "best_dev": [asdict(m) for m in self.best_dev],
            "history": self.history,
            "finished": self.finished,
        }

    def restore(self, training_state: dict, moments: Mapping[str, Mapping[str, np.ndarray]]) -> None:
        """Continue from a checkpoint written by this class."""
        self.stopper = EarlyStopState.from_dict(training_state["early_stop"])
        self.optimizer = OptimizerState.restore(training_state["optimizer"], moments)
        rng = training_state["rng"]
        self.selection_rng.bit_generator.state = rng["selection"]
        self.dropout_rng.bit_generator.state = rng["dropout"]
        self.shuffle_rng.bit_generator.state = rng["shuffle"]
        if "unk" in rng:
            self.unk_rng.bit_generator.state = rng["unk"]
        key = training_state.get("best_key")
        self.best_key = tuple(key) if key is not None else None
        self.best_dev = [TaskMetrics(**m) for m in training_state.get("best_dev", [])]
        self.history = list(training_state.get("history", []))
        self.finished = bool(training_state.get("finished", False))
        self._log_mode = "a"
        logger.info("Resuming after epoch %d (optimizer step %d)", self.stopper.epoch, self.optimizer.step)

    def _epoch_batches(self) -> Dict[str, List[Batch]]:
        batches = {
            task_id: make_batches(
                corpus, self.model.vocab, self.settings.batch_size, seed=int(self.shuffle_rng.integers(2**31))
            )
            for task_id, corpus in self.train.items()
        }
        rate = self.settings.unk_replace
        if rate > 0:
            batches = {
                task_id: [replace_singletons(b, self.singletons, rate, self.unk_rng) for b in task_batches]
                for task_id, task_batches in batches.items()
            }
        return batches

    def _save(self, name: str) -> None:
        path = self._path(name)
        if path is None:
            return
        save_checkpoint(path, self.model, self.run_config, self.training_state(), self.optimizer.moments())

    def _log_epoch(self, record: dict) -> None:
        """A fresh run starts the log over; a restored one appends to it."""
        path = self._path("train_log.jsonl")
        if path is None:
            return
        os.makedirs(self.output_dir, exist_ok=True)
        with open(path, self._log_mode, encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._log_mode = "a"

    def run_epoch(self) -> str:
        epoch = self.stopper.epoch + 1
        stats = train_epoch(
            self.model,
            self._epoch_batches(),
            self.optimizer,
            self.settings,
            self.selection_rng,
            self.dropout_rng,
            epoch=epoch,
        )
        dev = evaluate_model(self.model, self.dev, self.settings.batch_size)
        if dev:
            dev_f1, dev_acc = mean_metrics(dev)
            decision = early_stop_update(self.stopper, dev_f1, dev_acc)
        else:
            dev_f1, dev_acc = 0.0, 0.0
            if epoch == 1:
                logger.warning("No dev data; training runs to max_epochs and keeps the latest epoch as best")
            decision = epoch_budget_update(self.stopper)
        if self.stopper.since_improvement:
            logger.warning(
                "Epoch %d did not improve dev metrics (%d/%d)",
                epoch,
                self.stopper.since_improvement,
                self.stopper.patience,
            )

        record = {
            "epoch": epoch,
            "task_loss": stats.task_loss,
            "dev": {m.task_id: {"intent_acc": m.intent_acc, "slot_f1": m.slot_f1} for m in dev},
            "dev_mean": {"intent_acc": dev_acc, "slot_f1": dev_f1},
            "seconds": round(stats.seconds, 3),
            "steps": stats.steps,
        }
        self.history.append(record)
        self._log_epoch(record)
        logger.info(
            "epoch %d: loss %s | dev slot_f1 %.2f intent_acc %.2f | %d steps in %.1fs",
            epoch,
            " ".join(f"{t}={v:.4f}" for t, v in stats.task_loss.items()),
            dev_f1,
            dev_acc,
            stats.steps,
            stats.seconds,
        )

        key = selection_key(dev, epoch) if dev else (0.0, 0.0, -epoch)
        if self.best_key is None or key > self.best_key or not dev:
            self.best_key = key
            self.best_dev = dev
            self._save("best.ckpt")
        self.finished = decision == "stop"
        self._save("last.ckpt")
        return decision

    def fit(self) -> TrainResult:
        reason = "finished" if self.finished else ""
        while not self.finished:
            self.run_epoch()
        if not reason:
            reason = "max_epochs" if self.stopper.epoch >= self.stopper.max_epochs else "patience"
        best_epoch = -int(self.best_key[2]) if self.best_key is not None else 0
        logger.info("Training stopped after epoch %d (%s); best epoch %d", self.stopper.epoch, reason, best_epoch)
        return TrainResult(
            best_epoch=best_epoch,
            best_dev=self.best_dev,
            epochs_run=self.stopper.epoch,
            stop_reason=reason,
            history=self.history,
        )
