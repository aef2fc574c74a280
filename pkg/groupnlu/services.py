import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from groupnlu.checkpoint import LoadedCheckpoint, load_checkpoint
from groupnlu.config import EnvConfig, RunConfig, validate_run_config, write_resolved
from groupnlu.data import build_registry, build_vocab, encode_batch, load_corpus, split_snips, write_corpus
from groupnlu.errors import CompatibilityError, ConfigError, ContractError
from groupnlu.evaluation import (
    MetricReport,
    aggregate_report,
    extract_chunks,
    render_table,
    write_records,
    write_workbook,
)
from groupnlu.layers import load_pretrained_vectors
from groupnlu.models import Utterance
from groupnlu.mtl_model import MtlModel, decode
from groupnlu.training import TrainResult, Trainer, evaluate_model

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


def load_split(config: RunConfig, split: str) -> Dict[str, List[Utterance]]:
    corpora = {}
    for task in config.tasks:
        path = getattr(task, split)
        if path is None:
            continue
        corpora[task.name] = load_corpus(path, fmt=task.format, task_id=task.name)
    return corpora


def count_unseen_labels(model: MtlModel, corpora: Dict[str, List[Utterance]]) -> int:
    unseen = 0
    for task_id, corpus in corpora.items():
        spec = model.registry.task(task_id)
        for u in corpus:
            unseen += sum(1 for tag in u.slots if tag not in spec.slot_labels)
            unseen += u.intent not in spec.intent_labels
    return unseen


@dataclass
class PreparedRun:
    model: MtlModel
    train: Dict[str, List[Utterance]]
    dev: Dict[str, List[Utterance]]


class TrainingService:
    def __init__(self, env: EnvConfig) -> None:
        self.env = env

    def prepare(self, config: RunConfig) -> PreparedRun:
        train = load_split(config, "train")
        for name, corpus in train.items():
            if not corpus:
                raise ConfigError([(f"tasks.{name}.train", "training corpus is empty")])
        dev = load_split(config, "dev")
        vectors = load_pretrained_vectors(config.embeddings, config.word_dim) if config.embeddings else None
        vocab = build_vocab(
            [u for corpus in train.values() for u in corpus],
            pretrained_tokens=vectors.keys() if vectors else None,
        )
        registry = build_registry(
            config.groups(), vocab, {name: len(corpus) for name, corpus in train.items()}, config.alpha_mode
        )
        model = MtlModel.build(config.build_model_config(), registry, vocab, word_vectors=vectors)
        unseen = count_unseen_labels(model, dev)
        if unseen:
            logger.warning("%d dev labels never occur in training data; they are scored as-is", unseen)
        return PreparedRun(model=model, train=train, dev=dev)

    def train(self, config: RunConfig, resume: Optional[str] = None) -> TrainResult:
        write_resolved(config, config.output_dir)
        if resume:
            loaded = load_checkpoint(resume)
            model = loaded.model
            expected = [name for _, members in config.groups() for name in members]
            if model.registry.task_ids != expected:
                raise CompatibilityError(f"{resume} was trained on tasks {model.registry.task_ids}")
            train = load_split(config, "train")
            dev = load_split(config, "dev")
        else:
            prepared = self.prepare(config)
            model, train, dev = prepared.model, prepared.train, prepared.dev
        trainer = Trainer(
            model,
            train,
            dev,
            config.build_train_settings(),
            output_dir=config.output_dir,
            run_config=config.model_dump(),
        )
        if resume:
            trainer.restore(loaded.training_state, loaded.moments)
        result = trainer.fit()

        best_path = os.path.join(config.output_dir, "best.ckpt")
        if dev and os.path.exists(best_path):
            best = load_checkpoint(best_path).model
            report = aggregate_report(evaluate_model(best, dev, config.batch_size), best.registry)
            write_report(report, os.path.join(config.output_dir, "dev_report"))
            logger.info("Best checkpoint dev report:\n%s", render_table(report))
        return result


def write_report(report: MetricReport, stem: str) -> None:
    write_records(report, f"{stem}.jsonl")
    write_workbook(report, f"{stem}.xlsx")
    with open(f"{stem}.txt", "w", encoding="utf-8") as handle:
        handle.write(render_table(report) + "\n")


class EvaluationService:
    def __init__(self, env: EnvConfig) -> None:
        self.env = env

    def evaluate(self, checkpoint_path: str, split: str = "dev", gold_as_prediction: bool = False) -> MetricReport:
        loaded = load_checkpoint(checkpoint_path)
        config = validate_run_config(loaded.run_config, check_paths=False)
        model = loaded.model
        known = set(model.registry.task_ids)
        configured = {task.name for task in config.tasks}
        if known != configured:
            raise CompatibilityError(f"checkpoint tasks {sorted(known)} differ from its config {sorted(configured)}")
        missing = [
            (f"tasks.{idx}.{split}", f"{getattr(t, split)} does not exist")
            for idx, t in enumerate(config.tasks)
            if getattr(t, split) is not None and not os.path.exists(getattr(t, split))
        ]
        if missing:
            raise ConfigError(missing)
        corpora = load_split(config, split)
        if not corpora:
            raise ConfigError([(f"tasks.*.{split}", f"no task has a {split} split")])
        unseen = count_unseen_labels(model, corpora)
        if unseen:
            logger.warning("%d %s labels never occur in training data; they are scored as-is", unseen, split)
        metrics = evaluate_model(model, corpora, config.batch_size, gold_as_prediction=gold_as_prediction)
        report = aggregate_report(metrics, model.registry)
        stem = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), f"eval_{split}")
        write_report(report, stem)
        return report


@dataclass
class PredictionView:
    task_id: str
    tokens: List[str]
    tags: List[str]
    intent: str
    score: float

    @property
    def frame(self) -> str:
        """``play_artist(artist="madonna")``."""
        slots = [
            f'{chunk.label}="{" ".join(self.tokens[chunk.start:chunk.end])}"' for chunk in extract_chunks(self.tags)
        ]
        return f"{self.intent}({', '.join(slots)})"

    def table(self) -> str:
        width = max((len(token) for token in self.tokens), default=0)
        return "\n".join(f"{token.ljust(width)}  {tag}" for token, tag in zip(self.tokens, self.tags))


class PredictionService:
    def __init__(self, checkpoint: LoadedCheckpoint) -> None:
        self.model = checkpoint.model

    @classmethod
    def from_path(cls, path: str) -> "PredictionService":
        return cls(load_checkpoint(path))

    def predict(self, text: str, task_id: Optional[str] = None) -> PredictionView:
        tokens = text.split()
        if not tokens:
            raise ContractError("nothing to tag: the input is empty")
        task_id = task_id or self.model.registry.task_ids[0]
        self.model.registry.task(task_id)
        utterance = Utterance(tuple(tokens), tuple("O" for _ in tokens), "", task_id)
        prediction = decode(self.model, encode_batch([utterance], self.model.vocab, task_id))[0]
        return PredictionView(
            task_id=task_id,
            tokens=list(prediction.tokens),
            tags=list(prediction.tags),
            intent=prediction.intent,
            score=prediction.score,
        )


@dataclass
class SplitSummary:
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    intents: Dict[str, List[str]] = field(default_factory=dict)

    def table(self) -> str:
        lines = ["part".ljust(16) + "".join(split.rjust(8) for split in SPLITS) + "  intents"]
        for part, counts in self.counts.items():
            cells = "".join(str(counts.get(split, 0)).rjust(8) for split in SPLITS)
            lines.append(part.ljust(16) + cells + "  " + ", ".join(self.intents.get(part, [])))
        return "\n".join(lines)


class SnipsSplitService:
    """Splits a Snips corpus (``<split>.tsv`` files or Goo-layout ``<split>/`` dirs) into its three domains."""

    def split(self, in_dir: str, out_dir: str) -> SplitSummary:
        summary = SplitSummary()
        found = False
        for split in SPLITS:
            tsv = os.path.join(in_dir, f"{split}.tsv")
            goo = os.path.join(in_dir, split)
            if os.path.isfile(tsv):
                corpus = load_corpus(tsv, fmt="tsv")
            elif os.path.isdir(goo):
                corpus = load_corpus(goo, fmt="goo")
            else:
                continue
            found = True
            for part, utterances in split_snips(corpus).items():
                write_corpus(utterances, os.path.join(out_dir, part, f"{split}.tsv"))
                summary.counts.setdefault(part, {})[split] = len(utterances)
                seen = summary.intents.setdefault(part, [])
                for intent in sorted({u.intent for u in utterances}):
                    if intent not in seen:
                        seen.append(intent)
        if not found:
            raise ConfigError([("in", f"{in_dir} holds no train/dev/test split")])
        for part, counts in summary.counts.items():
            logger.info("%s: %s", part, ", ".join(f"{k}={v}" for k, v in counts.items()))
        return summary
