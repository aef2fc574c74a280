"""Universe / group / task encoders, per-task decoders and the training objective.

Decoder inputs concatenate the present encoder outputs in the order
task, group, universe. The intent head reads the same concatenation of the
encoders' sentence representations.
"""

import enum
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from groupnlu import autograd as ag
from groupnlu.autograd import Variable
from groupnlu.crf import CrfParams, crf_nll, viterbi_decode
from groupnlu.errors import ContractError, DimensionError
from groupnlu.layers import (
    BiLstmEncoder,
    EmbeddingTable,
    IntentHead,
    bilstm_forward,
    embed_tokens,
    glorot_uniform,
    init_word_table,
    intent_logits,
)
from groupnlu.models import Batch, TaskRegistry, Vocabulary

logger = logging.getLogger(__name__)


class ArchitectureKind(str, enum.Enum):
    SINGLE_TASK = "single-task"
    PARALLEL_UNIV = "parallel-univ"
    PARALLEL_UNIV_TASK = "parallel-univ-task"
    PARALLEL_UNIV_GROUP_TASK = "parallel-univ-group-task"
    SERIAL = "serial"
    SERIAL_HIGHWAY = "serial-highway"
    SERIAL_HIGHWAY_SWAP = "serial-highway-swap"

    @property
    def has_universe(self) -> bool:
        return self is not ArchitectureKind.SINGLE_TASK

    @property
    def has_groups(self) -> bool:
        return self in _GROUPED

    @property
    def has_task_encoders(self) -> bool:
        return self is not ArchitectureKind.PARALLEL_UNIV

    @property
    def decoder_parts(self) -> int:
        return _DECODER_PARTS[self]


_GROUPED = {
    ArchitectureKind.PARALLEL_UNIV_GROUP_TASK,
    ArchitectureKind.SERIAL,
    ArchitectureKind.SERIAL_HIGHWAY,
    ArchitectureKind.SERIAL_HIGHWAY_SWAP,
}

_DECODER_PARTS = {
    ArchitectureKind.SINGLE_TASK: 1,
    ArchitectureKind.PARALLEL_UNIV: 1,
    ArchitectureKind.PARALLEL_UNIV_TASK: 2,
    ArchitectureKind.PARALLEL_UNIV_GROUP_TASK: 3,
    ArchitectureKind.SERIAL: 1,
    ArchitectureKind.SERIAL_HIGHWAY: 3,
    ArchitectureKind.SERIAL_HIGHWAY_SWAP: 3,
}


@dataclass(frozen=True)
class ModelConfig:
    architecture: ArchitectureKind = ArchitectureKind.SINGLE_TASK
    word_dim: int = 300
    char_dim: int = 100
    char_hidden: int = 64
    hidden: int = 128
    dropout: float = 0.5
    dropout_between_stages: bool = True
    freeze_word_embeddings: bool = False
    lambda_adv: float = 0.05
    gamma_ortho: float = 0.01
    w_sf: float = 1.0
    w_ic: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        payload = dict(self.__dict__)
        payload["architecture"] = self.architecture.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        values = dict(payload)
        values["architecture"] = ArchitectureKind(values["architecture"])
        return cls(**values)


@dataclass
class Discriminator:
    """Affine layer scoring which task a pooled shared representation came from."""

    name: str
    weight: Variable
    bias: Variable

    @classmethod
    def create(cls, name: str, input_dim: int, n_classes: int, rng: np.random.Generator) -> "Discriminator":
        return cls(
            name=name,
            weight=ag.parameter(glorot_uniform(rng, input_dim, n_classes, (input_dim, n_classes)), f"{name}.weight"),
            bias=ag.parameter(np.zeros(n_classes), f"{name}.bias"),
        )

    def logits(self, pooled: Variable) -> Variable:
        return pooled @ self.weight + self.bias

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias


@dataclass
class TaskDecoder:
    crf: CrfParams
    intent: IntentHead

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        yield from self.crf.named_parameters()
        yield from self.intent.named_parameters()


@dataclass
class FeatureBundle:
    """Pre-dropout encoder outputs [B, T, 2h] and sentence representations [B, 2h]."""

    mask: np.ndarray
    h_task: Optional[Variable] = None
    h_group: Optional[Variable] = None
    h_univ: Optional[Variable] = None
    rep_task: Optional[Variable] = None
    rep_group: Optional[Variable] = None
    rep_univ: Optional[Variable] = None


@dataclass
class DecoderOutput:
    emissions: Variable
    intent_logits: Variable
    mask: np.ndarray
    bundle: FeatureBundle


@dataclass
class MtlModel:
    config: ModelConfig
    registry: TaskRegistry
    vocab: Vocabulary
    word_table: EmbeddingTable
    char_table: EmbeddingTable
    char_encoder: BiLstmEncoder
    universe: Optional[BiLstmEncoder]
    groups: Dict[str, BiLstmEncoder]
    tasks: Dict[str, BiLstmEncoder]
    decoders: Dict[str, TaskDecoder]
    universe_discriminator: Optional[Discriminator]
    group_discriminators: Dict[str, Discriminator] = field(default_factory=dict)

    @property
    def kind(self) -> ArchitectureKind:
        return self.config.architecture

    @property
    def embedding_dim(self) -> int:
        return self.config.word_dim + 2 * self.config.char_hidden

    @property
    def decoder_width(self) -> int:
        return 2 * self.config.hidden * self.kind.decoder_parts

    def named_parameters(self) -> "OrderedDict[str, Variable]":
        params: "OrderedDict[str, Variable]" = OrderedDict()
        parts = [self.word_table, self.char_table, self.char_encoder]
        if self.universe is not None:
            parts.append(self.universe)
        parts.extend(self.groups.values())
        parts.extend(self.tasks.values())
        parts.extend(self.decoders.values())
        if self.universe_discriminator is not None:
            parts.append(self.universe_discriminator)
        parts.extend(self.group_discriminators.values())
        for part in parts:
            for name, var in part.named_parameters():
                if name in params:
                    raise ContractError(f"duplicate parameter name {name}")
                params[name] = var
        return params

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        registry: TaskRegistry,
        vocab: Vocabulary,
        word_vectors: Optional[Dict[str, np.ndarray]] = None,
    ) -> "MtlModel":
        rng = np.random.default_rng(config.seed)
        kind = config.architecture
        hidden, shared_out = config.hidden, 2 * config.hidden
        if kind.has_groups and not registry.groups:
            raise ContractError(f"{kind.value} needs at least one task group")

        word_table = init_word_table(
            vocab.words, word_vectors or {}, config.word_dim, rng, trainable=not config.freeze_word_embeddings
        )
        char_table = EmbeddingTable.create("embed.char", len(vocab.chars), config.char_dim, rng)
        char_encoder = BiLstmEncoder.create("char_encoder", config.char_dim, config.char_hidden, rng)
        emb = config.word_dim + 2 * config.char_hidden

        swap = kind is ArchitectureKind.SERIAL_HIGHWAY_SWAP
        serial = kind in (ArchitectureKind.SERIAL, ArchitectureKind.SERIAL_HIGHWAY)
        shared_in = shared_out if swap else emb
        universe = BiLstmEncoder.create("universe", shared_in, hidden, rng) if kind.has_universe else None
        groups = (
            {g.group_id: BiLstmEncoder.create(f"group.{g.group_id}", shared_in, hidden, rng) for g in registry.groups}
            if kind.has_groups
            else {}
        )
        task_in = 2 * shared_out if serial else emb
        tasks = (
            {t: BiLstmEncoder.create(f"task.{t}", task_in, hidden, rng) for t in registry.task_ids}
            if kind.has_task_encoders
            else {}
        )
        width = shared_out * kind.decoder_parts
        decoders = {
            spec.task_id: TaskDecoder(
                crf=CrfParams.create(f"decoder.{spec.task_id}.crf", width, len(spec.slot_labels), rng),
                intent=IntentHead.create(f"decoder.{spec.task_id}.intent", width, len(spec.intent_labels), rng),
            )
            for spec in registry
        }
        universe_disc = (
            Discriminator.create("disc.universe", shared_out, len(registry.task_ids), rng) if universe else None
        )
        group_discs = {
            g.group_id: Discriminator.create(f"disc.group.{g.group_id}", shared_out, len(g.task_ids), rng)
            for g in registry.groups
            if kind.has_groups and len(g.task_ids) > 1
        }
        model = cls(
            config=config,
            registry=registry,
            vocab=vocab,
            word_table=word_table,
            char_table=char_table,
            char_encoder=char_encoder,
            universe=universe,
            groups=groups,
            tasks=tasks,
            decoders=decoders,
            universe_discriminator=universe_disc,
            group_discriminators=group_discs,
        )
        model._check_wiring()
        logger.info(
            "Built %s model: %d tasks, %d groups, %d parameters",
            kind.value,
            len(registry.task_ids),
            len(groups),
            sum(v.data.size for v in model.named_parameters().values()),
        )
        return model

    def _check_wiring(self) -> None:
        expected = {1: 2, 2: 4, 3: 6}[self.kind.decoder_parts] * self.config.hidden
        for task_id, decoder in self.decoders.items():
            if decoder.crf.input_dim != expected or decoder.intent.input_dim != expected:
                raise DimensionError(
                    f"decoder for {task_id} reads width {decoder.crf.input_dim}, {self.kind.value} produces {expected}"
                )


def _dropout(model: MtlModel, x: Variable, training: bool, rng: Optional[np.random.Generator]) -> Variable:
    return ag.dropout(x, model.config.dropout, rng, training)


def encode(
    model: MtlModel,
    embedded: Variable,
    mask: np.ndarray,
    task_id: str,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Variable, Variable, FeatureBundle]:
    """Wire the encoders for ``model.kind``; returns (decoder input, decoder sentence rep, bundle)."""
    model.registry.task(task_id)
    kind = model.kind
    bundle = FeatureBundle(mask=np.asarray(mask, dtype=bool))

    def drop(x: Variable) -> Variable:
        return _dropout(model, x, training, rng)

    def stage(x: Variable) -> Variable:
        return drop(x) if model.config.dropout_between_stages else x

    group_encoder = model.groups.get(model.registry.task(task_id).group_id) if kind.has_groups else None

    if kind is ArchitectureKind.SERIAL_HIGHWAY_SWAP:
        bundle.h_task, bundle.rep_task = bilstm_forward(model.tasks[task_id], embedded, mask)
        second = stage(bundle.h_task)
        bundle.h_univ, bundle.rep_univ = bilstm_forward(model.universe, second, mask)
        bundle.h_group, bundle.rep_group = bilstm_forward(group_encoder, second, mask)
    elif kind in (ArchitectureKind.SERIAL, ArchitectureKind.SERIAL_HIGHWAY):
        bundle.h_univ, bundle.rep_univ = bilstm_forward(model.universe, embedded, mask)
        bundle.h_group, bundle.rep_group = bilstm_forward(group_encoder, embedded, mask)
        shared = ag.concat([stage(bundle.h_group), stage(bundle.h_univ)], axis=-1)
        bundle.h_task, bundle.rep_task = bilstm_forward(model.tasks[task_id], shared, mask)
    else:
        if kind.has_universe:
            bundle.h_univ, bundle.rep_univ = bilstm_forward(model.universe, embedded, mask)
        if group_encoder is not None:
            bundle.h_group, bundle.rep_group = bilstm_forward(group_encoder, embedded, mask)
        if kind.has_task_encoders:
            bundle.h_task, bundle.rep_task = bilstm_forward(model.tasks[task_id], embedded, mask)

    if kind is ArchitectureKind.SERIAL:
        states, reps = [bundle.h_task], [bundle.rep_task]
    else:
        pairs = [(bundle.h_task, bundle.rep_task), (bundle.h_group, bundle.rep_group), (bundle.h_univ, bundle.rep_univ)]
        states = [h for h, _ in pairs if h is not None]
        reps = [r for _, r in pairs if r is not None]
    decoder_input = ag.concat([drop(h) for h in states], axis=-1) if len(states) > 1 else drop(states[0])
    decoder_rep = ag.concat(reps, axis=-1) if len(reps) > 1 else reps[0]
    return decoder_input, decoder_rep, bundle


def forward(
    model: MtlModel,
    batch: Batch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> DecoderOutput:
    embedded = embed_tokens(
        batch.word_ids, batch.char_ids, batch.char_mask, model.word_table, model.char_table, model.char_encoder
    )
    embedded = _dropout(model, embedded, training, rng)
    decoder_input, decoder_rep, bundle = encode(model, embedded, batch.mask, batch.task_id, training, rng)
    decoder = model.decoders[batch.task_id]
    return DecoderOutput(
        emissions=decoder.crf.emissions(decoder_input),
        intent_logits=intent_logits(decoder.intent, decoder_rep),
        mask=batch.mask,
        bundle=bundle,
    )


def task_loss(
    model: MtlModel,
    output: DecoderOutput,
    gold_slots: np.ndarray,
    gold_intents: np.ndarray,
    task_id: str,
) -> Variable:
    """Batch mean of w_SF * CRF NLL + w_IC * intent cross-entropy."""
    config = model.config
    if config.w_sf < 0 or config.w_ic < 0:
        raise ContractError("loss weights must be non-negative")
    crf = model.decoders[task_id].crf
    per_row = ag.scale(crf_nll(output.emissions, crf.transitions, gold_slots, output.mask), config.w_sf)
    per_row = per_row + ag.scale(ag.cross_entropy(output.intent_logits, gold_intents), config.w_ic)
    return ag.mean(per_row)


def tasks_loss(losses: Dict[str, Variable], registry: TaskRegistry) -> Variable:
    """Sum over groups and their tasks of alpha * task loss."""
    total: Optional[Variable] = None
    for group in registry.groups:
        for task_id in group.task_ids:
            if task_id not in losses:
                continue
            term = ag.scale(losses[task_id], registry.alpha(task_id))
            total = term if total is None else total + term
    unknown = set(losses) - set(registry.task_ids)
    if unknown:
        registry.task(sorted(unknown)[0])
    return total if total is not None else ag.constant(0.0)


def _pooled(states: Variable, mask: np.ndarray) -> Variable:
    lengths = mask.sum(axis=1, keepdims=True).astype(ag.DTYPE)
    weights = (mask / lengths)[:, :, None]
    return ag.masked_sum(states, weights, axis=1)


def adversarial_loss(model: MtlModel, bundle: FeatureBundle, task_id: str, reverse: bool = True) -> Variable:
    """Discriminators guess the task from mean-pooled shared states behind a gradient reversal."""
    if bundle.h_univ is None and bundle.h_group is None:
        raise ContractError(f"{model.kind.value} has no shared encoder to regularize")
    registry = model.registry
    batch = bundle.mask.shape[0]
    total: Optional[Variable] = None
    terms = []
    if bundle.h_univ is not None and model.universe_discriminator is not None:
        terms.append((model.universe_discriminator, bundle.h_univ, registry.universe_index(task_id)))
    group_disc = model.group_discriminators.get(registry.task(task_id).group_id)
    if bundle.h_group is not None and group_disc is not None:
        terms.append((group_disc, bundle.h_group, registry.group_index(task_id)))
    for disc, states, target in terms:
        pooled = _pooled(states, bundle.mask)
        if reverse:
            pooled = ag.grad_reverse(pooled)
        term = ag.mean(ag.cross_entropy(disc.logits(pooled), np.full(batch, target)))
        total = term if total is None else total + term
    return total if total is not None else ag.constant(0.0)


def orthogonality_loss(bundle: FeatureBundle) -> Variable:
    """Batch sum of squared Frobenius norms of H_task^T H_shared."""
    if bundle.h_task is None:
        raise ContractError("orthogonality_loss needs task-specific states")
    total: Optional[Variable] = None
    for shared in (bundle.h_univ, bundle.h_group):
        if shared is None:
            continue
        if shared.shape[:-1] != bundle.h_task.shape[:-1]:
            raise DimensionError(f"task states {bundle.h_task.shape} and shared states {shared.shape} disagree")
        task_states = bundle.h_task
        if task_states.data.ndim == 2:
            task_states = ag.reshape(task_states, (1,) + task_states.shape)
            shared = ag.reshape(shared, (1,) + shared.shape)
        cross = ag.swapaxes(task_states, -1, -2) @ shared
        term = ag.sum(cross * cross)
        total = term if total is None else total + term
    return total if total is not None else ag.constant(0.0)


def total_loss(tasks: Variable, adv: Optional[Variable], ortho: Optional[Variable], config: ModelConfig) -> Variable:
    if config.lambda_adv < 0 or config.gamma_ortho < 0:
        raise ContractError("lambda and gamma must be non-negative")
    total = tasks
    if adv is not None and config.lambda_adv:
        total = total + ag.scale(adv, config.lambda_adv)
    if ortho is not None and config.gamma_ortho:
        total = total + ag.scale(ortho, config.gamma_ortho)
    return total


@dataclass
class BatchObjective:
    loss: Variable
    task: Variable
    adversarial: Optional[Variable]
    orthogonality: Optional[Variable]


def batch_objective(
    model: MtlModel,
    batch: Batch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> BatchObjective:
    """alpha_task * task loss + lambda * adversarial + gamma * orthogonality for one batch."""
    output = forward(model, batch, training, rng)
    task = task_loss(model, output, batch.slot_ids, batch.intent_ids, batch.task_id)
    weighted = tasks_loss({batch.task_id: task}, model.registry)
    bundle = output.bundle
    adv = None
    if model.config.lambda_adv and (bundle.h_univ is not None or bundle.h_group is not None):
        adv = adversarial_loss(model, bundle, batch.task_id)
    ortho = None
    if model.config.gamma_ortho and bundle.h_task is not None and (bundle.h_univ is not None or bundle.h_group is not None):
        ortho = orthogonality_loss(bundle)
    return BatchObjective(total_loss(weighted, adv, ortho, model.config), task, adv, ortho)


@dataclass
class Prediction:
    tokens: Tuple[str, ...]
    tags: List[str]
    intent: str
    score: float


def decode(model: MtlModel, batch: Batch) -> List[Prediction]:
    with ag.no_grad():
        output = forward(model, batch, training=False)
    spec = model.registry.task(batch.task_id)
    transitions = model.decoders[batch.task_id].crf.transitions.data
    intents = np.argmax(output.intent_logits.data, axis=-1)
    predictions = []
    for row, utterance in enumerate(batch.utterances):
        length = int(batch.lengths[row])
        tag_ids, score = viterbi_decode(output.emissions.data[row, :length], transitions)
        predictions.append(
            Prediction(
                tokens=utterance.tokens,
                tags=[spec.slot_labels.label_of(i) for i in tag_ids],
                intent=spec.intent_labels.label_of(int(intents[row])),
                score=score,
            )
        )
    return predictions
