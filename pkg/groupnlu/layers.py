"""Embedding tables, bidirectional LSTM encoders and the intent head."""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from groupnlu import autograd as ag
from groupnlu.autograd import Variable
from groupnlu.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

PAD_ID = 0


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class EmbeddingTable:
    name: str
    weights: Variable
    trainable: bool = True

    @classmethod
    def create(
        cls,
        name: str,
        vocab_size: int,
        dim: int,
        rng: np.random.Generator,
        trainable: bool = True,
        init: Optional[np.ndarray] = None,
    ) -> "EmbeddingTable":
        if vocab_size < 2:
            raise ContractError("an embedding table needs at least the PAD and UNK rows")
        values = init if init is not None else rng.uniform(-0.1, 0.1, size=(vocab_size, dim))
        values = np.array(values, dtype=ag.DTYPE)
        values[PAD_ID] = 0.0
        weights = Variable(values, requires_grad=trainable, name=f"{name}.weights")
        return cls(name=name, weights=weights, trainable=trainable)

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def lookup(self, ids: np.ndarray) -> Variable:
        return ag.embedding_lookup(self.weights, ids, padding_idx=PAD_ID)

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        yield self.weights.name, self.weights


@dataclass
class LstmCell:
    """Gate blocks are laid out as input, forget, output, candidate."""

    w_input: Variable
    w_hidden: Variable
    bias: Variable

    @classmethod
    def create(cls, name: str, input_dim: int, hidden: int, rng: np.random.Generator) -> "LstmCell":
        w_input = np.concatenate([glorot_uniform(rng, input_dim, hidden, (input_dim, hidden)) for _ in range(4)], axis=1)
        w_hidden = np.concatenate([glorot_uniform(rng, hidden, hidden, (hidden, hidden)) for _ in range(4)], axis=1)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        return cls(
            w_input=ag.parameter(w_input, f"{name}.w_input"),
            w_hidden=ag.parameter(w_hidden, f"{name}.w_hidden"),
            bias=ag.parameter(bias, f"{name}.bias"),
        )

    @property
    def hidden(self) -> int:
        return self.w_hidden.shape[0]

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        for var in (self.w_input, self.w_hidden, self.bias):
            yield var.name, var


@dataclass
class BiLstmEncoder:
    name: str
    forward_cell: LstmCell
    backward_cell: LstmCell

    @classmethod
    def create(cls, name: str, input_dim: int, hidden: int, rng: np.random.Generator) -> "BiLstmEncoder":
        return cls(
            name=name,
            forward_cell=LstmCell.create(f"{name}.fwd", input_dim, hidden, rng),
            backward_cell=LstmCell.create(f"{name}.bwd", input_dim, hidden, rng),
        )

    @property
    def input_dim(self) -> int:
        return self.forward_cell.w_input.shape[0]

    @property
    def hidden(self) -> int:
        return self.forward_cell.hidden

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        yield from self.forward_cell.named_parameters()
        yield from self.backward_cell.named_parameters()


@dataclass
class IntentHead:
    name: str
    weight: Variable
    bias: Variable

    @classmethod
    def create(cls, name: str, input_dim: int, n_intents: int, rng: np.random.Generator) -> "IntentHead":
        return cls(
            name=name,
            weight=ag.parameter(glorot_uniform(rng, input_dim, n_intents, (input_dim, n_intents)), f"{name}.weight"),
            bias=ag.parameter(np.zeros(n_intents), f"{name}.bias"),
        )

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias


def _check_prefix_mask(mask: np.ndarray) -> None:
    if mask.shape[1] == 0:
        return
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ContractError("bilstm_forward got a row with no real tokens")
    expected = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(mask, expected):
        raise ContractError("mask must mark a contiguous prefix of real tokens")


def _run_direction(cell: LstmCell, projected: Variable, mask: np.ndarray, reverse: bool) -> Tuple[Variable, Variable]:
    batch, steps = mask.shape
    hidden = cell.hidden
    h = ag.constant(np.zeros((batch, hidden)))
    c = ag.constant(np.zeros((batch, hidden)))
    outputs: List[Optional[Variable]] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        keep = mask[:, t : t + 1].astype(ag.DTYPE)
        hold = 1.0 - keep
        z = projected[:, t, :] + h @ cell.w_hidden
        i, f, o, g = ag.split(z, [hidden] * 4, axis=-1)
        c_new = ag.sigmoid(f) * c + ag.sigmoid(i) * ag.tanh(g)
        h_new = ag.sigmoid(o) * ag.tanh(c_new)
        c = c_new * keep + c * hold
        h = h_new * keep + h * hold
        outputs[t] = h_new * keep
    return ag.stack(outputs, axis=1), h


def bilstm_forward(encoder: BiLstmEncoder, inputs: Variable, mask: np.ndarray) -> Tuple[Variable, Variable]:
    """Run both directions over ``inputs`` [B, T, d] (or a single [T, d] utterance).

    Returns the per-token states [B, T, 2h] with zero rows at pad positions and
    the sentence representation [B, 2h]: the last real forward state next to
    the backward state at the first position.
    """
    single = inputs.data.ndim == 2
    mask = np.asarray(mask, dtype=bool)
    if single:
        inputs = ag.reshape(inputs, (1,) + inputs.shape)
        mask = mask.reshape(1, -1)
    if inputs.data.ndim != 3:
        raise DimensionError(f"bilstm_forward expects [B, T, d] inputs, got {inputs.shape}")
    if inputs.shape[-1] != encoder.input_dim:
        raise DimensionError(f"{encoder.name} expects width {encoder.input_dim}, got {inputs.shape[-1]}")
    if mask.shape != inputs.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match inputs {inputs.shape[:2]}")
    _check_prefix_mask(mask)

    batch, steps = mask.shape
    if steps == 0:
        states = ag.constant(np.zeros((batch, 0, encoder.output_dim)))
        rep = ag.constant(np.zeros((batch, encoder.output_dim)))
    else:
        fwd_proj = inputs @ encoder.forward_cell.w_input + encoder.forward_cell.bias
        bwd_proj = inputs @ encoder.backward_cell.w_input + encoder.backward_cell.bias
        fwd_states, fwd_last = _run_direction(encoder.forward_cell, fwd_proj, mask, reverse=False)
        bwd_states, bwd_first = _run_direction(encoder.backward_cell, bwd_proj, mask, reverse=True)
        states = ag.concat([fwd_states, bwd_states], axis=-1)
        rep = ag.concat([fwd_last, bwd_first], axis=-1)
    if single:
        return states[0], rep[0]
    return states, rep


def embed_tokens(
    word_ids: np.ndarray,
    char_ids: np.ndarray,
    char_mask: np.ndarray,
    word_table: EmbeddingTable,
    char_table: EmbeddingTable,
    char_encoder: BiLstmEncoder,
) -> Variable:
    """Word vector next to the char-BiLSTM summary of each token: [B, T, d_w + 2h_c].

    ``char_ids``/``char_mask`` are [B, T, C]. Every token, padding included,
    must mark at least its first character position as real.
    """
    word_ids = np.asarray(word_ids, dtype=np.int64)
    char_ids = np.asarray(char_ids, dtype=np.int64)
    char_mask = np.asarray(char_mask, dtype=bool)
    if word_ids.ndim != 2 or char_ids.shape[:2] != word_ids.shape or char_mask.shape != char_ids.shape:
        raise DimensionError(
            f"word ids {word_ids.shape}, char ids {char_ids.shape} and char mask {char_mask.shape} disagree"
        )
    batch, steps = word_ids.shape
    if steps == 0:
        raise ContractError("embed_tokens needs at least one token")
    words = word_table.lookup(word_ids)
    flat_chars = char_ids.reshape(batch * steps, -1)
    chars = char_table.lookup(flat_chars)
    _, char_rep = bilstm_forward(char_encoder, chars, char_mask.reshape(batch * steps, -1))
    char_rep = ag.reshape(char_rep, (batch, steps, char_encoder.output_dim))
    return ag.concat([words, char_rep], axis=-1)


def intent_logits(head: IntentHead, sentence_rep: Variable) -> Variable:
    if sentence_rep.shape[-1] != head.input_dim:
        raise DimensionError(f"{head.name} expects width {head.input_dim}, got {sentence_rep.shape[-1]}")
    if sentence_rep.data.ndim == 1:
        row = ag.reshape(sentence_rep, (1, head.input_dim))
        return ag.reshape(row @ head.weight + head.bias, (head.bias.shape[0],))
    return sentence_rep @ head.weight + head.bias


def load_pretrained_vectors(path: str, dim: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Read GloVe-style text vectors; malformed lines are skipped and counted."""
    vectors: Dict[str, np.ndarray] = {}
    skipped = 0
    with open(path, "r", encoding="utf-8", errors="replace") as handle:
        for line in handle:
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                skipped += 1
                continue
            if dim is None:
                dim = len(parts) - 1
            if len(parts) != dim + 1:
                skipped += 1
                continue
            try:
                values = np.array([float(x) for x in parts[1:]], dtype=ag.DTYPE)
            except ValueError:
                skipped += 1
                continue
            if not np.all(np.isfinite(values)):
                skipped += 1
                continue
            vectors[parts[0]] = values
    if skipped:
        logger.warning("Skipped %d malformed lines in %s", skipped, path)
    logger.info("Loaded %d pretrained vectors of width %s from %s", len(vectors), dim, path)
    return vectors


def init_word_table(
    tokens: Sequence[str],
    vectors: Dict[str, np.ndarray],
    dim: int,
    rng: np.random.Generator,
    trainable: bool = True,
) -> EmbeddingTable:
    """``tokens`` are the vocabulary entries in id order (PAD and UNK first)."""
    init = rng.uniform(-0.1, 0.1, size=(len(tokens), dim))
    covered = 0
    for idx, token in enumerate(tokens):
        vector = vectors.get(token.lower())
        if idx >= 2 and vector is not None:
            if vector.shape[0] != dim:
                raise DimensionError(f"pretrained vector for {token!r} has width {vector.shape[0]}, expected {dim}")
            init[idx] = vector
            covered += 1
    if len(tokens) > 2:
        logger.info("Pretrained coverage: %d of %d words", covered, len(tokens) - 2)
    return EmbeddingTable.create("embed.word", len(tokens), dim, rng, trainable=trainable, init=init)
