"""Linear-chain CRF with virtual START/STOP states.

Transition matrices are (K+2) x (K+2) with ``START = K`` and ``STOP = K + 1``.
Entries into START and out of STOP hold ``IMPOSSIBLE`` and are never read by
the scoring code, so they receive no gradient.
"""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from groupnlu import autograd as ag
from groupnlu.autograd import Variable
from groupnlu.errors import ContractError, DimensionError
from groupnlu.layers import glorot_uniform

IMPOSSIBLE = -1e4


def initial_transitions(num_tags: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    size = num_tags + 2
    values = np.zeros((size, size)) if rng is None else rng.uniform(-0.1, 0.1, size=(size, size))
    values[:, num_tags] = IMPOSSIBLE
    values[num_tags + 1, :] = IMPOSSIBLE
    return values


@dataclass
class CrfParams:
    name: str
    projection: Variable
    bias: Variable
    transitions: Variable

    @classmethod
    def create(cls, name: str, input_dim: int, num_tags: int, rng: np.random.Generator) -> "CrfParams":
        if num_tags < 1:
            raise ContractError("a CRF needs at least one tag")
        return cls(
            name=name,
            projection=ag.parameter(glorot_uniform(rng, input_dim, num_tags, (input_dim, num_tags)), f"{name}.projection"),
            bias=ag.parameter(np.zeros(num_tags), f"{name}.bias"),
            transitions=ag.parameter(initial_transitions(num_tags, rng), f"{name}.transitions"),
        )

    @property
    def num_tags(self) -> int:
        return self.projection.shape[1]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    def emissions(self, states: Variable) -> Variable:
        if states.shape[-1] != self.input_dim:
            raise DimensionError(f"{self.name} expects width {self.input_dim}, got {states.shape[-1]}")
        return states @ self.projection + self.bias

    def named_parameters(self) -> Iterator[Tuple[str, Variable]]:
        for var in (self.projection, self.bias, self.transitions):
            yield var.name, var


def _batched(emissions: Variable, mask: Optional[np.ndarray]) -> Tuple[Variable, np.ndarray, bool]:
    single = emissions.data.ndim == 2
    if single:
        emissions = ag.reshape(emissions, (1,) + emissions.shape)
        mask = np.ones(emissions.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1)
    elif mask is None:
        mask = np.ones(emissions.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if emissions.data.ndim != 3 or mask.shape != emissions.shape[:2]:
        raise DimensionError(f"emissions {emissions.shape} and mask {mask.shape} disagree")
    if emissions.shape[1] < 1 or not np.all(mask[:, 0]):
        raise ContractError("CRF scoring needs at least one real token per row")
    return emissions, mask, single


def _check_transitions(transitions: Variable, num_tags: int) -> None:
    if transitions.shape != (num_tags + 2, num_tags + 2):
        raise DimensionError(f"transitions {transitions.shape} do not fit {num_tags} tags")


def sequence_score(
    emissions: Variable,
    transitions: Variable,
    tags: Sequence,
    mask: Optional[np.ndarray] = None,
) -> Variable:
    """Unnormalized score of ``tags``; scalar for [T, K] input, [B] for [B, T, K]."""
    emissions, mask, single = _batched(emissions, mask)
    batch, steps, num_tags = emissions.shape
    _check_transitions(transitions, num_tags)
    tags = np.asarray(tags, dtype=np.int64).reshape(batch, steps)
    real = np.where(mask, tags, 0)
    if np.any(real < 0) or np.any(real >= num_tags):
        raise ContractError(f"tag ids must lie in [0, {num_tags})")
    start, stop = num_tags, num_tags + 1
    rows = np.arange(batch)
    lengths = mask.sum(axis=1)

    emitted = ag.index(emissions, (rows[:, None], np.arange(steps)[None, :], real))
    score = ag.masked_sum(emitted, mask, axis=1)
    score = score + ag.index(transitions, (np.full(batch, start), real[:, 0]))
    if steps > 1:
        pairs = ag.index(transitions, (real[:, :-1], real[:, 1:]))
        score = score + ag.masked_sum(pairs, mask[:, 1:], axis=1)
    last = real[rows, lengths - 1]
    score = score + ag.index(transitions, (last, np.full(batch, stop)))
    return ag.reshape(score, ()) if single else score


def log_partition(emissions: Variable, transitions: Variable, mask: Optional[np.ndarray] = None) -> Variable:
    """Forward algorithm in log space over all K^T tag sequences."""
    emissions, mask, single = _batched(emissions, mask)
    batch, steps, num_tags = emissions.shape
    _check_transitions(transitions, num_tags)
    start, stop = num_tags, num_tags + 1
    pairwise = ag.reshape(transitions[:num_tags, :num_tags], (1, num_tags, num_tags))

    alpha = ag.reshape(transitions[start, :num_tags], (1, num_tags)) + emissions[:, 0, :]
    for t in range(1, steps):
        keep = mask[:, t : t + 1].astype(ag.DTYPE)
        scores = (
            ag.reshape(alpha, (batch, num_tags, 1))
            + pairwise
            + ag.reshape(emissions[:, t, :], (batch, 1, num_tags))
        )
        alpha = ag.log_sum_exp(scores, axis=1) * keep + alpha * (1.0 - keep)
    closing = alpha + ag.reshape(transitions[:num_tags, stop], (1, num_tags))
    total = ag.log_sum_exp(closing, axis=1)
    return ag.reshape(total, ()) if single else total


def crf_nll(emissions: Variable, transitions: Variable, gold: Sequence, mask: Optional[np.ndarray] = None) -> Variable:
    return log_partition(emissions, transitions, mask) - sequence_score(emissions, transitions, gold, mask)


def path_score(emissions: np.ndarray, transitions: np.ndarray, tags: Sequence[int]) -> float:
    num_tags = emissions.shape[1]
    tags = list(tags)
    score = transitions[num_tags, tags[0]] + emissions[0, tags[0]]
    for t in range(1, len(tags)):
        score += transitions[tags[t - 1], tags[t]] + emissions[t, tags[t]]
    return float(score + transitions[tags[-1], num_tags + 1])


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray) -> Tuple[List[int], float]:
    """Best tag sequence for one utterance; among equal scores the lexicographically smallest.

    Best completion scores are computed right to left, then tags are chosen
    left to right with ``argmax`` (first maximum), which yields the smallest
    sequence among the maximizers.
    """
    emissions = np.asarray(emissions, dtype=ag.DTYPE)
    transitions = np.asarray(transitions, dtype=ag.DTYPE)
    if emissions.ndim != 2 or emissions.shape[0] < 1:
        raise ContractError(f"viterbi_decode needs [T >= 1, K] emissions, got {emissions.shape}")
    steps, num_tags = emissions.shape
    if transitions.shape != (num_tags + 2, num_tags + 2):
        raise DimensionError(f"transitions {transitions.shape} do not fit {num_tags} tags")
    pairwise = transitions[:num_tags, :num_tags]

    completion = np.empty((steps, num_tags))
    completion[-1] = transitions[:num_tags, num_tags + 1]
    for t in range(steps - 2, -1, -1):
        completion[t] = np.max(pairwise + (emissions[t + 1] + completion[t + 1])[None, :], axis=1)

    tags = [int(np.argmax(transitions[num_tags, :num_tags] + emissions[0] + completion[0]))]
    for t in range(1, steps):
        tags.append(int(np.argmax(pairwise[tags[-1]] + emissions[t] + completion[t])))
    return tags, path_score(emissions, transitions, tags)
