"""Corpus ingestion, the Snips intent split, vocabularies, registries and batches.

Native corpus format: one block per utterance, one ``token<TAB>tag`` line per
token, a closing ``#intent=<label>`` line, blocks separated by blank lines.
"""

import logging
import os
import re
from collections import Counter
from dataclasses import replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from groupnlu.errors import ConfigError, CorpusFormatError, UnknownIntentError
from groupnlu.models import (
    PAD_TOKEN,
    UNK_ID,
    UNK_TOKEN,
    Batch,
    LabelMap,
    TaskGroup,
    TaskRegistry,
    TaskSpec,
    Utterance,
    Vocabulary,
)

logger = logging.getLogger(__name__)

TAG_PATTERN = re.compile(r"^(O|[BI]-\S+)$")
INTENT_PREFIX = "#intent="

SNIPS_SPLIT: Dict[str, Tuple[str, ...]] = {
    "snips_creative": ("search_creative_work", "rate_book"),
    "snips_music": ("play_music", "add_to_playlist"),
    "snips_location": ("get_weather", "book_restaurant", "search_screening_event"),
}

ALPHA_MODES = ("uniform", "inverse-size")


def _utterance(tokens: List[str], slots: List[str], intent: str, task_id: str, path: str, line_no: int) -> Utterance:
    if not tokens:
        raise CorpusFormatError(path, line_no, "utterance has no tokens")
    if len(tokens) != len(slots):
        raise CorpusFormatError(path, line_no, f"{len(tokens)} tokens but {len(slots)} tags")
    for tag in slots:
        if not TAG_PATTERN.match(tag):
            raise CorpusFormatError(path, line_no, f"malformed tag {tag!r}")
    if not intent:
        raise CorpusFormatError(path, line_no, "missing intent label")
    return Utterance(tuple(tokens), tuple(slots), intent, task_id)


def _load_tsv(path: str, task_id: str) -> List[Utterance]:
    utterances: List[Utterance] = []
    tokens: List[str] = []
    slots: List[str] = []
    intent: Optional[str] = None
    line_no = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                if tokens or intent is not None:
                    if intent is None:
                        raise CorpusFormatError(path, line_no, "block ends without an #intent= line")
                    utterances.append(_utterance(tokens, slots, intent, task_id, path, line_no))
                tokens, slots, intent = [], [], None
                continue
            if intent is not None:
                raise CorpusFormatError(path, line_no, "token line after the #intent= line")
            if line.startswith(INTENT_PREFIX):
                intent = line[len(INTENT_PREFIX):].strip()
                if not tokens:
                    raise CorpusFormatError(path, line_no, "intent line before any token")
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise CorpusFormatError(path, line_no, "expected token<TAB>tag")
            if not TAG_PATTERN.match(parts[1]):
                raise CorpusFormatError(path, line_no, f"malformed tag {parts[1]!r}")
            tokens.append(parts[0])
            slots.append(parts[1])
        if tokens or intent is not None:
            if intent is None:
                raise CorpusFormatError(path, line_no + 1, "file ends without an #intent= line")
            utterances.append(_utterance(tokens, slots, intent, task_id, path, line_no + 1))
    return utterances


def _load_goo(directory: str, task_id: str) -> List[Utterance]:
    paths = [os.path.join(directory, name) for name in ("seq.in", "seq.out", "label")]
    columns = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as handle:
            columns.append([line.rstrip("\n") for line in handle])
    seq_in, seq_out, labels = columns
    if not (len(seq_in) == len(seq_out) == len(labels)):
        raise CorpusFormatError(directory, 0, f"line counts differ: {len(seq_in)}/{len(seq_out)}/{len(labels)}")
    utterances = []
    for line_no, (words, tags, intent) in enumerate(zip(seq_in, seq_out, labels), start=1):
        if not words.strip() and not tags.strip() and not intent.strip():
            continue
        utterances.append(_utterance(words.split(), tags.split(), intent.strip(), task_id, paths[1], line_no))
    return utterances


def load_corpus(path: str, fmt: str = "tsv", task_id: str = "") -> List[Utterance]:
    if fmt == "tsv":
        utterances = _load_tsv(path, task_id)
    elif fmt == "goo":
        utterances = _load_goo(path, task_id)
    else:
        raise ValueError(f"Unknown corpus format {fmt!r}")
    if not utterances:
        logger.warning("Corpus %s is empty", path)
    else:
        logger.info("Loaded %d utterances (%d tokens) from %s", len(utterances), sum(map(len, utterances)), path)
    return utterances


def write_corpus(utterances: Iterable[Utterance], path: str) -> int:
    dir_name = os.path.dirname(path)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for utterance in utterances:
            for token, tag in zip(utterance.tokens, utterance.slots):
                handle.write(f"{token}\t{tag}\n")
            handle.write(f"{INTENT_PREFIX}{utterance.intent}\n\n")
            count += 1
    return count


def convert_goo_split(in_dir: str, out_path: str) -> int:
    return write_corpus(load_corpus(in_dir, fmt="goo"), out_path)


def normalize_intent(intent: str) -> str:
    """``PlayMusic`` and ``play_music`` both become ``play_music``."""
    snake = re.sub(r"(?<=[a-z0-9])([A-Z])", r"_\1", intent.strip())
    return snake.lower()


def split_snips(utterances: Sequence[Utterance]) -> Dict[str, List[Utterance]]:
    owner = {intent: task for task, intents in SNIPS_SPLIT.items() for intent in intents}
    parts: Dict[str, List[Utterance]] = {task: [] for task in SNIPS_SPLIT}
    for utterance in utterances:
        task = owner.get(normalize_intent(utterance.intent))
        if task is None:
            raise UnknownIntentError(utterance.intent, owner)
        parts[task].append(replace(utterance, task_id=task))
    return parts


def build_vocab(
    train: Sequence[Utterance],
    pretrained_tokens: Optional[Iterable[str]] = None,
    include_pretrained: bool = False,
) -> Vocabulary:
    if not train:
        raise ValueError("build_vocab needs a nonempty training set")
    words = sorted({token.lower() for u in train for token in u.tokens})
    if include_pretrained and pretrained_tokens is not None:
        words = sorted(set(words) | {t.lower() for t in pretrained_tokens})
    chars = sorted({ch for u in train for token in u.tokens for ch in token})

    slot_sets: Dict[str, set] = {}
    intent_sets: Dict[str, set] = {}
    for u in train:
        slot_sets.setdefault(u.task_id, set()).update(u.slots)
        intent_sets.setdefault(u.task_id, set()).add(u.intent)
    slot_labels = {}
    for task, tags in slot_sets.items():
        tags.add("O")
        ordered = ["O"] + sorted(tags - {"O"}, key=lambda tag: (tag[2:], tag[:2]))
        slot_labels[task] = LabelMap(ordered)
    intent_labels = {task: LabelMap(sorted(intents)) for task, intents in intent_sets.items()}

    vocab = Vocabulary(
        words=[PAD_TOKEN, UNK_TOKEN] + [w for w in words if w not in (PAD_TOKEN, UNK_TOKEN)],
        chars=[PAD_TOKEN, UNK_TOKEN] + chars,
        slot_labels=slot_labels,
        intent_labels=intent_labels,
    )
    if pretrained_tokens is not None and not include_pretrained:
        known = {t.lower() for t in pretrained_tokens}
        covered = sum(1 for w in vocab.words[2:] if w in known)
        logger.info("Pretrained vectors cover %d of %d training words", covered, len(vocab.words) - 2)
    return vocab


def compute_alphas(train_sizes: Dict[str, int], mode: str) -> Dict[str, float]:
    """``inverse-size`` gives alpha proportional to 1/n, scaled so the largest alpha is 1."""
    if mode == "uniform":
        return {task: 1.0 for task in train_sizes}
    if mode == "inverse-size":
        if any(n <= 0 for n in train_sizes.values()):
            raise ValueError("inverse-size weighting needs nonempty training sets")
        smallest = min(train_sizes.values())
        return {task: smallest / n for task, n in train_sizes.items()}
    raise ValueError(f"Unknown alpha mode {mode!r}; expected one of {ALPHA_MODES}")


def build_registry(
    groups: Sequence[Tuple[str, Sequence[str]]],
    vocab: Vocabulary,
    train_sizes: Dict[str, int],
    alpha_mode: str = "inverse-size",
) -> TaskRegistry:
    seen: Dict[str, str] = {}
    problems = []
    for group_id, members in groups:
        if not members:
            problems.append((f"groups.{group_id}", "group has no tasks"))
        for task_id in members:
            if task_id in seen:
                problems.append((f"groups.{group_id}", f"task {task_id!r} already belongs to {seen[task_id]!r}"))
            seen[task_id] = group_id
    for task_id in train_sizes:
        if task_id not in seen:
            problems.append(("groups", f"task {task_id!r} belongs to no group"))
    if problems:
        raise ConfigError(problems)

    alphas = compute_alphas({task: train_sizes[task] for task in seen}, alpha_mode)
    tasks = {
        task_id: TaskSpec(
            task_id=task_id,
            group_id=group_id,
            alpha=alphas[task_id],
            train_size=train_sizes[task_id],
            slot_labels=vocab.slot_labels[task_id],
            intent_labels=vocab.intent_labels[task_id],
        )
        for task_id, group_id in seen.items()
    }
    return TaskRegistry(groups=[TaskGroup(g, list(m)) for g, m in groups], tasks=tasks)


def encode_batch(utterances: Sequence[Utterance], vocab: Vocabulary, task_id: str) -> Batch:
    """Pad to the longest row. Pad tokens get a single PAD character marked real."""
    if any(u.task_id != task_id for u in utterances):
        raise ValueError(f"batch for {task_id!r} contains utterances of another task")
    size = len(utterances)
    steps = max(len(u) for u in utterances)
    width = max(len(token) for u in utterances for token in u.tokens)
    word_ids = np.zeros((size, steps), dtype=np.int64)
    char_ids = np.zeros((size, steps, width), dtype=np.int64)
    char_mask = np.zeros((size, steps, width), dtype=bool)
    char_mask[:, :, 0] = True
    mask = np.zeros((size, steps), dtype=bool)
    slot_ids = np.zeros((size, steps), dtype=np.int64)
    intent_ids = np.full(size, -1, dtype=np.int64)
    slot_map = vocab.slot_labels.get(task_id)
    intent_map = vocab.intent_labels.get(task_id)
    unseen = 0
    for row, u in enumerate(utterances):
        mask[row, : len(u)] = True
        for col, token in enumerate(u.tokens):
            word_ids[row, col] = vocab.word_id(token)
            for k, ch in enumerate(token):
                char_ids[row, col, k] = vocab.char_id(ch)
                char_mask[row, col, k] = True
            tag_id = slot_map.id_of(u.slots[col], -1) if slot_map is not None else -1
            unseen += tag_id < 0
            slot_ids[row, col] = tag_id
        if intent_map is not None:
            intent_ids[row] = intent_map.id_of(u.intent, -1)
            unseen += intent_ids[row] < 0
    if unseen:
        logger.debug("%d labels in a %s batch are unknown to the training vocabulary", unseen, task_id)
    return Batch(task_id, word_ids, char_ids, char_mask, mask, slot_ids, intent_ids, tuple(utterances))


def make_batches(
    corpus: Sequence[Utterance],
    vocab: Vocabulary,
    batch_size: int,
    seed: Optional[int] = None,
    shuffle: bool = True,
) -> List[Batch]:
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    if not corpus:
        return []
    task_ids = {u.task_id for u in corpus}
    if len(task_ids) != 1:
        raise ValueError(f"make_batches needs a single-task corpus, got {sorted(task_ids)}")
    task_id = task_ids.pop()
    order = np.random.default_rng(seed).permutation(len(corpus)) if shuffle else np.arange(len(corpus))
    return [
        encode_batch([corpus[i] for i in order[start : start + batch_size]], vocab, task_id)
        for start in range(0, len(corpus), batch_size)
    ]


def singleton_words(corpora: Iterable[Sequence[Utterance]], vocab: Vocabulary) -> np.ndarray:
    """Ids of the words that occur exactly once across the training corpora."""
    counts = Counter(vocab.word_id(token) for corpus in corpora for u in corpus for token in u.tokens)
    return np.array(sorted(i for i, n in counts.items() if n == 1 and i != UNK_ID), dtype=np.int64)


def replace_singletons(batch: Batch, singletons: np.ndarray, rate: float, rng: np.random.Generator) -> Batch:
    """Swap real singleton tokens for UNK with probability ``rate``; character ids are kept."""
    if rate <= 0.0 or singletons.size == 0:
        return batch
    hit = np.isin(batch.word_ids, singletons) & batch.mask & (rng.random(batch.word_ids.shape) < rate)
    if not hit.any():
        return batch
    return replace(batch, word_ids=np.where(hit, UNK_ID, batch.word_ids))
