"""Word-level vocabulary, MLM collation, triple-to-cloze conversion, few-shot
sampling and corpus loading."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK, CLS, SEP = "<pad>", "<unk>", "<mask>", "<cls>", "<sep>"
SPECIALS = (PAD, UNK, MASK, CLS, SEP)
PAD_ID, UNK_ID, MASK_ID, CLS_ID, SEP_ID = range(5)
NUM_SPECIAL = len(SPECIALS)
IGNORE = -100  # label sentinel for unsupervised positions

_TOKEN_RE = re.compile(r"<pad>|<unk>|<mask>|<cls>|<sep>|\w+|[^\w\s]")


class DataError(ValueError):
    """Malformed or insufficient input data."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:NUM_SPECIAL]) != SPECIALS:
            raise DataError("vocab must start with the reserved tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate vocab entries")

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        return [self.itos[i] for i in ids if not (skip_special and i < NUM_SPECIAL and i != UNK_ID)]


def build_vocab(texts: Iterable[str], max_size: int | None = None) -> Vocab:
    """Frequency-ranked word vocabulary; ties break lexicographically.

    ``max_size`` counts the reserved tokens.
    """
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(t for t in tokenize(text) if t not in SPECIALS)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - NUM_SPECIAL)]
    return Vocab(list(SPECIALS) + ranked)


def encode(text: str, vocab: Vocab, max_len: int, text2: str | None = None) -> list[int]:
    ids = [CLS_ID] + vocab.ids(tokenize(text))
    if text2 is not None:
        ids += [SEP_ID] + vocab.ids(tokenize(text2))
    return ids[:max_len]


def pad_batch(sequences: Sequence[Sequence[int]], pad_value: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in sequences), default=0)
    ids = np.full((len(sequences), width), pad_value, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=np.int64)
    for r, s in enumerate(sequences):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = 1
    return ids, mask


@dataclass
class MLMBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray

    @property
    def num_supervised(self) -> int:
        return int((self.labels != IGNORE).sum())

    def __len__(self) -> int:
        return self.input_ids.shape[0]


@dataclass
class TaskBatch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def derive_seed(base_seed: int, index: int) -> np.random.Generator:
    """Order-independent per-batch generator."""
    return np.random.default_rng([base_seed, index])


def mlm_collate(
    sequences: Sequence[Sequence[int]],
    vocab_size: int,
    rng: np.random.Generator | int,
    select_prob: float = 0.15,
    mask_frac: float = 0.85,
    keep_frac: float = 0.10,
) -> MLMBatch:
    """Pad and corrupt a batch for masked-LM training.

    Each eligible (non-special) token is selected with ``select_prob``. A
    selected token becomes ``<mask>`` with probability ``mask_frac``, stays
    unchanged with ``keep_frac`` and is otherwise replaced by a random
    non-special token. Labels hold the original id at selected positions.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ids, attn = pad_batch(sequences)
    labels = np.full_like(ids, IGNORE)
    eligible = (ids >= NUM_SPECIAL) | (ids == UNK_ID)
    selected = eligible & (rng.random(ids.shape) < select_prob)
    labels[selected] = ids[selected]
    u = rng.random(ids.shape)
    to_mask = selected & (u < mask_frac)
    to_random = selected & (u >= mask_frac + keep_frac)
    out = ids.copy()
    out[to_mask] = MASK_ID
    if vocab_size > NUM_SPECIAL:
        out[to_random] = rng.integers(NUM_SPECIAL, vocab_size, size=int(to_random.sum()))
    return MLMBatch(out, labels, attn)


def fixed_mask_batch(examples: Sequence[tuple[Sequence[int], Sequence[int]]]) -> MLMBatch:
    """Batch pre-masked (ids, labels) pairs such as cloze sentences."""
    ids, attn = pad_batch([e[0] for e in examples])
    labels, _ = pad_batch([e[1] for e in examples], pad_value=IGNORE)
    if labels.shape != ids.shape:
        raise DataError("ids and labels differ in length")
    return MLMBatch(ids, labels, attn)


# ---------------------------------------------------------------- triples

DEFAULT_TEMPLATES = {
    "/r/LocatedAt": "the {subj} is located at {obj} .",
    "/r/IsA": "the {subj} is a {obj} .",
    "/r/UsedFor": "the {subj} is used for {obj} .",
    "/r/PartOf": "the {subj} is part of {obj} .",
    "/r/CapableOf": "the {subj} is capable of {obj} .",
}


@dataclass(frozen=True)
class KnowledgeTriple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        if not self.object.strip():
            raise DataError("triple object must be non-empty")


@dataclass
class Cloze:
    tokens: list[str]  # with <mask> at object positions
    positions: list[int]
    answers: list[str]

    def filled(self) -> list[str]:
        out = list(self.tokens)
        for p, a in zip(self.positions, self.answers):
            out[p] = a
        return out

    def encode(self, vocab: Vocab, max_len: int | None = None) -> tuple[list[int], list[int]]:
        """(input ids, labels) with a leading ``<cls>``; labels are IGNORE off-mask."""
        ids = [CLS_ID] + vocab.ids(self.tokens)
        labels = [IGNORE] * len(ids)
        for p, a in zip(self.positions, self.answers):
            labels[p + 1] = vocab.id(a)
        if max_len is not None:
            ids, labels = ids[:max_len], labels[:max_len]
        return ids, labels


def load_templates(path: str | Path) -> dict[str, str]:
    """Read ``tag<TAB>pattern`` lines; patterns use ``{subj}`` and ``{obj}``."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or "{subj}" not in parts[1] or "{obj}" not in parts[1]:
            raise DataError(f"{path}:{n}: expected 'tag<TAB>pattern with {{subj}} {{obj}}'")
        out[parts[0].strip()] = parts[1].strip()
    return out


def triple_to_cloze(t: KnowledgeTriple, templates: dict[str, str] | None = None) -> Cloze:
    """Instantiate the relation template and mask every object token."""
    templates = DEFAULT_TEMPLATES if templates is None else templates
    if t.relation not in templates:
        raise DataError(f"no template for relation {t.relation!r}; known: {sorted(templates)}")
    pattern = templates[t.relation]
    subj = tokenize(t.subject)
    if pattern.lower().startswith("the {subj}") and subj[:1] == ["the"]:
        subj = subj[1:]
    obj = tokenize(t.object)
    before, after = pattern.split("{obj}", 1)
    head = tokenize(before.replace("{subj}", " ".join(subj)))
    tail = tokenize(after.replace("{subj}", " ".join(subj)))
    positions = list(range(len(head), len(head) + len(obj)))
    return Cloze(head + [MASK] * len(obj) + tail, positions, obj)


# -------------------------------------------------------------- few-shot


@dataclass
class FewShotSplit:
    train: list[dict]
    validation: list[dict]
    test: list[dict]
    seed: int


def few_shot_sample(dataset: Sequence[dict], K: int, seed: int, test: Sequence[dict] | None = None) -> FewShotSplit:
    """Draw K training and K disjoint validation examples per class.

    ``test`` (the original validation set) is passed through unchanged.
    """
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for i, ex in enumerate(dataset):
        by_class.setdefault(ex["label"], []).append(i)
    train, val = [], []
    for label in sorted(by_class, key=repr):
        idx = by_class[label]
        if len(idx) < 2 * K:
            raise DataError(f"class {label!r} has {len(idx)} examples, need {2 * K}")
        pick = rng.permutation(len(idx))[: 2 * K]
        train += [dataset[idx[j]] for j in pick[:K]]
        val += [dataset[idx[j]] for j in pick[K:]]
    return FewShotSplit(train, val, list(test or []), seed)


# --------------------------------------------------------------- loading

FORMATS = ("jsonl-text", "tsv-triples", "jsonl-labeled")


def load_corpus(path: str | Path, fmt: str) -> list:
    """Parse a corpus file; every malformed line raises with its line number."""
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    out: list = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if fmt == "tsv-triples":
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataError(f"{path}:{n}: expected subject<TAB>relation<TAB>object")
            out.append(KnowledgeTriple(*(p.strip() for p in parts)))
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{n}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
            raise DataError(f"{path}:{n}: missing string field 'text'")
        if fmt == "jsonl-text":
            out.append({"text": obj["text"]})
        else:
            if "label" not in obj:
                raise DataError(f"{path}:{n}: missing field 'label'")
            ex = {"text": obj["text"], "label": obj["label"]}
            if obj.get("text2") is not None:
                ex["text2"] = obj["text2"]
            out.append(ex)
    return out
