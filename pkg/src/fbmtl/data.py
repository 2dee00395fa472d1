"""SLU corpora: ATIS-format I/O, synthetic coupled tasks, vocabularies and batching.

On-disk format, one utterance per line::

    show flights from boston<TAB>O O O B-fromloc<TAB>flight
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
UNKNOWN_LABEL = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    slots: tuple[str, ...]
    intent: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "slots", tuple(self.slots))
        if len(self.tokens) != len(self.slots):
            raise DataError(f"{len(self.tokens)} tokens but {len(self.slots)} slot labels")

    def to_line(self) -> str:
        return f"{' '.join(self.tokens)}\t{' '.join(self.slots)}\t{self.intent}"


def ibo_violations(slots: Sequence[str]) -> list[str]:
    """Problems with an IBO sequence; empty when it is well formed."""
    problems = []
    prev_type = None
    for i, tag in enumerate(slots):
        if tag == "O":
            prev_type = None
            continue
        prefix, _, kind = tag.partition("-")
        if prefix not in ("B", "I") or not kind:
            problems.append(f"position {i}: malformed tag {tag!r}")
            prev_type = None
            continue
        if prefix == "I" and prev_type != kind:
            problems.append(f"position {i}: {tag} does not continue a {kind} span")
        prev_type = kind
    return problems


# ---------------------------------------------------------------------------
# ATIS-format files
# ---------------------------------------------------------------------------

@dataclass
class LoadReport:
    path: str
    lines: int = 0
    loaded: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.errors)


def parse_line(line: str) -> Utterance:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 3:
        raise DataError(f"expected 3 tab-separated fields, got {len(parts)}")
    text, tags, intent = parts
    tokens = text.split(" ") if text else []
    slots = tags.split(" ") if tags else []
    if not tokens or not intent:
        raise DataError("empty tokens or intent")
    if len(tokens) != len(slots):
        raise DataError(f"{len(tokens)} tokens but {len(slots)} slot labels")
    problems = ibo_violations(slots)
    if problems:
        raise DataError("invalid IBO: " + "; ".join(problems))
    return Utterance(tokens, slots, intent)


def load_atis_format(path) -> tuple[list[Utterance], LoadReport]:
    """Read a token/TAB/slots/TAB/intent file; bad lines are skipped and reported."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    report = LoadReport(str(path))
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        report.lines += 1
        try:
            out.append(parse_line(line))
        except DataError as exc:
            report.errors.append((lineno, str(exc)))
    report.loaded = len(out)
    if report.errors:
        logger.warning("%s: skipped %d malformed line(s)", path, report.skipped)
    return out, report


def write_atis_format(data: Iterable[Utterance], path) -> None:
    Path(path).write_text("".join(u.to_line() + "\n" for u in data), encoding="utf-8")


def convert_three_file(seq_in, seq_out, label, out_path) -> int:
    """Merge the common ``seq.in`` / ``seq.out`` / ``label`` ATIS layout into one file.

    Leading ``BOS``/trailing ``EOS`` markers, if present, are stripped along
    with their slot labels. Returns the number of utterances written.
    """
    rows = []
    with open(seq_in, encoding="utf-8") as fi, open(seq_out, encoding="utf-8") as fo, \
            open(label, encoding="utf-8") as fl:
        for text, tags, intent in zip(fi, fo, fl):
            toks, slots = text.split(), tags.split()
            if toks and toks[0] == "BOS":
                toks, slots = toks[1:], slots[1:]
            if toks and toks[-1] == "EOS":
                toks, slots = toks[:-1], slots[:-1]
            rows.append(Utterance(toks, slots, intent.strip()))
    write_atis_format(rows, out_path)
    return len(rows)


# ---------------------------------------------------------------------------
# synthetic coupled corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Coupled ID/SF corpus.

    Each slot span is a marker word (tagged O) followed by one or two value
    words. The span's slot type is a fixed random function of the pair
    (marker, value class), so it is only recoverable from local context.
    With probability ``rho`` the intent is a fixed random function of the
    set of slot types in the utterance; otherwise it is drawn uniformly.
    """

    vocab_size: int = 120
    min_len: int = 6
    max_len: int = 12
    n_intents: int = 8
    n_slot_types: int = 6
    rho: float = 0.9
    noise: float = 0.0
    seed: int = 0
    n_markers: int = 4
    n_value_classes: int = 4
    words_per_class: int = 5
    max_spans: int = 3

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if self.n_fillers < 1:
            raise ValueError("vocab_size too small for markers and values")
        if self.max_spans < 1 or self.min_len < 1:
            raise ValueError("need max_spans >= 1 and min_len >= 1")
        if self.max_len < self.min_len:
            raise ValueError("max_len < min_len")
        if self.max_spans > self.n_slot_types:
            raise ValueError("max_spans cannot exceed n_slot_types")

    @property
    def n_fillers(self) -> int:
        return self.vocab_size - self.n_markers - self.n_value_classes * self.words_per_class


def _slot_type_table(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    pairs = spec.n_markers * spec.n_value_classes
    if pairs < spec.n_slot_types:
        raise ValueError("fewer (marker, value class) pairs than slot types")
    table = np.concatenate([np.arange(spec.n_slot_types),
                            rng.integers(0, spec.n_slot_types, pairs - spec.n_slot_types)])
    rng.shuffle(table)
    return table.reshape(spec.n_markers, spec.n_value_classes)


def intent_table(spec: SyntheticSpec) -> dict[tuple[int, ...], int]:
    """The planted map from slot-type sets to intents."""
    rng = np.random.default_rng([spec.seed, 1])
    keys = [c for r in range(1, spec.max_spans + 1)
            for c in itertools.combinations(range(spec.n_slot_types), r)]
    return {k: int(rng.integers(spec.n_intents)) for k in keys}


def gen_synthetic(spec: SyntheticSpec, n: int) -> list[Utterance]:
    """Deterministic corpus of ``n`` utterances for the given spec."""
    structure_rng = np.random.default_rng([spec.seed, 0])
    type_of = _slot_type_table(spec, structure_rng)
    intents = intent_table(spec)
    rng = np.random.default_rng([spec.seed, 2])

    markers = [f"m{i}" for i in range(spec.n_markers)]
    values = [[f"v{c}_{j}" for j in range(spec.words_per_class)] for c in range(spec.n_value_classes)]
    fillers = [f"w{i}" for i in range(spec.n_fillers)]

    # (marker, value class) pairs grouped by slot type
    pairs_by_type: dict[int, list[tuple[int, int]]] = {}
    for mi in range(spec.n_markers):
        for ci in range(spec.n_value_classes):
            pairs_by_type.setdefault(int(type_of[mi, ci]), []).append((mi, ci))

    out = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        n_spans = int(rng.integers(1, spec.max_spans + 1))
        types = sorted(rng.choice(spec.n_slot_types, size=n_spans, replace=False).tolist())
        spans = []
        for t in types:
            mi, ci = pairs_by_type[t][int(rng.integers(len(pairs_by_type[t])))]
            width = int(rng.integers(1, 3))
            words = [values[ci][int(rng.integers(spec.words_per_class))] for _ in range(width)]
            spans.append((t, markers[mi], words))
        order = rng.permutation(n_spans)
        span_len = sum(1 + len(spans[i][2]) for i in order)
        n_fill = max(length - span_len, 0)
        # distribute fillers into n_spans + 1 gaps
        cuts = np.sort(rng.integers(0, n_fill + 1, size=n_spans))
        gaps = np.diff(np.concatenate([[0], cuts, [n_fill]]))
        tokens: list[str] = []
        slots: list[str] = []
        for gi, i in enumerate(order):
            for _ in range(gaps[gi]):
                tokens.append(fillers[int(rng.integers(len(fillers)))])
                slots.append("O")
            t, marker, words = spans[i]
            tokens.append(marker)
            slots.append("O")
            for wi, w in enumerate(words):
                tokens.append(w)
                slots.append(("B-" if wi == 0 else "I-") + f"s{t}")
        for _ in range(gaps[-1]):
            tokens.append(fillers[int(rng.integers(len(fillers)))])
            slots.append("O")

        coupled = rng.random() < spec.rho
        independent = int(rng.integers(spec.n_intents))
        intent = intents[tuple(types)] if coupled else independent
        if rng.random() < spec.noise:
            intent = int(rng.integers(spec.n_intents))
        out.append(Utterance(tokens, slots, f"intent{intent}"))
    return out


def slot_type_set(slots: Sequence[str]) -> tuple[str, ...]:
    return tuple(sorted({s[2:] for s in slots if s.startswith("B-")}))


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------

class Vocab:
    """Dense id maps for words, slot labels and intents."""

    def __init__(self, words: Sequence[str], slots: Sequence[str], intents: Sequence[str]):
        self.words = list(words)
        self.slots = list(slots)
        self.intents = list(intents)
        self.word_id = {w: i for i, w in enumerate(self.words)}
        self.slot_id = {s: i for i, s in enumerate(self.slots)}
        self.intent_id = {s: i for i, s in enumerate(self.intents)}
        if self.words[:4] != list(SPECIALS):
            raise ValueError(f"word vocabulary must start with {SPECIALS}")

    pad_id, unk_id, bos_id, eos_id = 0, 1, 2, 3

    def encode_words(self, tokens: Sequence[str]) -> list[int]:
        return [self.word_id.get(t, self.unk_id) for t in tokens]

    def decode_words(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def encode_slots(self, slots: Sequence[str]) -> list[int]:
        return [self.slot_id.get(s, UNKNOWN_LABEL) for s in slots]

    def encode_intent(self, intent: str) -> int:
        return self.intent_id.get(intent, UNKNOWN_LABEL)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and (self.words, self.slots, self.intents) == \
            (other.words, other.slots, other.intents)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, items in (("words", self.words), ("slots", self.slots), ("intents", self.intents)):
            (d / f"{name}.vocab").write_text("".join(f"{s}\t{i}\n" for i, s in enumerate(items)),
                                             encoding="utf-8")

    @classmethod
    def load(cls, directory) -> Vocab:
        d = Path(directory)
        parts = []
        for name in ("words", "slots", "intents"):
            rows = [line.split("\t") for line in (d / f"{name}.vocab").read_text(encoding="utf-8").splitlines()]
            items = [None] * len(rows)
            for label, idx in rows:
                items[int(idx)] = label
            parts.append(items)
        return cls(*parts)


def build_vocab(data: Sequence[Utterance], min_freq: int = 1) -> Vocab:
    if not data:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for u in data for t in u.tokens)
    words = list(SPECIALS) + sorted(w for w, c in counts.items() if c >= min_freq and w not in SPECIALS)
    slots = sorted({s for u in data for s in u.slots})
    intents = sorted({u.intent for u in data})
    return Vocab(words, slots, intents)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray  # (B, L) word ids, right-padded with pad_id
    mask: np.ndarray  # (B, L) 1.0 on real tokens
    lengths: np.ndarray  # (B,)
    slot_ids: np.ndarray  # (B, L); UNKNOWN_LABEL where unseen, 0 on padding
    intent_ids: np.ndarray  # (B,)
    lm_targets: np.ndarray  # (B, L) next-token ids; eos after the last token
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)


def make_batch(items: Sequence[Utterance], vocab: Vocab) -> Batch:
    lengths = np.array([len(u.tokens) for u in items])
    B, L = len(items), int(lengths.max())
    ids = np.full((B, L), vocab.pad_id, dtype=np.int64)
    slot_ids = np.zeros((B, L), dtype=np.int64)
    lm = np.full((B, L), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((B, L))
    for i, u in enumerate(items):
        n = len(u.tokens)
        w = vocab.encode_words(u.tokens)
        ids[i, :n] = w
        slot_ids[i, :n] = vocab.encode_slots(u.slots)
        lm[i, :n] = w[1:] + [vocab.eos_id]
        mask[i, :n] = 1.0
    intents = np.array([vocab.encode_intent(u.intent) for u in items], dtype=np.int64)
    return Batch(ids, mask, lengths, slot_ids, intents, lm, list(items))


def batch(data: Sequence[Utterance], size: int, vocab: Vocab, shuffle: bool = False,
          seed: int | None = None) -> list[Batch]:
    if size < 1:
        raise ValueError("batch size must be at least 1")
    order = np.arange(len(data))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    return [make_batch([data[i] for i in order[s:s + size]], vocab) for s in range(0, len(data), size)]
