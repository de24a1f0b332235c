"""Dialogue corpora: tokenization, vocabularies, dataset I/O, synthetic generation.

Data model
----------
A dialogue is an alternating two-speaker utterance sequence, optionally paired
with a list of knowledge sentences and with ranking-candidate lists keyed by
response position.  Everything downstream (training pairs, evaluation pairs,
overlap statistics) is derived from ``Dialogue`` objects whose utterances hold
token ids produced by a closed ``Vocabulary``.

The synthetic generator builds dialogues whose responses copy a content token
from the paired knowledge sentence at a controllable rate, and whose histories
leak knowledge content tokens at a second controllable rate.  Both rates use
common random numbers per dialogue, so corpora generated at different rates
from the same seed are coupled draw-for-draw.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ConfigError, DataError

# Reserved vocabulary slots.  PAD must stay at id 0.
PAD, UNK, BOS, EOS, SPK_A, SPK_B, KNOW, RESP, SEP = range(9)
RESERVED_TOKENS = (
    "<pad>", "<unk>", "<bos>", "<eos>",
    "<spk_a>", "<spk_b>", "<know>", "<resp>", "<sep>",
)
N_RESERVED = len(RESERVED_TOKENS)

_TOKEN_RE = re.compile(r"[a-z0-9_']+|[^a-z0-9_'\s]")

Schema = Literal["personachat-like", "wow-like", "plain"]
SCHEMAS = ("personachat-like", "wow-like", "plain")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation becomes its own token."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Closed token vocabulary with reserved ids and UNK fallback.

    Ids 0..8 are reserved (see ``RESERVED_TOKENS``); regular tokens follow in
    the order given.  ``decode(encode(s)) == s`` holds for text that is a
    space-joined sequence of in-vocabulary tokens.
    """

    def __init__(self, tokens: Sequence[str]):
        seen: dict[str, int] = {}
        for tok in tokens:
            if not tok or tok in RESERVED_TOKENS:
                raise ConfigError(f"invalid vocabulary token: {tok!r}")
            if tok in seen:
                raise ConfigError(f"duplicate vocabulary token: {tok!r}")
            seen[tok] = N_RESERVED + len(seen)
        self.id_to_token: tuple[str, ...] = RESERVED_TOKENS + tuple(tokens)
        self.token_to_id: dict[str, int] = seen

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        t2i = self.token_to_id
        return [t2i.get(tok, UNK) for tok in tokens]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def content_hash(self) -> str:
        payload = "\n".join(self.id_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            "".join(tok + "\n" for tok in self.id_to_token[N_RESERVED:]),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(corpus: Sequence[str], max_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary over tokenized ``corpus``.

    ``max_size`` caps the number of non-reserved entries.  Ties in frequency
    break lexicographically, so the result is independent of corpus order.
    """
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    if max_size < 0:
        raise ConfigError("max_size must be non-negative")
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(tokenize(line))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[:max_size]])


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Utterance:
    speaker: Literal["A", "B"]
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.speaker not in ("A", "B"):
            raise DataError(f"unknown speaker {self.speaker!r}")
        if len(self.tokens) == 0:
            raise DataError("utterance has no tokens after encoding")


@dataclass(frozen=True)
class Dialogue:
    """Alternating utterances plus optional knowledge and ranking candidates.

    ``knowledge`` is a list of knowledge-sentence token sequences.
    ``candidates`` maps a response position (utterance index) to candidate
    token sequences; the gold response must appear exactly once per list.
    """

    utterances: tuple[Utterance, ...]
    knowledge: tuple[tuple[int, ...], ...] | None = None
    candidates: dict[int, tuple[tuple[int, ...], ...]] | None = None

    def __post_init__(self) -> None:
        if not self.utterances:
            raise DataError("dialogue has no utterances")
        for i, utt in enumerate(self.utterances):
            expected = "A" if i % 2 == 0 else "B"
            if utt.speaker != expected:
                raise DataError(
                    f"speakers must alternate starting with A; "
                    f"utterance {i} has speaker {utt.speaker}"
                )
        if self.knowledge is not None:
            for sent in self.knowledge:
                if len(sent) == 0:
                    raise DataError("empty knowledge sentence")
        if self.candidates is not None:
            for turn, cands in self.candidates.items():
                if not 0 < turn < len(self.utterances):
                    raise DataError(f"candidate turn index {turn} out of range")
                if len(cands) < 2:
                    raise DataError(f"candidate list at turn {turn} shorter than 2")
                gold = self.utterances[turn].tokens
                n_gold = sum(1 for c in cands if c == gold)
                if n_gold != 1:
                    raise DataError(
                        f"gold response appears {n_gold} times in candidate "
                        f"list at turn {turn} (expected exactly once)"
                    )

    def gold_candidate_index(self, turn: int) -> int:
        assert self.candidates is not None
        gold = self.utterances[turn].tokens
        return next(i for i, c in enumerate(self.candidates[turn]) if c == gold)


@dataclass(frozen=True)
class KnowledgeCollection:
    """Deduplicated union of knowledge sentences, as token sequences."""

    sentences: tuple[tuple[int, ...], ...]
    source: str = ""

    def __post_init__(self) -> None:
        if any(len(s) == 0 for s in self.sentences):
            raise DataError("knowledge collection contains an empty sentence")
        if len(set(self.sentences)) != len(self.sentences):
            raise DataError("knowledge collection contains duplicates")

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class OverlapStats:
    """Unigram-overlap statistics between histories and knowledge, in percent."""

    recall: float
    precision: float
    f1: float


@dataclass(frozen=True)
class Pair:
    """One (history, response) training or evaluation pair."""

    dialogue_index: int
    turn_index: int
    history: tuple[Utterance, ...]
    response: Utterance
    knowledge: tuple[tuple[int, ...], ...] | None
    candidates: tuple[tuple[int, ...], ...] | None = None
    gold_index: int | None = None


def response_pairs(
    dialogues: Sequence[Dialogue], *, final_only: bool = False
) -> list[Pair]:
    """Expand dialogues into (history, response) pairs.

    Every utterance after the first becomes a response paired with the full
    preceding history; with ``final_only`` only the last utterance does.
    """
    pairs: list[Pair] = []
    for d_idx, dlg in enumerate(dialogues):
        turns = (
            [len(dlg.utterances) - 1]
            if final_only
            else range(1, len(dlg.utterances))
        )
        for t in turns:
            cands = dlg.candidates.get(t) if dlg.candidates else None
            pairs.append(
                Pair(
                    dialogue_index=d_idx,
                    turn_index=t,
                    history=dlg.utterances[:t],
                    response=dlg.utterances[t],
                    knowledge=dlg.knowledge,
                    candidates=cands,
                    gold_index=dlg.gold_candidate_index(t) if cands else None,
                )
            )
    return pairs


def concat_knowledge(sentences: Sequence[Sequence[int]]) -> list[int]:
    """Join knowledge sentences with the separator token, in corpus order."""
    out: list[int] = []
    for i, sent in enumerate(sentences):
        if i > 0:
            out.append(SEP)
        out.extend(sent)
    return out


# ---------------------------------------------------------------------------
# Dataset I/O (JSONL, one dialogue per line)
# ---------------------------------------------------------------------------

def load_dialogues(
    path: str | Path, schema: Schema, vocab: Vocabulary
) -> tuple[list[Dialogue], KnowledgeCollection]:
    """Read a JSONL dataset and encode it against ``vocab``.

    Schemas: ``personachat-like`` and ``wow-like`` require a non-empty
    ``knowledge`` field per dialogue; ``plain`` ignores any knowledge field.
    The returned collection is the deduplicated union of knowledge sentences.
    """
    if schema not in SCHEMAS:
        raise ConfigError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    path = Path(path)
    dialogues: list[Dialogue] = []
    collected: dict[tuple[int, ...], None] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                dialogues.append(_dialogue_from_record(record, schema, vocab))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            knowledge = dialogues[-1].knowledge
            if knowledge:
                for sent in knowledge:
                    collected.setdefault(sent, None)
    collection = KnowledgeCollection(
        sentences=tuple(collected), source=f"{path.name}:{schema}"
    )
    return dialogues, collection


def _dialogue_from_record(record: dict, schema: Schema, vocab: Vocabulary) -> Dialogue:
    if "utterances" not in record:
        raise DataError("record has no 'utterances' field")
    utterances = tuple(
        Utterance(speaker=u.get("speaker", ""), tokens=tuple(vocab.encode(u.get("text", ""))))
        for u in record["utterances"]
    )
    knowledge: tuple[tuple[int, ...], ...] | None = None
    if schema != "plain":
        raw = record.get("knowledge")
        if not raw:
            raise DataError(f"schema {schema} requires a non-empty 'knowledge' field")
        knowledge = tuple(tuple(vocab.encode(s)) for s in raw)
    candidates = None
    if record.get("candidates"):
        candidates = {
            int(turn): tuple(tuple(vocab.encode(c)) for c in cands)
            for turn, cands in record["candidates"].items()
        }
    return Dialogue(utterances=utterances, knowledge=knowledge, candidates=candidates)


def write_dialogues_jsonl(records: Sequence[dict], path: str | Path) -> None:
    """Write raw dialogue records as JSONL with a stable byte layout."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def write_knowledge_file(sentences: Iterable[str], path: str | Path) -> None:
    """Write a knowledge collection, one sentence per line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for sent in sentences:
            fh.write(sent + "\n")


def load_knowledge_file(path: str | Path, vocab: Vocabulary) -> KnowledgeCollection:
    seen: dict[tuple[int, ...], None] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            seen.setdefault(tuple(vocab.encode(line)), None)
    return KnowledgeCollection(sentences=tuple(seen), source=str(Path(path).name))


# ---------------------------------------------------------------------------
# Overlap statistics
# ---------------------------------------------------------------------------

def knowledge_overlap_stats(dialogues: Sequence[Dialogue]) -> OverlapStats:
    """Micro-averaged unigram multiset overlap between histories and knowledge.

    Computed over (history, knowledge) response pairs: recall is
    overlap / |knowledge tokens| and precision is overlap / |history tokens|,
    summed across pairs before dividing.
    """
    total_overlap = 0
    total_z = 0
    total_x = 0
    for d_idx, dlg in enumerate(dialogues):
        if not dlg.knowledge:
            raise DataError(f"dialogue {d_idx} has no knowledge; overlap undefined")
    for pair in response_pairs(dialogues):
        assert pair.knowledge is not None
        x_counts = Counter(tok for utt in pair.history for tok in utt.tokens)
        z_counts = Counter(tok for sent in pair.knowledge for tok in sent)
        overlap = sum((x_counts & z_counts).values())
        total_overlap += overlap
        total_z += sum(z_counts.values())
        total_x += sum(x_counts.values())
    recall = 100.0 * total_overlap / total_z if total_z else 0.0
    precision = 100.0 * total_overlap / total_x if total_x else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return OverlapStats(recall=recall, precision=precision, f1=f1)


# ---------------------------------------------------------------------------
# Knowledge truncation
# ---------------------------------------------------------------------------

def knowledge_prefix(z: Sequence[int], length: int) -> list[int]:
    """First ``min(length, len(z))`` tokens; 0 yields the no-knowledge case."""
    if length < 0:
        raise ConfigError("prefix length must be >= 0")
    return list(z[:length])


def random_knowledge_window(z: Sequence[int], length: int, seed: int) -> list[int]:
    """Contiguous window of ``min(length, len(z))`` tokens at a random start."""
    if length < 1:
        raise ConfigError("window length must be >= 1")
    if len(z) == 0:
        return []
    if len(z) <= length:
        return list(z)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(z) - length + 1))
    return list(z[start:start + length])


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_N_HIST_FILLERS = 20
_N_KNOW_TEMPLATES = 10
_N_RESP_TEMPLATES = 20
_N_TEMPLATE_WORDS = _N_HIST_FILLERS + _N_KNOW_TEMPLATES + _N_RESP_TEMPLATES


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic dialogue generator.

    ``leak_rate`` is the probability a response copies a content token from
    the dialogue's knowledge; ``history_leak`` the probability each history
    utterance reveals one.  The seed fully determines the output.
    """

    vocab_size: int = 500
    n_dialogues: int = 1000
    turns_per_dialogue: int = 2
    knowledge_per_dialogue: int = 1
    content_per_sentence: int = 4
    content_pool_size: int | None = None
    content_zipf: float = 1.0
    response_content_slots: int = 1
    leak_rate: float = 0.8
    history_leak: float = 0.9
    history_len: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.leak_rate <= 1.0:
            raise ConfigError("leak_rate must lie in [0, 1]")
        if not 0.0 <= self.history_leak <= 1.0:
            raise ConfigError("history_leak must lie in [0, 1]")
        if self.content_zipf < 0.0:
            raise ConfigError("content_zipf must be >= 0")
        if self.vocab_size < N_RESERVED + _N_TEMPLATE_WORDS + 2 * self.content_words_needed:
            raise ConfigError("vocab_size too small for template + content pools")
        if self.content_pool_size is not None and not (
            2 * self.content_words_needed
            <= self.content_pool_size
            <= self.vocab_size - N_RESERVED - _N_TEMPLATE_WORDS
        ):
            raise ConfigError("content_pool_size out of range")
        if self.n_dialogues < 1 or self.turns_per_dialogue < 2:
            raise ConfigError("need at least one dialogue with two turns")
        if self.knowledge_per_dialogue < 1 or self.content_per_sentence < 1:
            raise ConfigError("need at least one knowledge sentence with content")
        if self.response_content_slots < 1:
            raise ConfigError("response_content_slots must be >= 1")
        if self.history_len < 2:
            raise ConfigError("history_len must be >= 2")

    @property
    def content_words_needed(self) -> int:
        return self.knowledge_per_dialogue * self.content_per_sentence


@dataclass(frozen=True)
class SynthCorpus:
    records: tuple[dict, ...]
    dialogues: tuple[Dialogue, ...]
    knowledge: KnowledgeCollection
    vocab: Vocabulary


def _synth_pools(cfg: SynthConfig) -> tuple[list[str], list[str], list[str], list[str], list[str]]:
    """Word pools: history fillers, knowledge templates, response templates,
    content words, and rare filler words padding the vocabulary out to size.
    """
    hist = [f"h{i:02d}" for i in range(_N_HIST_FILLERS)]
    know = [f"k{i:02d}" for i in range(_N_KNOW_TEMPLATES)]
    resp = [f"r{i:02d}" for i in range(_N_RESP_TEMPLATES)]
    n_free = cfg.vocab_size - N_RESERVED - _N_TEMPLATE_WORDS
    n_content = cfg.content_pool_size if cfg.content_pool_size else n_free
    content = [f"c{i:03d}" for i in range(n_content)]
    rare = [f"x{i:03d}" for i in range(n_free - n_content)]
    return hist, know, resp, content, rare


def synthesize_corpus(cfg: SynthConfig) -> SynthCorpus:
    """Generate a synthetic dialogue corpus with controllable token leakage.

    Each dialogue draws a private set of content words, Zipf-weighted so the
    content distribution is shared between knowledge text and dialogue text
    the way word frequencies are in real corpora.  Knowledge sentences
    interleave knowledge-template words with those content words; history
    utterances are filler words that reveal one content word with probability
    ``history_leak`` (always in the final slot); responses embed a content
    word that comes from the knowledge set with probability ``leak_rate`` and
    from the complement pool otherwise.  Random draws are made
    unconditionally so that corpora at different rates under one seed share
    all other randomness.
    """
    cfg.validate()
    hist_pool, know_pool, resp_pool, content_pool, rare_pool = _synth_pools(cfg)
    vocab = Vocabulary(
        sorted(hist_pool + know_pool + resp_pool + content_pool + rare_pool)
    )
    content_arr = np.array(content_pool)
    ranks = np.arange(1, len(content_pool) + 1, dtype=np.float64)
    zipf_w = ranks ** -cfg.content_zipf
    zipf_w /= zipf_w.sum()

    records: list[dict] = []
    for d_idx in range(cfg.n_dialogues):
        rng = np.random.default_rng([cfg.seed, d_idx])
        content_set = list(rng.choice(
            content_arr, size=cfg.content_words_needed, replace=False, p=zipf_w
        ))
        in_set = np.isin(content_arr, content_set)
        comp_w = np.where(in_set, 0.0, zipf_w)
        comp_w /= comp_w.sum()

        sentences = []
        for s in range(cfg.knowledge_per_dialogue):
            sent_content = content_set[
                s * cfg.content_per_sentence:(s + 1) * cfg.content_per_sentence
            ]
            words: list[str] = []
            for c_word in sent_content:
                words.append(str(rng.choice(know_pool)))
                words.append(str(c_word))
            sentences.append(" ".join(words))

        utterances = []
        for t in range(cfg.turns_per_dialogue):
            if t % 2 == 0:
                words = [str(w) for w in rng.choice(hist_pool, size=cfg.history_len)]
                u = rng.random()
                leak_word = str(rng.choice(content_set))
                if u < cfg.history_leak:
                    words.append(leak_word)
                utterances.append({"speaker": "A", "text": " ".join(words)})
            else:
                # slot-level copy rate chosen so that the probability of the
                # response containing at least one knowledge content token is
                # exactly leak_rate, regardless of the slot count
                n_slots = cfg.response_content_slots
                slot_rate = 1.0 - (1.0 - cfg.leak_rate) ** (1.0 / n_slots)
                templ = [str(w) for w in rng.choice(resp_pool, size=2 + n_slots)]
                words = [templ[0], templ[1]]
                for s in range(n_slots):
                    u = rng.random()
                    copied = str(rng.choice(content_set))
                    other = str(rng.choice(content_arr, p=comp_w))
                    words.append(copied if u < slot_rate else other)
                    words.append(templ[2 + s])
                utterances.append({"speaker": "B", "text": " ".join(words)})
        records.append({"utterances": utterances, "knowledge": sentences})

    dialogues = tuple(
        _dialogue_from_record(rec, "personachat-like", vocab) for rec in records
    )
    seen: dict[tuple[int, ...], None] = {}
    for dlg in dialogues:
        assert dlg.knowledge is not None
        for sent in dlg.knowledge:
            seen.setdefault(sent, None)
    collection = KnowledgeCollection(
        sentences=tuple(seen), source=f"synthetic:seed={cfg.seed}"
    )
    return SynthCorpus(
        records=tuple(records), dialogues=dialogues, knowledge=collection, vocab=vocab
    )
