"""Input layout: [HISTORY][KNOWLEDGE?][RESPONSE?] with dialogue-state tags.

A full example looks like

    <bos> <spk_a> h ... <spk_b> h ...  <know> z ... (<sep> z ...)  <resp> y ... <eos>
    ------------ HISTORY ------------  ----- KNOWLEDGE -----       --- RESPONSE ---

The token at the knowledge marker predicts the first knowledge token, the
token at the response marker predicts the first response token, and so on;
helper methods expose exactly those logit rows.  An empty knowledge segment
can either keep its marker (used when scoring/sampling the knowledge slot) or
be omitted entirely (the no-knowledge condition, identical to a dialogue that
never had knowledge).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from ..corpus import BOS, EOS, KNOW, PAD, RESP, SPK_A, SPK_B, Utterance
from ..errors import DataError


class StateTag(IntEnum):
    HISTORY = 0
    KNOWLEDGE = 1
    RESPONSE = 2
    PAD = 3


@dataclass(frozen=True)
class EncodedExample:
    """One encoded sequence plus segment bookkeeping.

    ``knowledge_marker``/``response_marker`` are positions of the segment
    marker tokens (None when the segment is absent).  Attention is strictly
    causal by construction; padding is whatever lies at indices >= length.
    """

    tokens: np.ndarray
    tags: np.ndarray
    knowledge_marker: int | None
    response_marker: int | None
    n_knowledge: int
    n_response: int

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    def knowledge_rows(self) -> np.ndarray:
        """Logit rows predicting knowledge tokens z_1..z_k (requires marker)."""
        assert self.knowledge_marker is not None
        return np.arange(self.knowledge_marker, self.knowledge_marker + self.n_knowledge)

    def response_rows(self) -> np.ndarray:
        """Logit rows predicting response tokens y_1..y_n."""
        assert self.response_marker is not None
        return np.arange(self.response_marker, self.response_marker + self.n_response)

    def validate(self) -> None:
        tags = self.tags
        if (np.diff(tags) < 0).any():
            raise DataError("state tags must be ordered HISTORY, KNOWLEDGE, RESPONSE")


def encode_example(
    history: Sequence[Utterance],
    knowledge: Sequence[int] | None,
    response: Sequence[int] | None,
    *,
    append_eos: bool = True,
    keep_empty_knowledge_marker: bool = False,
) -> EncodedExample:
    """Build the [HISTORY][KNOWLEDGE?][RESPONSE?] token/tag layout.

    ``knowledge`` is a flat token sequence (concatenate sentences first).
    ``knowledge=None`` or empty omits the knowledge segment unless
    ``keep_empty_knowledge_marker`` asks for a bare marker (needed when the
    knowledge slot itself is being scored or sampled).
    """
    if not history:
        raise DataError("history must contain at least one utterance")
    tokens: list[int] = [BOS]
    for utt in history:
        tokens.append(SPK_A if utt.speaker == "A" else SPK_B)
        tokens.extend(utt.tokens)
    tags = [StateTag.HISTORY] * len(tokens)

    knowledge_marker: int | None = None
    n_knowledge = 0
    z = list(knowledge) if knowledge else []
    if z or keep_empty_knowledge_marker:
        knowledge_marker = len(tokens)
        tokens.append(KNOW)
        tokens.extend(z)
        n_knowledge = len(z)
        tags.extend([StateTag.KNOWLEDGE] * (1 + len(z)))

    response_marker: int | None = None
    n_response = 0
    if response is not None:
        y = list(response)
        if not y:
            raise DataError("response must be non-empty")
        if append_eos:
            y.append(EOS)
        response_marker = len(tokens)
        tokens.append(RESP)
        tokens.extend(y)
        n_response = len(y)
        tags.extend([StateTag.RESPONSE] * (1 + len(y)))

    return EncodedExample(
        tokens=np.array(tokens, dtype=np.int64),
        tags=np.array([int(t) for t in tags], dtype=np.int64),
        knowledge_marker=knowledge_marker,
        response_marker=response_marker,
        n_knowledge=n_knowledge,
        n_response=n_response,
    )


def batchify(examples: Sequence[EncodedExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad examples into (ids, tags, lengths) batch arrays."""
    if not examples:
        raise DataError("cannot batch zero examples")
    T = max(ex.length for ex in examples)
    B = len(examples)
    ids = np.full((B, T), PAD, dtype=np.int64)
    tags = np.full((B, T), int(StateTag.PAD), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, ex in enumerate(examples):
        ids[b, :ex.length] = ex.tokens
        tags[b, :ex.length] = ex.tags
        lengths[b] = ex.length
    return ids, tags, lengths
