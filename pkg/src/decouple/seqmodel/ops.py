"""Model-level operations: scoring, sampling, stepwise KL, candidate ranking.

The per-token log-probability of a segment is read off the causal forward
pass: the logit row at position t scores the token at position t+1, so a
response token y_t is scored at row ``response_marker + t - 1`` and likewise
for knowledge tokens.  All operations are read-only on the parameters and
deterministic given (params, inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..corpus import BOS, EOS, RESP, Utterance
from ..errors import ConfigError, DataError
from .encoding import EncodedExample, StateTag, batchify, encode_example
from .network import Parameters, forward, log_softmax

LOGPROB_FLOOR = -30.0


@dataclass(frozen=True)
class SampleResult:
    """A sampled knowledge sequence and its log-probabilities.

    ``tokens`` includes the terminating EOS when one was sampled;
    ``step_logprobs[t]`` is the model log-probability of ``tokens[t]`` and
    ``step_distributions`` optionally keeps each step's full distribution.
    """

    tokens: tuple[int, ...]
    step_logprobs: np.ndarray
    total_logprob: float
    step_distributions: np.ndarray | None = None

    def context_tokens(self) -> list[int]:
        """Sampled tokens with any terminating EOS stripped."""
        toks = list(self.tokens)
        if toks and toks[-1] == EOS:
            toks.pop()
        return toks


def forward_logprobs(params: Parameters, example: EncodedExample) -> np.ndarray:
    """Per-position next-token log-distributions, shape (length, vocab)."""
    ids = example.tokens[None, :]
    tags = example.tags[None, :]
    logits, _ = forward(params, ids, tags)
    return log_softmax(logits[0])


def batch_logprobs(
    params: Parameters, examples: Sequence[EncodedExample]
) -> tuple[np.ndarray, np.ndarray]:
    """Forward a padded batch; returns (logprobs (B,T,V), lengths)."""
    ids, tags, lengths = batchify(examples)
    logits, _ = forward(params, ids, tags)
    return log_softmax(logits), lengths


def response_logprob(
    params: Parameters,
    history: Sequence[Utterance],
    knowledge: Sequence[int] | None,
    response: Sequence[int],
    *,
    append_eos: bool = False,
) -> tuple[float, np.ndarray]:
    """log P(response | history, knowledge) and its per-token terms.

    An empty/None ``knowledge`` scores the no-knowledge condition.  The
    response is scored exactly as given unless ``append_eos`` adds the
    terminator as a final scored token.
    """
    if len(response) == 0:
        raise DataError("cannot score an empty response")
    ex = encode_example(history, knowledge, response, append_eos=append_eos)
    logprobs = forward_logprobs(params, ex)
    rows = ex.response_rows()
    targets = ex.tokens[rows + 1]
    per_token = logprobs[rows, targets]
    return float(per_token.sum()), per_token


def sample_knowledge(
    params: Parameters,
    history: Sequence[Utterance],
    max_len: int,
    temperature: float,
    seed: int,
    *,
    keep_distributions: bool = False,
) -> SampleResult:
    """Ancestral sampling of the knowledge slot given the history.

    Stops at EOS or after ``max_len`` tokens.  ``temperature`` shapes the
    sampling distribution (0 means greedy); the recorded log-probabilities
    are always the model's (temperature-1) values for the sampled tokens.
    """
    rng = np.random.default_rng(seed)
    results = sample_knowledge_batch(
        params, [history], max_len, temperature, rng,
        keep_distributions=keep_distributions,
    )
    return results[0]


def sample_knowledge_batch(
    params: Parameters,
    histories: Sequence[Sequence[Utterance]],
    max_len: int,
    temperature: float,
    rng: np.random.Generator,
    *,
    keep_distributions: bool = False,
) -> list[SampleResult]:
    """Sample one knowledge sequence per history, stepping the batch in lockstep."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    B = len(histories)
    sampled: list[list[int]] = [[] for _ in range(B)]
    logps: list[list[float]] = [[] for _ in range(B)]
    dists: list[list[np.ndarray]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        examples = [
            encode_example(h, sampled[b], None, keep_empty_knowledge_marker=True)
            for b, h in enumerate(histories)
        ]
        logprobs, lengths = batch_logprobs(params, examples)
        step_rows = logprobs[np.arange(B), lengths - 1]
        if temperature == 0.0:
            picks = step_rows.argmax(axis=1)
        else:
            scaled = step_rows / temperature
            scaled -= scaled.max(axis=1, keepdims=True)
            probs = np.exp(scaled)
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random(B)
            picks = (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            tok = int(picks[b])
            sampled[b].append(tok)
            logps[b].append(float(step_rows[b, tok]))
            if keep_distributions:
                dists[b].append(step_rows[b].copy())
            if tok == EOS:
                done[b] = True
        if done.all():
            break
    out: list[SampleResult] = []
    for b in range(B):
        steps = np.array(logps[b])
        out.append(SampleResult(
            tokens=tuple(sampled[b]),
            step_logprobs=steps,
            total_logprob=float(steps.sum()),
            step_distributions=np.array(dists[b]) if keep_distributions else None,
        ))
    return out


def knowledge_slot_logprobs(
    params: Parameters,
    history: Sequence[Utterance],
    z: Sequence[int],
) -> np.ndarray:
    """Full next-token log-distributions at each knowledge step, (len(z), V).

    Row t conditions on the history plus z_{<t}; this is the knowledge-role
    view of the shared model.
    """
    if len(z) == 0:
        raise DataError("z must be non-empty")
    ex = encode_example(history, list(z), None, keep_empty_knowledge_marker=True)
    logprobs = forward_logprobs(params, ex)
    return logprobs[ex.knowledge_rows()]


def knowledge_lm_logprobs(lm: Parameters, z: Sequence[int]) -> np.ndarray:
    """Next-token log-distributions of the knowledge LM along z, (len(z), V)."""
    if len(z) == 0:
        raise DataError("z must be non-empty")
    ids = np.array([[BOS, *z]], dtype=np.int64)
    tags = np.full_like(ids, int(StateTag.KNOWLEDGE))
    logits, _ = forward(lm, ids, tags)
    return log_softmax(logits[0])[: len(z)]


def stepwise_kl(
    params_sigma: Parameters,
    lm: Parameters,
    history: Sequence[Utterance],
    z: Sequence[int],
) -> np.ndarray:
    """Per-step full-vocabulary KL between the knowledge role and the LM.

    Step t compares the model's distribution given (history, z_{<t}) against
    the frozen LM's distribution given z_{<t} alone.  Every value is >= 0 up
    to rounding.
    """
    if len(z) == 0:
        raise DataError("z must be non-empty")
    if lm.config.vocab_size != params_sigma.config.vocab_size:
        raise ConfigError("knowledge LM and model vocabularies differ")
    logp = knowledge_slot_logprobs(params_sigma, history, z)
    logq = knowledge_lm_logprobs(lm, z)
    p = np.exp(logp)
    return (p * (logp - logq)).sum(axis=1)


@dataclass(frozen=True)
class RankResult:
    order: tuple[int, ...]
    scores: tuple[float, ...]
    hit: bool


def rank_candidates(
    params: Parameters,
    history: Sequence[Utterance],
    knowledge: Sequence[int] | None,
    candidates: Sequence[Sequence[int]],
    gold_index: int = 0,
) -> RankResult:
    """Rank candidate responses; ties break toward the lower index.

    Default score is the length-normalized log-probability of the candidate
    (terminator included); with a classification head, the head logit at the
    candidate's last position is the score.
    """
    if len(candidates) < 2:
        raise DataError("need at least two candidates")
    scores = score_candidates(params, history, knowledge, candidates)
    order = np.argsort(-scores, kind="stable")
    return RankResult(
        order=tuple(int(i) for i in order),
        scores=tuple(float(s) for s in scores),
        hit=bool(order[0] == gold_index),
    )


def score_candidates(
    params: Parameters,
    history: Sequence[Utterance],
    knowledge: Sequence[int] | None,
    candidates: Sequence[Sequence[int]],
) -> np.ndarray:
    """Vector of candidate scores (see ``rank_candidates``), batched."""
    if any(len(c) == 0 for c in candidates):
        raise DataError("candidate responses must be non-empty")
    examples = [
        encode_example(history, knowledge, list(cand), append_eos=True)
        for cand in candidates
    ]
    ids, tags, lengths = batchify(examples)
    if params.config.cls_head:
        _, cache = forward(params, ids, tags, head_positions=lengths - 1)
        return np.asarray(cache["head_logits"], dtype=np.float64)
    logits, _ = forward(params, ids, tags)
    logprobs = log_softmax(logits)
    scores = np.empty(len(candidates))
    for b, ex in enumerate(examples):
        rows = ex.response_rows()
        targets = ex.tokens[rows + 1]
        scores[b] = logprobs[b, rows, targets].mean()
    return scores


def generate_response(
    params: Parameters,
    history: Sequence[Utterance],
    knowledge: Sequence[int] | None,
    max_len: int,
    *,
    temperature: float = 0.0,
    seed: int = 0,
) -> list[int]:
    """Decode a response token sequence (greedy by default); EOS-terminated."""
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(max_len):
        ex = _response_prefix_example(history, knowledge, out)
        logprobs = forward_logprobs(params, ex)
        row = logprobs[ex.length - 1]
        if temperature == 0.0:
            tok = int(row.argmax())
        else:
            scaled = row / temperature
            scaled -= scaled.max()
            probs = np.exp(scaled)
            probs /= probs.sum()
            tok = int((probs.cumsum() > rng.random()).argmax())
        if tok == EOS:
            break
        out.append(tok)
    return out


def _response_prefix_example(
    history: Sequence[Utterance],
    knowledge: Sequence[int] | None,
    prefix: Sequence[int],
) -> EncodedExample:
    """Encoding ending right after the response marker plus a decoded prefix."""
    base = encode_example(history, knowledge, None)
    tokens = np.concatenate([
        base.tokens, np.array([RESP, *prefix], dtype=np.int64),
    ])
    tags = np.concatenate([
        base.tags,
        np.full(1 + len(prefix), int(StateTag.RESPONSE), dtype=np.int64),
    ])
    return EncodedExample(
        tokens=tokens,
        tags=tags,
        knowledge_marker=base.knowledge_marker,
        response_marker=base.length,
        n_knowledge=base.n_knowledge,
        n_response=len(prefix),
    )
