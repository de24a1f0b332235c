"""Training methods: decoupling, full, tenlen, vanilla, reallm, plus LM pretraining.

All methods share one update skeleton: encode a batch, run the forward pass
once, assemble the gradient of the loss w.r.t. the output logits, and run the
hand-written backward pass.  The decoupling method samples the knowledge slot
from the model itself, treats the response likelihood as a detached reward
for a score-function update of the knowledge-role log-likelihood, and adds a
differentiated per-step KL penalty toward the frozen knowledge LM:

    update = descent on  alpha * NLL(response | history, z)
                       - beta  * reward * log P(z | history)     (reward detached)
                       + gamma * sum_t KL(model_t || knowledge_LM_t)

The reference methods are plain likelihood training with the knowledge slot
filled by the full paired knowledge, a random ten-token window of it, or
nothing; reallm supervises the knowledge role on the paired knowledge while
the response role trains on model-sampled knowledge.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (
    EOS,
    Dialogue,
    KnowledgeCollection,
    Pair,
    Vocabulary,
    concat_knowledge,
    random_knowledge_window,
    response_pairs,
)
from .errors import ConfigError, DataError, FrozenParametersError
from .seqmodel import (
    ModelConfig,
    Parameters,
    StateTag,
    backward,
    batchify,
    encode_example,
    forward,
    init_params,
    log_softmax,
    sample_knowledge_batch,
    save_checkpoint,
)
from .seqmodel.encoding import EncodedExample
from .seqmodel.ops import LOGPROB_FLOOR

METHODS = ("decoupling", "full", "tenlen", "vanilla", "reallm")
REWARD_MODES = ("per-token-normalized", "exact-probability")
TENLEN_WINDOW = 10


@dataclass
class TrainConfig:
    """Method selector plus every training knob.

    ``alpha`` and ``beta`` weight the response-likelihood and knowledge-slot
    likelihood paths (both default 1); ``gamma`` weights the KL penalty
    (recommended range 0.1 to 1, default 0.5; 0 is accepted for ablations).
    """

    method: str = "decoupling"
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    batch_size: int = 32
    lr: float = 2e-3
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    epochs: int = 8
    max_steps: int | None = None
    z_max_len: int = 12
    reward_mode: str = "per-token-normalized"
    baseline: bool = True
    baseline_decay: float = 0.9
    temperature: float = 1.0
    cls_weight: float = 0.0
    valid_frac: float = 0.1
    log_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}")
        if min(self.alpha, self.beta, self.gamma, self.cls_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gamma > 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.z_max_len < 1:
            raise ConfigError("batch_size, epochs and z_max_len must be >= 1")
        if not 0.0 < self.lr:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.valid_frac < 1.0:
            raise ConfigError("valid_frac must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainLogRecord:
    step: int
    loss: float
    mean_reward: float
    mean_kl: float
    grad_norm_phi: float
    grad_norm_sigma: float
    wall_time: float
    mean_z_len: float = 0.0
    valid_ppl: float | None = None
    skipped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardBaseline:
    """Exponential moving average of batch-mean reward.

    The value consumed at a step was computed from earlier batches only, so
    subtracting it leaves the score-function estimator unbiased.
    """

    decay: float = 0.9
    value: float = 0.0
    initialized: bool = False

    def update(self, mean_reward: float) -> None:
        if not self.initialized:
            self.value = mean_reward
            self.initialized = True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward


class Adam:
    """Adam with bias correction; refuses to update frozen parameters."""

    def __init__(self, params: Parameters, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: Parameters, grads: dict[str, np.ndarray],
             lr_scale: float = 1.0) -> None:
        if params.frozen:
            raise FrozenParametersError("attempted to update frozen parameters")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        lr = self.lr * lr_scale
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params.arrays[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _finite(grads: dict[str, np.ndarray]) -> bool:
    return all(np.isfinite(g).all() for g in grads.values())


# ---------------------------------------------------------------------------
# Loss assembly helpers
# ---------------------------------------------------------------------------

def _response_nll_dlogits(
    examples: Sequence[EncodedExample],
    logprobs: np.ndarray,
    dlogits: np.ndarray,
    weight: float,
) -> tuple[float, list[np.ndarray]]:
    """Token-mean response NLL averaged over the batch; accumulates dlogits.

    Returns (loss, per-example response log-prob arrays).
    """
    B = len(examples)
    probs_needed = weight != 0.0
    loss = 0.0
    per_example: list[np.ndarray] = []
    for b, ex in enumerate(examples):
        rows = ex.response_rows()
        targets = ex.tokens[rows + 1]
        lp = logprobs[b, rows, targets]
        per_example.append(lp)
        n = len(rows)
        loss += float(-lp.sum()) / n / B
        if probs_needed:
            w = weight / (n * B)
            block = np.exp(logprobs[b, rows]) * w
            block[np.arange(n), targets] -= w
            dlogits[b, rows] += block
    return loss, per_example


def _reward_from_logprobs(lp: np.ndarray, mode: str) -> float:
    total = lp.mean() if mode == "per-token-normalized" else lp.sum()
    return float(np.exp(max(total, LOGPROB_FLOOR)))


def _classification_term(
    params: Parameters,
    batch: Sequence[Pair],
    knowledge_per_example: Sequence[Sequence[int] | None],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray]]:
    """Gold-vs-distractor classification through the head logit.

    Each example is paired with another batch member's response as the
    distractor; the loss is the softmax cross-entropy of the two head
    logits.  Requires a model built with a classification head and a batch
    of at least two examples.
    """
    if not params.config.cls_head:
        raise ConfigError("cls_weight > 0 requires a model with cls_head=True")
    B = len(batch)
    if B < 2:
        raise ConfigError("classification loss needs batch_size >= 2")
    d_idx = [(b + 1 + int(rng.integers(B - 1))) % B for b in range(B)]

    def head_scores(responses):
        examples = [
            encode_example(p.history, z, resp, append_eos=True)
            for p, z, resp in zip(batch, knowledge_per_example, responses)
        ]
        ids, tags, lengths = batchify(examples)
        logits, cache = forward(params, ids, tags, head_positions=lengths - 1)
        return logits, cache

    logits_g, cache_g = head_scores([p.response.tokens for p in batch])
    logits_d, cache_d = head_scores([batch[i].response.tokens for i in d_idx])
    s_g = cache_g["head_logits"]
    s_d = cache_d["head_logits"]
    m = np.maximum(s_g, s_d)
    p_g = np.exp(s_g - m) / (np.exp(s_g - m) + np.exp(s_d - m))
    loss = cfg.cls_weight * float(-np.log(p_g).mean())
    dg = cfg.cls_weight * (p_g - 1.0) / B
    dd = cfg.cls_weight * (1.0 - p_g) / B
    grads_g = backward(params, cache_g, np.zeros_like(logits_g), dhead=dg)
    grads_d = backward(params, cache_d, np.zeros_like(logits_d), dhead=dd)
    return loss, {k: grads_g[k] + grads_d[k] for k in grads_g}


def _knowledge_lm_batch_logprobs(
    lm: Parameters, z_ctxs: Sequence[Sequence[int]], n_steps: Sequence[int]
) -> np.ndarray:
    """Padded (B, max_steps, V) next-token log-probs of the LM along each z."""
    from .corpus import BOS, PAD

    B = len(z_ctxs)
    T = 1 + max(len(z) for z in z_ctxs)
    ids = np.full((B, T), PAD, dtype=np.int64)
    tags = np.full((B, T), int(StateTag.KNOWLEDGE), dtype=np.int64)
    for b, z in enumerate(z_ctxs):
        ids[b, 0] = BOS
        if z:
            ids[b, 1:1 + len(z)] = z
    logits, _ = forward(lm, ids, tags)
    return log_softmax(logits)


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------

def decoupling_step(
    params: Parameters,
    lm: Parameters | None,
    batch: Sequence[Pair],
    cfg: TrainConfig,
    opt: Adam,
    rng: np.random.Generator,
    baseline: RewardBaseline | None = None,
    *,
    step: int = 0,
    lr_scale: float = 1.0,
) -> TrainLogRecord:
    """One update of the unsupervised knowledge-slot method.

    Samples z from the model given each history, scores the response given
    (history, z), and combines the response-likelihood gradient with the
    reward-weighted knowledge-slot gradient and the differentiated KL
    penalty.  The reward never backpropagates; only the slot log-likelihood
    and the KL term do.
    """
    t0 = time.perf_counter()
    if cfg.gamma > 0 and lm is None:
        raise ConfigError("decoupling with gamma > 0 needs a pretrained knowledge LM")
    if lm is not None and not lm.frozen:
        raise ConfigError("the knowledge LM must be frozen")

    histories = [p.history for p in batch]
    samples = sample_knowledge_batch(
        params, histories, cfg.z_max_len, cfg.temperature, rng
    )
    z_ctxs = [s.context_tokens() for s in samples]
    examples = [
        encode_example(p.history, z, p.response.tokens, append_eos=True,
                       keep_empty_knowledge_marker=True)
        for p, z in zip(batch, z_ctxs)
    ]
    ids, tags, _ = batchify(examples)
    logits, cache = forward(params, ids, tags)
    logprobs = log_softmax(logits)
    B = len(batch)

    dlogits_phi = np.zeros_like(logits)
    dlogits_sigma = np.zeros_like(logits)
    loss, per_example_lp = _response_nll_dlogits(
        examples, logprobs, dlogits_phi, weight=cfg.alpha
    )

    rewards = np.array([
        _reward_from_logprobs(lp, cfg.reward_mode) for lp in per_example_lp
    ])
    base_value = baseline.value if (baseline is not None and cfg.baseline) else 0.0

    lm_logprobs = None
    if cfg.gamma > 0:
        lm_logprobs = _knowledge_lm_batch_logprobs(
            lm, z_ctxs, [len(s.tokens) for s in samples]
        )

    kl_totals = np.zeros(B)
    for b, (ex, sample) in enumerate(zip(examples, samples)):
        n_steps = len(sample.tokens)
        krows = ex.knowledge_marker + np.arange(n_steps)
        ktargets = np.array(sample.tokens, dtype=np.int64)
        p_rows = np.exp(logprobs[b, krows])
        if cfg.beta > 0:
            adv = rewards[b] - base_value
            w = cfg.beta * adv / B
            block = p_rows * w
            block[np.arange(n_steps), ktargets] -= w
            dlogits_sigma[b, krows] += block
        if cfg.gamma > 0:
            logq = lm_logprobs[b, :n_steps]
            logp = logprobs[b, krows]
            kl_steps = (p_rows * (logp - logq)).sum(axis=1)
            kl_totals[b] = kl_steps.sum()
            dlogits_sigma[b, krows] += (
                cfg.gamma / B * p_rows * ((logp - logq) - kl_steps[:, None])
            )

    grads_phi = backward(params, cache, dlogits_phi)
    grads_sigma = backward(params, cache, dlogits_sigma)
    norm_phi = global_norm(grads_phi)
    norm_sigma = global_norm(grads_sigma)
    grads = {k: grads_phi[k] + grads_sigma[k] for k in grads_phi}
    if cfg.cls_weight > 0:
        cls_loss, cls_grads = _classification_term(params, batch, z_ctxs, cfg, rng)
        loss += cls_loss
        for k in grads:
            grads[k] += cls_grads[k]

    record = TrainLogRecord(
        step=step, loss=loss, mean_reward=float(rewards.mean()),
        mean_kl=float(kl_totals.mean()), grad_norm_phi=norm_phi,
        grad_norm_sigma=norm_sigma, wall_time=time.perf_counter() - t0,
        mean_z_len=float(np.mean([len(z) for z in z_ctxs])),
    )
    if not _finite(grads):
        record.skipped = True
        return record
    clip_grads(grads, cfg.grad_clip)
    opt.step(params, grads, lr_scale)
    if baseline is not None and cfg.baseline:
        baseline.update(float(rewards.mean()))
    return record


def mle_step(
    params: Parameters,
    batch: Sequence[Pair],
    knowledge_mode: str,
    cfg: TrainConfig,
    opt: Adam,
    rng: np.random.Generator,
    *,
    step: int = 0,
    lr_scale: float = 1.0,
) -> TrainLogRecord:
    """Likelihood training with the knowledge slot filled per ``knowledge_mode``.

    Modes: ``full`` concatenates all paired knowledge; ``tenlen-window``
    takes a random contiguous ten-token window of it; ``none`` omits the
    segment entirely.
    """
    t0 = time.perf_counter()
    if knowledge_mode not in ("full", "tenlen-window", "none"):
        raise ConfigError(f"unknown knowledge_mode {knowledge_mode!r}")
    examples = []
    z_per_example: list[list[int] | None] = []
    for pair in batch:
        if knowledge_mode == "none":
            z = None
        else:
            if not pair.knowledge:
                raise DataError(
                    f"knowledge_mode={knowledge_mode} but dialogue "
                    f"{pair.dialogue_index} has no knowledge"
                )
            z = concat_knowledge(pair.knowledge)
            if knowledge_mode == "tenlen-window":
                z = random_knowledge_window(
                    z, TENLEN_WINDOW, seed=int(rng.integers(2 ** 31))
                )
        z_per_example.append(z)
        examples.append(
            encode_example(pair.history, z, pair.response.tokens, append_eos=True)
        )
    ids, tags, _ = batchify(examples)
    logits, cache = forward(params, ids, tags)
    logprobs = log_softmax(logits)
    dlogits = np.zeros_like(logits)
    loss, _ = _response_nll_dlogits(examples, logprobs, dlogits, weight=1.0)
    grads = backward(params, cache, dlogits)
    if cfg.cls_weight > 0:
        cls_loss, cls_grads = _classification_term(
            params, batch, z_per_example, cfg, rng
        )
        loss += cls_loss
        for k in grads:
            grads[k] += cls_grads[k]
    record = TrainLogRecord(
        step=step, loss=loss, mean_reward=0.0, mean_kl=0.0,
        grad_norm_phi=global_norm(grads), grad_norm_sigma=0.0,
        wall_time=time.perf_counter() - t0,
    )
    if not _finite(grads):
        record.skipped = True
        return record
    clip_grads(grads, cfg.grad_clip)
    opt.step(params, grads, lr_scale)
    return record


def reallm_step(
    params: Parameters,
    lm: Parameters | None,
    batch: Sequence[Pair],
    cfg: TrainConfig,
    opt: Adam,
    rng: np.random.Generator,
    *,
    step: int = 0,
    lr_scale: float = 1.0,
) -> TrainLogRecord:
    """Supervised knowledge role, sampled-knowledge response role.

    The knowledge-slot path minimizes the NLL of the paired knowledge given
    the history; the response path minimizes response NLL given knowledge
    sampled from the current model.  The two terms are separate losses; the
    supervision term contributes nothing to the response rows.  ``lm`` is
    accepted for interface parity and is unused.
    """
    t0 = time.perf_counter()
    for pair in batch:
        if not pair.knowledge:
            raise DataError(
                f"reallm requires paired knowledge; dialogue "
                f"{pair.dialogue_index} has none"
            )

    # knowledge-slot supervision on the paired knowledge (EOS-terminated)
    sup_examples = [
        encode_example(p.history, concat_knowledge(p.knowledge), None)
        for p in batch
    ]
    ids, tags, _ = batchify(sup_examples)
    logits, cache = forward(params, ids, tags)
    logprobs = log_softmax(logits)
    B = len(batch)
    dlogits = np.zeros_like(logits)
    sup_loss = 0.0
    for b, ex in enumerate(sup_examples):
        rows = ex.knowledge_marker + np.arange(ex.n_knowledge + 1)
        targets = np.append(ex.tokens[ex.knowledge_marker + 1:], EOS)
        lp = logprobs[b, rows, targets]
        n = len(rows)
        sup_loss += float(-lp.sum()) / n / B
        w = cfg.beta / (n * B)
        block = np.exp(logprobs[b, rows]) * w
        block[np.arange(n), targets] -= w
        dlogits[b, rows] += block
    grads_sigma = backward(params, cache, dlogits)

    # response path on knowledge sampled from the current model
    samples = sample_knowledge_batch(
        params, [p.history for p in batch], cfg.z_max_len, cfg.temperature, rng
    )
    phi_examples = [
        encode_example(p.history, s.context_tokens(), p.response.tokens,
                       append_eos=True, keep_empty_knowledge_marker=True)
        for p, s in zip(batch, samples)
    ]
    ids2, tags2, _ = batchify(phi_examples)
    logits2, cache2 = forward(params, ids2, tags2)
    logprobs2 = log_softmax(logits2)
    dlogits2 = np.zeros_like(logits2)
    phi_loss, _ = _response_nll_dlogits(
        phi_examples, logprobs2, dlogits2, weight=cfg.alpha
    )
    grads_phi = backward(params, cache2, dlogits2)

    norm_phi = global_norm(grads_phi)
    norm_sigma = global_norm(grads_sigma)
    grads = {k: grads_phi[k] + grads_sigma[k] for k in grads_phi}
    record = TrainLogRecord(
        step=step, loss=phi_loss + sup_loss, mean_reward=0.0, mean_kl=0.0,
        grad_norm_phi=norm_phi, grad_norm_sigma=norm_sigma,
        wall_time=time.perf_counter() - t0,
    )
    if not _finite(grads):
        record.skipped = True
        return record
    clip_grads(grads, cfg.grad_clip)
    opt.step(params, grads, lr_scale)
    return record


# ---------------------------------------------------------------------------
# Knowledge LM pretraining
# ---------------------------------------------------------------------------

def _lm_example(sentence: Sequence[int]) -> EncodedExample:
    from .corpus import BOS

    tokens = np.array([BOS, *sentence, EOS], dtype=np.int64)
    tags = np.full(len(tokens), int(StateTag.KNOWLEDGE), dtype=np.int64)
    return EncodedExample(
        tokens=tokens, tags=tags, knowledge_marker=0, response_marker=None,
        n_knowledge=len(tokens) - 1, n_response=0,
    )


def lm_heldout_ppl(params: Parameters, sentences: Sequence[Sequence[int]]) -> float:
    """Perplexity of EOS-terminated knowledge sentences under the LM."""
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(sentences), 64):
        chunk = [_lm_example(s) for s in sentences[start:start + 64]]
        ids, tags, lengths = batchify(chunk)
        logits, _ = forward(params, ids, tags)
        logprobs = log_softmax(logits)
        for b, ex in enumerate(chunk):
            rows = np.arange(ex.length - 1)
            targets = ex.tokens[1:]
            total_nll += float(-logprobs[b, rows, targets].sum())
            total_tokens += len(rows)
    return math.exp(total_nll / total_tokens)


def pretrain_knowledge_lm(
    collection: KnowledgeCollection,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> tuple[Parameters, list[TrainLogRecord]]:
    """Next-token pretraining on the knowledge collection; returns frozen params.

    A tenth of the sentences (at least one, when the collection has more than
    ten) is held out for the reported perplexity; tiny collections evaluate
    on the training sentences themselves.
    """
    if len(collection) == 0:
        raise ConfigError("cannot pretrain a knowledge LM on an empty collection")
    rng = np.random.default_rng([cfg.seed, 101])
    order = rng.permutation(len(collection))
    sentences = [collection.sentences[i] for i in order]
    if len(sentences) > 10:
        n_held = max(1, len(sentences) // 10)
        heldout, train = sentences[:n_held], sentences[n_held:]
    else:
        heldout, train = sentences, sentences

    params = init_params(model_cfg, seed=cfg.seed + 977)
    opt = Adam(params, lr=cfg.lr)
    records: list[TrainLogRecord] = []
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    warmup = max(1, int(cfg.warmup_frac * total_steps))
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            t0 = time.perf_counter()
            chunk = [_lm_example(train[i]) for i in perm[start:start + cfg.batch_size]]
            ids, tags, _ = batchify(chunk)
            logits, cache = forward(params, ids, tags)
            logprobs = log_softmax(logits)
            dlogits = np.zeros_like(logits)
            loss = 0.0
            B = len(chunk)
            for b, ex in enumerate(chunk):
                rows = np.arange(ex.length - 1)
                targets = ex.tokens[1:]
                lp = logprobs[b, rows, targets]
                n = len(rows)
                loss += float(-lp.sum()) / n / B
                w = 1.0 / (n * B)
                block = np.exp(logprobs[b, rows]) * w
                block[np.arange(n), targets] -= w
                dlogits[b, rows] += block
            grads = backward(params, cache, dlogits)
            step += 1
            record = TrainLogRecord(
                step=step, loss=loss, mean_reward=0.0, mean_kl=0.0,
                grad_norm_phi=global_norm(grads), grad_norm_sigma=0.0,
                wall_time=time.perf_counter() - t0,
            )
            if _finite(grads):
                clip_grads(grads, cfg.grad_clip)
                opt.step(params, grads, lr_scale=min(1.0, step / warmup))
            else:
                record.skipped = True
            records.append(record)
        records[-1].valid_ppl = lm_heldout_ppl(params, heldout)
    params.frozen = True
    return params, records


# ---------------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    params: Parameters
    best_valid_ppl: float
    records: list[TrainLogRecord]
    lm: Parameters | None
    best_checkpoint: Path | None = None


def validation_length(method: str) -> int | None:
    """Knowledge amount used for checkpoint-selection perplexity.

    Knowledge-supervised methods validate with full knowledge; the
    unsupervised ones validate with none (their honest inference condition).
    Returns None for full knowledge, an int for a prefix length.
    """
    return {"full": None, "tenlen": TENLEN_WINDOW, "reallm": None,
            "vanilla": 0, "decoupling": 0}[method]


def split_dialogues(
    dialogues: Sequence[Dialogue], valid_frac: float, seed: int
) -> tuple[list[Dialogue], list[Dialogue]]:
    """Deterministic train/valid split at the dialogue level."""
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(dialogues))
    n_valid = max(1, int(round(valid_frac * len(dialogues)))) if valid_frac > 0 else 0
    valid_idx = set(int(i) for i in order[:n_valid])
    train = [d for i, d in enumerate(dialogues) if i not in valid_idx]
    valid = [d for i, d in enumerate(dialogues) if i in valid_idx]
    return train, valid


def run_training(
    dialogues: Sequence[Dialogue],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    *,
    knowledge: KnowledgeCollection | None = None,
    lm: Parameters | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Train one method end to end with periodic validation perplexity.

    Validates the method/dataset combination before any step, keeps the best
    checkpoint by validation perplexity, and is fully reproducible from the
    seed.  For the decoupling method a knowledge LM is pretrained on
    ``knowledge`` (or the union of paired knowledge) when none is supplied.
    """
    from .evaluation import perplexity

    cfg.validate()
    model_cfg.validate()
    needs_knowledge = cfg.method in ("full", "tenlen", "reallm")
    if needs_knowledge:
        missing = [i for i, d in enumerate(dialogues) if not d.knowledge]
        if missing:
            raise ConfigError(
                f"method {cfg.method} requires paired knowledge, but "
                f"{len(missing)} dialogues (first: {missing[0]}) have none"
            )
    if cfg.method == "decoupling" and cfg.gamma > 0 and lm is None:
        if knowledge is None:
            seen: dict[tuple[int, ...], None] = {}
            for d in dialogues:
                for s in d.knowledge or ():
                    seen.setdefault(s, None)
            if not seen:
                raise ConfigError(
                    "decoupling needs a knowledge collection (or LM) to "
                    "regularize against, and the dataset has no knowledge"
                )
            knowledge = KnowledgeCollection(sentences=tuple(seen), source="dataset")
        lm, _ = pretrain_knowledge_lm(collection=knowledge, model_cfg=model_cfg, cfg=cfg)

    train_dlgs, valid_dlgs = split_dialogues(dialogues, cfg.valid_frac, cfg.seed)
    train_pairs = response_pairs(train_dlgs)
    valid_pairs = response_pairs(valid_dlgs) if valid_dlgs else []
    if not train_pairs:
        raise ConfigError("no training pairs after the validation split")

    params = init_params(model_cfg, seed=cfg.seed)
    opt = Adam(params, lr=cfg.lr)
    baseline = RewardBaseline(decay=cfg.baseline_decay)
    rng_data = np.random.default_rng([cfg.seed, 11])
    rng_z = np.random.default_rng([cfg.seed, 13])
    rng_win = np.random.default_rng([cfg.seed, 17])

    steps_per_epoch = max(1, math.ceil(len(train_pairs) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    warmup = max(1, int(cfg.warmup_frac * total_steps))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    records: list[TrainLogRecord] = []
    best_ppl = math.inf
    best_params = params.copy()
    best_ckpt: Path | None = None
    val_len = validation_length(cfg.method)
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        perm = rng_data.permutation(len(train_pairs))
        for start in range(0, len(train_pairs), cfg.batch_size):
            batch = [train_pairs[i] for i in perm[start:start + cfg.batch_size]]
            step += 1
            lr_scale = min(1.0, step / warmup)
            if cfg.method == "decoupling":
                rec = decoupling_step(params, lm, batch, cfg, opt, rng_z,
                                      baseline, step=step, lr_scale=lr_scale)
            elif cfg.method == "reallm":
                rec = reallm_step(params, lm, batch, cfg, opt, rng_z,
                                  step=step, lr_scale=lr_scale)
            else:
                mode = {"full": "full", "tenlen": "tenlen-window",
                        "vanilla": "none"}[cfg.method]
                rec = mle_step(params, batch, mode, cfg, opt, rng_win,
                               step=step, lr_scale=lr_scale)
            records.append(rec)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if valid_pairs:
            ppl = perplexity(params, valid_pairs, val_len)
            records[-1].valid_ppl = ppl
            if out_path is not None:
                save_checkpoint(params, out_path / f"step-{step}.ckpt",
                                vocab.content_hash())
            if ppl < best_ppl:
                best_ppl = ppl
                best_params = params.copy()
        else:
            best_params = params.copy()
    if out_path is not None:
        best_ckpt = out_path / "best.ckpt"
        save_checkpoint(best_params, best_ckpt, vocab.content_hash())
    return RunResult(
        params=best_params, best_valid_ppl=best_ppl, records=records,
        lm=lm, best_checkpoint=best_ckpt,
    )
