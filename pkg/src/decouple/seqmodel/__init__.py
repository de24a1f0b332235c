"""Shared-parameter sequence model: one decoder serves both dialogue roles."""

from .backend import active_backend
from .encoding import EncodedExample, StateTag, batchify, encode_example
from .network import (
    ModelConfig,
    Parameters,
    backward,
    forward,
    init_params,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
)
from .ops import (
    RankResult,
    SampleResult,
    batch_logprobs,
    forward_logprobs,
    generate_response,
    knowledge_lm_logprobs,
    knowledge_slot_logprobs,
    rank_candidates,
    response_logprob,
    sample_knowledge,
    sample_knowledge_batch,
    score_candidates,
    stepwise_kl,
)

__all__ = [
    "EncodedExample",
    "ModelConfig",
    "Parameters",
    "RankResult",
    "SampleResult",
    "StateTag",
    "active_backend",
    "backward",
    "batch_logprobs",
    "batchify",
    "encode_example",
    "forward",
    "forward_logprobs",
    "generate_response",
    "init_params",
    "knowledge_lm_logprobs",
    "knowledge_slot_logprobs",
    "load_checkpoint",
    "log_softmax",
    "rank_candidates",
    "response_logprob",
    "sample_knowledge",
    "sample_knowledge_batch",
    "save_checkpoint",
    "score_candidates",
    "stepwise_kl",
]
