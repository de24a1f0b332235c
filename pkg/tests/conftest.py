import numpy as np
import pytest

from decouple.corpus import (
    Dialogue,
    KnowledgeCollection,
    SynthConfig,
    Utterance,
    Vocabulary,
    synthesize_corpus,
)
from decouple.seqmodel import ModelConfig, Parameters, init_params


@pytest.fixture(scope="session")
def tiny_vocab() -> Vocabulary:
    return Vocabulary([f"w{i:02d}" for i in range(20)])


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(tiny_vocab), d_model=16, n_layers=2,
                       n_heads=2, max_seq_len=48)


@pytest.fixture()
def tiny_params(tiny_model_cfg) -> Parameters:
    return init_params(tiny_model_cfg, seed=0)


def make_dialogue(vocab: Vocabulary, history: str, response: str,
                  knowledge: list[str] | None = None) -> Dialogue:
    utts = (
        Utterance(speaker="A", tokens=tuple(vocab.encode(history))),
        Utterance(speaker="B", tokens=tuple(vocab.encode(response))),
    )
    know = tuple(tuple(vocab.encode(s)) for s in knowledge) if knowledge else None
    return Dialogue(utterances=utts, knowledge=know)


@pytest.fixture(scope="session")
def small_corpus():
    return synthesize_corpus(
        SynthConfig(vocab_size=150, n_dialogues=60, seed=11)
    )


def constant_logit_params(cfg: ModelConfig, log_probs: np.ndarray) -> Parameters:
    """Parameters whose output distribution is softmax(log_probs) everywhere.

    All weights are zero except the output bias, so layer norms see zero
    vectors and every position emits exactly the same distribution.
    """
    params = init_params(cfg, seed=0)
    for name, arr in params.arrays.items():
        is_ln_gain = name.startswith(("ln1_g", "ln2_g")) or name == "lnf_g"
        arr[:] = 1.0 if is_ln_gain else 0.0
    params.arrays["bout"][:] = log_probs
    return params
