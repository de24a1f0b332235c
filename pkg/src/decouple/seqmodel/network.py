"""A small decoder-only autoregressive model with hand-written backprop.

One parameter set serves both the knowledge-generation role and the
response-generation role; the roles differ only in the dialogue-state
(segment) tags attached to each position.  Tags enter the model twice:

* as state embeddings added to the token embeddings at the input (scaled
  larger than token embeddings so keys and queries carry segment identity
  from the first step), and
* as a learned segment-pair attention gate: attention scores receive an
  additive bias ``seg_gate[tag_query, tag_key]``.  A model trained without a
  knowledge segment never receives gradient on the knowledge edges, so its
  learned attention keeps keying on the segments it saw.

Position information comes from a fixed per-head distance penalty over
pair-scoped distances (no learned absolute positions): the distance between
two positions counts only tokens belonging to either endpoint's segment, so
inserting or removing the knowledge slot leaves every other pair's geometry
exactly as trained.

The forward pass returns a cache; ``backward`` consumes the cache plus the
gradient of the loss w.r.t. the output logits and produces gradients for
every parameter array.  All math is float64.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import CheckpointError, ConfigError
from .encoding import StateTag
from .kernels import (
    alibi_slopes,
    attention_backward,
    attention_forward,
    layernorm_backward,
    layernorm_forward,
)

CHECKPOINT_VERSION = 1

N_STATE_TAGS = 4

# starting bias for the response->knowledge attention edge; zero is neutral,
# negative values handicap knowledge reading until training opens the edge
SEG_GATE_INIT = 0.0

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    n_state_tags: int = N_STATE_TAGS
    cls_head: bool = False

    def validate(self) -> None:
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.max_seq_len, self.n_state_tags) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)


@dataclass
class Parameters:
    """All weight arrays of one model, keyed by name.

    The same object is evaluated under both dialogue roles, so any update is
    visible to both by construction.  ``frozen`` marks the pretrained
    knowledge LM, which optimizers must refuse to touch.
    """

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    frozen: bool = False

    def copy(self) -> "Parameters":
        return Parameters(
            config=self.config,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            frozen=self.frozen,
        )

    def num_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(cfg: ModelConfig, seed: int) -> Parameters:
    """Deterministic random initialization.

    Weights are N(0, 0.02); residual-branch output projections are scaled
    down by sqrt(2 * n_layers).  State embeddings start at a larger scale
    than token embeddings so keys and queries carry segment identity from
    the first step: attention learned against one segment then transfers
    poorly to tokens of a segment the model never trained on.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    D, V = cfg.d_model, cfg.vocab_size
    std = 0.02
    res_scale = 1.0 / math.sqrt(2 * cfg.n_layers)

    def normal(*shape, scale=1.0):
        return rng.normal(0.0, std * scale, size=shape)

    seg_gate = np.zeros((cfg.n_state_tags, cfg.n_state_tags))
    if cfg.n_state_tags >= 3:
        seg_gate[int(StateTag.RESPONSE), int(StateTag.KNOWLEDGE)] = SEG_GATE_INIT
    arrays: dict[str, np.ndarray] = {
        "tok_emb": normal(V, D),
        "state_emb": rng.normal(0.0, 0.1, size=(cfg.n_state_tags, D)),
        "seg_gate": seg_gate,
    }
    for i in range(cfg.n_layers):
        arrays[f"ln1_g_{i}"] = np.ones(D)
        arrays[f"ln1_b_{i}"] = np.zeros(D)
        arrays[f"wqkv_{i}"] = normal(D, 3 * D)
        arrays[f"bqkv_{i}"] = np.zeros(3 * D)
        arrays[f"wo_{i}"] = normal(D, D, scale=res_scale)
        arrays[f"bo_{i}"] = np.zeros(D)
        arrays[f"ln2_g_{i}"] = np.ones(D)
        arrays[f"ln2_b_{i}"] = np.zeros(D)
        arrays[f"w1_{i}"] = normal(D, 4 * D)
        arrays[f"b1_{i}"] = np.zeros(4 * D)
        arrays[f"w2_{i}"] = normal(4 * D, D, scale=res_scale)
        arrays[f"b2_{i}"] = np.zeros(D)
    arrays["lnf_g"] = np.ones(D)
    arrays["lnf_b"] = np.zeros(D)
    arrays["wout"] = normal(D, V)
    arrays["bout"] = np.zeros(V)
    if cfg.cls_head:
        arrays["whead"] = normal(D)
        arrays["bhead"] = np.zeros(1)
    return Parameters(config=cfg, arrays=arrays)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)


def pair_scoped_distances(tags: np.ndarray) -> np.ndarray:
    """Distance d(i, j) counting only tokens tagged like position i or j.

    d(i, j) = #{ p : j < p <= i, tag_p in {tag_i, tag_j} }.  Within a segment
    this is the ordinary token distance; across segments it skips every token
    belonging to neither endpoint's segment, so inserting or removing a
    middle segment (the knowledge slot) leaves all other pairs' geometry
    exactly as trained.  Entries above the diagonal are meaningless and
    masked by causality downstream.
    """
    B, T = tags.shape
    S = int(tags.max()) + 1
    onehot = np.zeros((B, T, S))
    onehot[np.arange(B)[:, None], np.arange(T)[None, :], tags] = 1.0
    counts = onehot.cumsum(axis=1)                                # (B, T, S)
    # N[b, t, p] = number of positions <= p carrying tag_t (query/key tag of t)
    N = np.take_along_axis(
        counts.transpose(0, 2, 1), tags[:, :, None], axis=1
    )
    own = np.take_along_axis(N, np.arange(T)[None, :, None], axis=2)[..., 0]
    d_query = own[:, :, None] - N                 # C_{tag_i}[i] - C_{tag_i}[j]
    d_key = np.swapaxes(N - own[:, :, None], 1, 2)  # C_{tag_j}[i] - C_{tag_j}[j]
    same = tags[:, :, None] == tags[:, None, :]
    return d_query + np.where(same, 0.0, d_key)


def _attention_bias(seg_gate: np.ndarray, tags: np.ndarray, n_heads: int) -> np.ndarray:
    """Additive attention-score bias: distance penalty plus segment gate.

    Returns (B, H, T, T): -slope_h * d(i, j) + seg_gate[tag_i, tag_j] with
    pair-scoped distances.
    """
    dist = pair_scoped_distances(tags)
    slopes = alibi_slopes(n_heads)
    gate = seg_gate[tags[:, :, None], tags[:, None, :]]          # (B, T, T)
    return gate[:, None, :, :] - slopes[None, :, None, None] * dist[:, None, :, :]


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, Dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, T, H * Dh)


def forward(
    params: Parameters,
    ids: np.ndarray,
    tags: np.ndarray,
    *,
    head_positions: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Batched forward pass.

    ids, tags: (B, T) integer arrays.  Returns logits (B, T, V) where row t
    is the next-token distribution conditioned on positions <= t, plus a
    cache for ``backward``.  With ``head_positions`` (and a model built with
    a classification head) the cache also carries per-sequence head logits.
    """
    cfg = params.config
    a = params.arrays
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise ConfigError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")

    bias = _attention_bias(a["seg_gate"], tags, cfg.n_heads)
    x = a["tok_emb"][ids] + a["state_emb"][tags]
    layers: list[dict] = []
    for i in range(cfg.n_layers):
        h1, xhat1, rstd1 = layernorm_forward(x, a[f"ln1_g_{i}"], a[f"ln1_b_{i}"])
        qkv = h1 @ a[f"wqkv_{i}"] + a[f"bqkv_{i}"]
        D = cfg.d_model
        q = np.ascontiguousarray(_split_heads(qkv[..., :D], cfg.n_heads))
        k = np.ascontiguousarray(_split_heads(qkv[..., D:2 * D], cfg.n_heads))
        v = np.ascontiguousarray(_split_heads(qkv[..., 2 * D:], cfg.n_heads))
        attn, probs = attention_forward(q, k, v, bias)
        merged = _merge_heads(attn)
        x_mid = x + merged @ a[f"wo_{i}"] + a[f"bo_{i}"]
        h2, xhat2, rstd2 = layernorm_forward(x_mid, a[f"ln2_g_{i}"], a[f"ln2_b_{i}"])
        pre = h2 @ a[f"w1_{i}"] + a[f"b1_{i}"]
        act = _gelu(pre)
        x = x_mid + act @ a[f"w2_{i}"] + a[f"b2_{i}"]
        layers.append(dict(
            h1=h1, xhat1=xhat1, rstd1=rstd1, q=q, k=k, v=v, probs=probs,
            merged=merged, xhat2=xhat2, rstd2=rstd2, h2=h2, pre=pre, act=act,
        ))
    hf, xhatf, rstdf = layernorm_forward(x, a["lnf_g"], a["lnf_b"])
    logits = hf @ a["wout"] + a["bout"]
    tag_pairs = (
        tags[:, :, None] * cfg.n_state_tags + tags[:, None, :]
    ).ravel()
    cache: dict = dict(
        ids=ids, tags=tags, tag_pairs=tag_pairs, layers=layers,
        hf=hf, xhatf=xhatf, rstdf=rstdf,
        head_positions=None, head_logits=None,
    )
    if head_positions is not None:
        if not cfg.cls_head:
            raise ConfigError("model was built without a classification head")
        rows = hf[np.arange(B), head_positions]
        cache["head_positions"] = head_positions
        cache["head_logits"] = rows @ a["whead"] + a["bhead"][0]
    return logits, cache


def backward(
    params: Parameters,
    cache: dict,
    dlogits: np.ndarray,
    dhead: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of sum(loss) whose logit-gradient is ``dlogits``.

    ``dhead`` optionally carries gradients w.r.t. the classification-head
    logits produced in the forward pass.
    """
    cfg = params.config
    a = params.arrays
    grads = params.zeros_like()
    ids, tags = cache["ids"], cache["tags"]
    B, T = ids.shape
    D = cfg.d_model

    hf = cache["hf"]
    flat_hf = hf.reshape(-1, D)
    flat_dlog = dlogits.reshape(-1, cfg.vocab_size)
    grads["wout"] += flat_hf.T @ flat_dlog
    grads["bout"] += flat_dlog.sum(axis=0)
    dhf = dlogits @ a["wout"].T
    if dhead is not None:
        pos = cache["head_positions"]
        rows = hf[np.arange(B), pos]
        grads["whead"] += dhead @ rows
        grads["bhead"] += np.array([dhead.sum()])
        dhf[np.arange(B), pos] += dhead[:, None] * a["whead"]
    dx, dg, db = layernorm_backward(dhf, cache["xhatf"], cache["rstdf"], a["lnf_g"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    for i in reversed(range(cfg.n_layers)):
        ly = cache["layers"][i]
        # MLP branch
        dact = dx @ a[f"w2_{i}"].T
        grads[f"w2_{i}"] += ly["act"].reshape(-1, 4 * D).T @ dx.reshape(-1, D)
        grads[f"b2_{i}"] += dx.reshape(-1, D).sum(axis=0)
        dpre = dact * _gelu_grad(ly["pre"])
        dh2 = dpre @ a[f"w1_{i}"].T
        grads[f"w1_{i}"] += ly["h2"].reshape(-1, D).T @ dpre.reshape(-1, 4 * D)
        grads[f"b1_{i}"] += dpre.reshape(-1, 4 * D).sum(axis=0)
        dx2, dg2, db2 = layernorm_backward(dh2, ly["xhat2"], ly["rstd2"], a[f"ln2_g_{i}"])
        grads[f"ln2_g_{i}"] += dg2
        grads[f"ln2_b_{i}"] += db2
        dx = dx + dx2
        # attention branch
        dmerged = dx @ a[f"wo_{i}"].T
        grads[f"wo_{i}"] += ly["merged"].reshape(-1, D).T @ dx.reshape(-1, D)
        grads[f"bo_{i}"] += dx.reshape(-1, D).sum(axis=0)
        dattn = _split_heads(dmerged, cfg.n_heads)
        dq, dk, dv, dscores = attention_backward(
            dattn, ly["q"], ly["k"], ly["v"], ly["probs"]
        )
        S = cfg.n_state_tags
        grads["seg_gate"] += np.bincount(
            cache["tag_pairs"], weights=dscores.sum(axis=1).ravel(),
            minlength=S * S,
        ).reshape(S, S)
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1
        )
        dh1 = dqkv @ a[f"wqkv_{i}"].T
        grads[f"wqkv_{i}"] += ly["h1"].reshape(-1, D).T @ dqkv.reshape(-1, 3 * D)
        grads[f"bqkv_{i}"] += dqkv.reshape(-1, 3 * D).sum(axis=0)
        dx1, dg1, db1 = layernorm_backward(dh1, ly["xhat1"], ly["rstd1"], a[f"ln1_g_{i}"])
        grads[f"ln1_g_{i}"] += dg1
        grads[f"ln1_b_{i}"] += db1
        dx = dx + dx1

    flat_dx = dx.reshape(-1, D)
    np.add.at(grads["tok_emb"], ids.reshape(-1), flat_dx)
    np.add.at(grads["state_emb"], tags.reshape(-1), flat_dx)
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: Parameters, path: str | Path, vocab_hash: str) -> None:
    """Versioned binary container: model config, vocab hash, weight arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "vocab_hash": vocab_hash,
        "frozen": params.frozen,
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        **params.arrays,
    )
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(
    path: str | Path, expected_vocab_hash: str | None = None
) -> tuple[Parameters, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(io.BytesIO(path.read_bytes())) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path} is not a model checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {meta.get('version')} "
                f"!= supported {CHECKPOINT_VERSION}"
            )
        if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
            raise CheckpointError(
                f"{path}: checkpoint vocabulary hash {meta['vocab_hash'][:12]}... "
                f"does not match the supplied vocabulary"
            )
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    cfg = ModelConfig.from_dict(meta["config"])
    return Parameters(config=cfg, arrays=arrays, frozen=meta["frozen"]), meta
