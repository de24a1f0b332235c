"""Metrics and the knowledge-gap protocol.

Models are evaluated while the amount of knowledge supplied at inference is
swept from nothing (length 0) through token prefixes up to the full paired
knowledge.  Each metric traces a curve over those lengths; the population
variance of a curve is the knowledge gap.  Reports are emitted as CSV (exact
round-trip), a summary JSON, and one SVG line chart per metric, all with
deterministic bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import BOS, Pair, concat_knowledge, knowledge_prefix
from .errors import ConfigError, DataError
from .seqmodel import (
    Parameters,
    StateTag,
    batchify,
    encode_example,
    forward,
    generate_response,
    log_softmax,
    rank_candidates,
)

FULL = None  # sentinel for "all available knowledge"

_EVAL_CHUNK = 64


def _knowledge_for(pair: Pair, length: int | None) -> list[int] | None:
    """Resolve the knowledge tokens a pair contributes at a sweep length."""
    if length == 0:
        return None
    if not pair.knowledge:
        raise DataError(
            f"dialogue {pair.dialogue_index} has no knowledge but length "
            f"{'full' if length is None else length} was requested"
        )
    z = concat_knowledge(pair.knowledge)
    if length is None:
        return z
    prefix = knowledge_prefix(z, length)
    return prefix or None


def perplexity(params: Parameters, pairs: Sequence[Pair], length: int | None) -> float:
    """exp of the mean per-response-token NLL, knowledge truncated to ``length``.

    Counts response tokens only; histories, knowledge and the terminator are
    conditioned on but never scored.  ``length=None`` means full knowledge.
    """
    if not pairs:
        raise DataError("cannot evaluate perplexity on an empty dataset")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(pairs), _EVAL_CHUNK):
        chunk = pairs[start:start + _EVAL_CHUNK]
        examples = [
            encode_example(p.history, _knowledge_for(p, length),
                           p.response.tokens, append_eos=False)
            for p in chunk
        ]
        ids, tags, _ = batchify(examples)
        logits, _ = forward(params, ids, tags)
        logprobs = log_softmax(logits)
        for b, ex in enumerate(examples):
            rows = ex.response_rows()
            targets = ex.tokens[rows + 1]
            total_nll += float(-logprobs[b, rows, targets].sum())
            total_tokens += len(rows)
    return math.exp(total_nll / total_tokens)


def hits_at_1(
    params: Parameters,
    pairs: Sequence[Pair],
    length: int | None,
    n_candidates: int,
    *,
    seed: int = 0,
) -> float:
    """Percent of pairs whose gold response ranks first among candidates.

    Uses the pair's own candidate list when present; otherwise samples
    ``n_candidates - 1`` distinct distractor responses from the split with a
    fixed seed and places the gold at a random index.
    """
    if not pairs:
        raise DataError("cannot evaluate hits@1 on an empty dataset")
    if n_candidates < 2:
        raise ConfigError("n_candidates must be >= 2")
    rng = np.random.default_rng([seed, 23])
    pool = sorted({p.response.tokens for p in pairs})
    hits = 0
    for pair in pairs:
        if pair.candidates is not None:
            cands = list(pair.candidates)
            gold_idx = pair.gold_index
        else:
            distractors = [c for c in pool if c != pair.response.tokens]
            if len(distractors) < n_candidates - 1:
                raise DataError(
                    f"only {len(distractors)} distinct distractors available, "
                    f"need {n_candidates - 1}"
                )
            picks = rng.choice(len(distractors), size=n_candidates - 1, replace=False)
            cands = [distractors[i] for i in picks]
            gold_idx = int(rng.integers(0, n_candidates))
            cands.insert(gold_idx, pair.response.tokens)
        result = rank_candidates(
            params, pair.history, _knowledge_for(pair, length), cands,
            gold_index=gold_idx,
        )
        hits += int(result.hit)
    return 100.0 * hits / len(pairs)


def unigram_f1(prediction: Sequence[int], reference: Sequence[int]) -> float:
    """Multiset unigram F1 between two token sequences, in percent."""
    if len(reference) == 0:
        raise DataError("reference must be non-empty")
    if len(prediction) == 0:
        return 0.0
    overlap = sum((Counter(prediction) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(prediction)
    recall = overlap / len(reference)
    return 100.0 * 2 * precision * recall / (precision + recall)


def generation_f1(
    params: Parameters,
    pairs: Sequence[Pair],
    length: int | None,
    *,
    max_gen_len: int = 16,
) -> float:
    """Mean unigram F1 of greedy-decoded responses against the references."""
    if not pairs:
        raise DataError("cannot evaluate F1 on an empty dataset")
    scores = []
    for pair in pairs:
        pred = generate_response(
            params, pair.history, _knowledge_for(pair, length), max_gen_len
        )
        scores.append(unigram_f1(pred, pair.response.tokens))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Gap curves
# ---------------------------------------------------------------------------

DEFAULT_LENGTHS: tuple[int | None, ...] = (0, 2, 4, 6, 8, 10, 15, 20, FULL)
METRIC_NAMES = ("ppl", "hits1", "f1")


@dataclass(frozen=True)
class GapCurve:
    """One metric traced over strictly increasing knowledge lengths."""

    metric: str
    method: str
    dataset: str
    points: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        lengths = [p[0] for p in self.points]
        if not lengths or lengths[0] != 0:
            raise ConfigError("gap curves must start at length 0")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ConfigError("gap-curve lengths must be strictly increasing")
        if not all(math.isfinite(v) for _, v in self.points):
            raise ConfigError("gap-curve values must be finite")

    def lengths(self) -> list[int]:
        return [p[0] for p in self.points]

    def values(self) -> list[float]:
        return [p[1] for p in self.points]


def gap_variance(curve: GapCurve) -> float:
    """Population variance of the curve's values across lengths."""
    if len(curve.points) < 2:
        raise DataError("gap variance needs a curve with at least 2 points")
    return float(np.var(curve.values()))


def resolve_lengths(
    lengths: Sequence[int | None], pairs: Sequence[Pair]
) -> list[int]:
    """Map a requested grid onto the dataset's actual knowledge lengths.

    The full-knowledge sentinel becomes the maximum concatenated knowledge
    length over the split; numeric lengths at or beyond it are dropped so the
    resolved grid stays strictly increasing with no duplicate endpoints.
    """
    if 0 not in lengths or FULL not in lengths:
        raise ConfigError("the length grid must include 0 and the full sentinel")
    full_len = 0
    for p in pairs:
        if p.knowledge:
            full_len = max(full_len, len(concat_knowledge(p.knowledge)))
    if full_len == 0:
        raise DataError("dataset has no knowledge; a gap sweep needs some")
    numeric = sorted({int(l) for l in lengths if l is not None and 0 <= l < full_len})
    return numeric + [full_len]


def gap_sweep(
    params: Parameters,
    pairs: Sequence[Pair],
    lengths: Sequence[int | None] = DEFAULT_LENGTHS,
    metrics: Iterable[str] = METRIC_NAMES,
    *,
    method: str = "",
    dataset: str = "",
    n_candidates: int = 20,
    seed: int = 0,
    max_gen_len: int = 16,
) -> list[GapCurve]:
    """Trace each metric over the resolved knowledge-length grid.

    All decoding and distractor-sampling seeds are fixed across lengths, so
    the only thing that varies along a curve is the amount of knowledge.
    """
    metric_list = list(metrics)
    unknown = [m for m in metric_list if m not in METRIC_NAMES]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; expected among {METRIC_NAMES}")
    if not metric_list:
        raise ConfigError("at least one metric is required")
    resolved = resolve_lengths(lengths, pairs)
    values: dict[str, list[tuple[int, float]]] = {m: [] for m in metric_list}
    for L in resolved:
        eff = None if L == resolved[-1] else L
        if "ppl" in metric_list:
            values["ppl"].append((L, perplexity(params, pairs, eff)))
        if "hits1" in metric_list:
            values["hits1"].append(
                (L, hits_at_1(params, pairs, eff, n_candidates, seed=seed))
            )
        if "f1" in metric_list:
            values["f1"].append(
                (L, generation_f1(params, pairs, eff, max_gen_len=max_gen_len))
            )
    return [
        GapCurve(metric=m, method=method, dataset=dataset, points=tuple(values[m]))
        for m in metric_list
    ]


def knowledge_lm_ppl(
    params: Parameters,
    pairs: Sequence[Pair],
    *,
    conditioned_on_history: bool = True,
) -> float:
    """Perplexity of the paired knowledge, with or without the history.

    Conditioned, the knowledge slot is scored after feeding the dialogue
    history; unconditioned, the parameters are treated as a knowledge LM and
    score the knowledge alone.  Counts knowledge tokens only.
    """
    if not pairs:
        raise DataError("cannot evaluate knowledge perplexity on an empty dataset")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(pairs), _EVAL_CHUNK):
        chunk = pairs[start:start + _EVAL_CHUNK]
        examples = []
        for p in chunk:
            if not p.knowledge:
                raise DataError(
                    f"dialogue {p.dialogue_index} has no paired knowledge"
                )
            z = concat_knowledge(p.knowledge)
            if conditioned_on_history:
                examples.append(encode_example(p.history, z, None))
            else:
                tokens = np.array([BOS, *z], dtype=np.int64)
                tags = np.full(len(tokens), int(StateTag.KNOWLEDGE), dtype=np.int64)
                from .seqmodel.encoding import EncodedExample

                examples.append(EncodedExample(
                    tokens=tokens, tags=tags, knowledge_marker=0,
                    response_marker=None, n_knowledge=len(z), n_response=0,
                ))
        ids, tags_arr, _ = batchify(examples)
        logits, _ = forward(params, ids, tags_arr)
        logprobs = log_softmax(logits)
        for b, ex in enumerate(examples):
            rows = ex.knowledge_rows()
            targets = ex.tokens[rows + 1]
            total_nll += float(-logprobs[b, rows, targets].sum())
            total_tokens += len(rows)
    return math.exp(total_nll / total_tokens)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    """Per-method gap curves plus derived variances and endpoints."""

    dataset: str
    curves: tuple[GapCurve, ...]
    knowledge_ppl: dict[str, float] | None = None

    def methods(self) -> list[str]:
        return sorted({c.method for c in self.curves})

    def metric_names(self) -> list[str]:
        return sorted({c.metric for c in self.curves})

    def summary(self, timestamp: str) -> dict:
        methods: dict[str, dict] = {}
        for curve in self.curves:
            entry = methods.setdefault(curve.method, {})
            entry[curve.metric] = {
                "curve": [[int(l), v] for l, v in curve.points],
                "variance": gap_variance(curve) if len(curve.points) > 1 else 0.0,
                "endpoints": {
                    "zero": curve.points[0][1],
                    "full": curve.points[-1][1],
                },
            }
        out = {
            "dataset": self.dataset,
            "generated_at": timestamp,
            "methods": methods,
        }
        if self.knowledge_ppl is not None:
            out["knowledge_ppl"] = dict(sorted(self.knowledge_ppl.items()))
        return out


FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_report(
    report: EvalReport, out_dir: str | Path, *, timestamp: str = FIXED_TIMESTAMP
) -> list[Path]:
    """Write curves.csv, summary.json and one SVG per metric; all-or-nothing.

    Every file's bytes are fully rendered before anything touches the disk,
    so a validation failure leaves no partial output.  With the default fixed
    timestamp the output is byte-identical across runs.
    """
    if not report.curves:
        raise ConfigError("cannot emit a report with no curves")
    out = Path(out_dir)

    rows = sorted(
        (c.method, c.dataset, c.metric, l, v)
        for c in report.curves
        for l, v in c.points
    )
    csv_text = "method,dataset,metric,length,value\n" + "".join(
        f"{m},{d},{metric},{l},{v!r}\n" for m, d, metric, l, v in rows
    )
    json_text = json.dumps(report.summary(timestamp), indent=2, sort_keys=True) + "\n"
    svgs = {
        metric: _svg_chart(report, metric)
        for metric in report.metric_names()
    }

    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, text in [("curves.csv", csv_text), ("summary.json", json_text)] + [
        (f"{metric}.svg", svg) for metric, svg in sorted(svgs.items())
    ]:
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


def read_curves_csv(path: str | Path) -> list[GapCurve]:
    """Parse curves.csv back into GapCurve objects (exact round-trip)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "method,dataset,metric,length,value":
        raise DataError(f"{path}: not a curves.csv file")
    grouped: dict[tuple[str, str, str], list[tuple[int, float]]] = {}
    for line in lines[1:]:
        method, dataset, metric, length, value = line.split(",")
        grouped.setdefault((method, dataset, metric), []).append(
            (int(length), float(value))
        )
    return [
        GapCurve(metric=metric, method=method, dataset=dataset,
                 points=tuple(sorted(pts)))
        for (method, dataset, metric), pts in sorted(grouped.items())
    ]


def _svg_chart(report: EvalReport, metric: str, width: int = 640, height: int = 400) -> str:
    curves = [c for c in report.curves if c.metric == metric]
    pad = 50
    xs = sorted({l for c in curves for l in c.lengths()})
    ys = [v for c in curves for v in c.values()]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_max = x_min + 1
    if y_max == y_min:
        y_max = y_min + 1.0

    def sx(x: float) -> float:
        return pad + (x - x_min) / (x_max - x_min) * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y_min) / (y_max - y_min) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12">knowledge length</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height // 2})">{metric}</text>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10" '
        f'text-anchor="middle">{x_min:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" '
        f'text-anchor="middle">{x_max:g}</text>',
        f'<text x="{pad - 6}" y="{height - pad}" font-size="10" '
        f'text-anchor="end">{y_min:.4g}</text>',
        f'<text x="{pad - 6}" y="{pad + 4}" font-size="10" '
        f'text-anchor="end">{y_max:.4g}</text>',
    ]
    for i, curve in enumerate(sorted(curves, key=lambda c: c.method)):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(l):.2f},{sy(v):.2f}" for l, v in curve.points)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{pts}"/>'
        )
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="11" '
            f'fill="{color}">{curve.method}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
