"""Caption and classification metrics, keyword alignment and the paired bootstrap.

Conventions that are choices rather than standards are listed in
``CONVENTIONS`` and copied into every report.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from .datamodel import ClinicalMetadata, tokenize

CONVENTIONS = {
    "bleu4": "sentence-level BLEU, orders 1-4 with uniform weights and brevity penalty; an order with zero "
             "clipped matches uses (0 + 1) / (candidates + 1); reported value is the mean over items",
    "alignment_score": "fraction of keyword phrases (versioned keyword table) found contiguously in the caption; "
                       "an empty keyword set scores 1",
    "heatmap_caption_alignment": "artifact convention, not a published metric: IoU of heatmap >= 0.5 with the "
                                 "lesion mask when the caption mentions a lesion keyword, otherwise 1 - fraction "
                                 "of heatmap mass inside the mask; 0/0 counts as 1",
    "paired_bootstrap": "mid-p: p = (#{delta* < 0} + 0.5 * #{delta* = 0}) / iterations, delta* = metric(a) - "
                        "metric(b) on each resample",
}


# -- n-gram metrics ------------------------------------------------------------------------

def _as_tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypothesis, reference) -> float:
    """Smoothed sentence BLEU-4; strings are tokenized, sequences used as given."""
    hyp, ref = _as_tokens(hypothesis), _as_tokens(reference)
    if not ref:
        raise ValueError("bleu4: empty reference")
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        cand = _ngrams(hyp, n)
        total = max(len(hyp) - n + 1, 0)
        matches = sum((cand & _ngrams(ref, n)).values())
        p = matches / total if matches else 1.0 / (total + 1)
        log_p += 0.25 * math.log(p)
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return min(1.0, bp * math.exp(log_p))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference) -> float:
    """LCS F-measure with beta = 1."""
    hyp, ref = _as_tokens(hypothesis), _as_tokens(reference)
    if not hyp or not ref:
        raise ValueError("rouge_l: empty input")
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def token_precision(hypothesis, reference) -> float:
    hyp, ref = _as_tokens(hypothesis), _as_tokens(reference)
    if not hyp:
        return 0.0
    return sum((Counter(hyp) & Counter(ref)).values()) / len(hyp)


def mes_accuracy(predictions, labels) -> float:
    pred, lab = np.asarray(predictions), np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"mes_accuracy: {pred.shape} predictions vs {lab.shape} labels")
    if pred.size == 0:
        raise ValueError("mes_accuracy: no items")
    return float((pred == lab).mean())


# -- keywords --------------------------------------------------------------------------------

@lru_cache(maxsize=None)
def keyword_table() -> dict:
    return json.loads(resources.files("lesioncap").joinpath("data/keywords.json").read_text())


_FIELDS = ("mes", "vascular_pattern", "bleeding", "erythema", "friability", "ulceration")
LESION_FIELDS = ("bleeding", "erythema", "ulceration")


def _field_key(value) -> str:
    return ("true" if value else "false") if isinstance(value, bool) else str(value)


def extract_keywords(meta: ClinicalMetadata) -> set[str]:
    table = keyword_table()
    out: set[str] = set()
    for f in _FIELDS:
        out.update(table[f].get(_field_key(getattr(meta, f)), []))
    return out


def _contains(tokens: list[str], phrase: str) -> bool:
    p = tokenize(phrase)
    return any(tokens[i:i + len(p)] == p for i in range(len(tokens) - len(p) + 1))


def alignment_score(caption: str, meta: ClinicalMetadata) -> float:
    keywords = extract_keywords(meta)
    if not keywords:
        return 1.0
    toks = tokenize(caption)
    return sum(_contains(toks, k) for k in keywords) / len(keywords)


@lru_cache(maxsize=None)
def lesion_phrases() -> tuple[str, ...]:
    table = keyword_table()
    return tuple(sorted({p for f in LESION_FIELDS for phrases in table[f].values() for p in phrases}))


def mentions_lesion(caption: str) -> bool:
    toks = tokenize(caption)
    return any(_contains(toks, p) for p in lesion_phrases())


def heatmap_caption_alignment(heatmap: np.ndarray, mask: np.ndarray | None, caption: str) -> float | None:
    """Per-sample score; ``None`` when there is no mask (the caller counts skips)."""
    if mask is None:
        return None
    heat = np.asarray(heatmap, dtype=np.float64)
    m = np.asarray(mask) > 0.5
    if heat.shape != m.shape:
        raise ValueError(f"heatmap {heat.shape} and mask {m.shape} differ in shape")
    if mentions_lesion(caption):
        pred = heat >= 0.5
        union = (pred | m).sum()
        return 1.0 if union == 0 else float((pred & m).sum() / union)
    mass = heat.sum()
    return 1.0 if mass == 0 else float(1.0 - heat[m].sum() / mass)


# -- reports -----------------------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    mes_accuracy: float
    alignment_score: float
    heatmap_caption_alignment: float
    token_precision: float
    n: int
    heatmap_skipped: int = 0
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("MetricReport needs n > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def score_items(ids, mes_true, mes_pred, captions, references, metadata, heatmaps=None, masks=None) -> list[dict]:
    rows = []
    for i, rid in enumerate(ids):
        hca = None
        if heatmaps is not None and masks:
            hca = heatmap_caption_alignment(heatmaps[i], masks[i], captions[i])
        rows.append({
            "id": rid, "mes_true": int(mes_true[i]), "mes_pred": int(mes_pred[i]),
            "caption": captions[i], "reference": references[i],
            "bleu4": bleu4(captions[i], references[i]),
            "rouge_l": rouge_l_or_zero(captions[i], references[i]),
            "alignment_score": alignment_score(captions[i], metadata[i]),
            "token_precision": token_precision(captions[i], references[i]),
            "heatmap_caption_alignment": hca,
        })
    return rows


def report_from_items(rows: Sequence[dict]) -> MetricReport:
    if not rows:
        raise ValueError("no items to report")
    hca = [r["heatmap_caption_alignment"] for r in rows if r["heatmap_caption_alignment"] is not None]

    def mean(key):
        return float(np.mean([r[key] for r in rows]))
    return MetricReport(
        bleu4=mean("bleu4"), rouge_l=mean("rouge_l"),
        mes_accuracy=mes_accuracy([r["mes_pred"] for r in rows], [r["mes_true"] for r in rows]),
        alignment_score=mean("alignment_score"),
        heatmap_caption_alignment=float(np.mean(hca)) if hca else float("nan"),
        token_precision=mean("token_precision"), n=len(rows), heatmap_skipped=len(rows) - len(hca))


def evaluate(pipeline, data, strategy: str = "greedy") -> tuple[MetricReport, list[dict]]:
    """Run a trained pipeline over an ImageSet and score every item."""
    out = pipeline.predict(data, strategy=strategy)
    caps = [c["caption"] for c in out["captions"]]
    rows = score_items(data.ids, data.labels, out["mes"], caps, data.captions, data.metadata,
                       out["heatmaps"], data.masks)
    for row, c in zip(rows, out["captions"]):
        row["truncated"] = c["truncated"]
    return report_from_items(rows), rows


# -- bootstrap -----------------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    metric: str
    observed_delta: float
    p_value: float
    iterations: int = 1000
    seed: int = 0
    definition: str = CONVENTIONS["paired_bootstrap"]

    def to_dict(self) -> dict:
        return asdict(self)


def paired_bootstrap(metric_fn: Callable, system_a: Sequence, system_b: Sequence, references: Sequence,
                     iterations: int = 1000, seed: int = 0, per_item: bool = False,
                     name: str | None = None) -> BootstrapResult:
    """Paired bootstrap over items.

    ``metric_fn(outputs, references)`` scores a whole (resampled) system;
    with ``per_item=True`` it scores one item and the system score is the mean.
    Resample ``i`` draws indices from ``default_rng([seed, i])``.
    """
    n = len(references)
    if len(system_a) != n or len(system_b) != n:
        raise ValueError(f"length mismatch: a={len(system_a)} b={len(system_b)} refs={n}")
    if n == 0 or iterations < 1:
        raise ValueError("need at least one item and one iteration")
    if per_item:
        sa = np.array([metric_fn(x, r) for x, r in zip(system_a, references)], dtype=np.float64)
        sb = np.array([metric_fn(x, r) for x, r in zip(system_b, references)], dtype=np.float64)
        observed = float(sa.mean() - sb.mean())
        stat = lambda idx: float(sa[idx].mean() - sb[idx].mean())  # noqa: E731
    else:
        observed = float(metric_fn(list(system_a), list(references)) - metric_fn(list(system_b), list(references)))

        def stat(idx):
            refs = [references[i] for i in idx]
            return float(metric_fn([system_a[i] for i in idx], refs) - metric_fn([system_b[i] for i in idx], refs))
    below = ties = 0
    for it in range(iterations):
        idx = np.random.default_rng([seed, it]).integers(0, n, size=n)
        d = stat(idx)
        if d < 0:
            below += 1
        elif d == 0:
            ties += 1
    p = (below + 0.5 * ties) / iterations
    return BootstrapResult(name or getattr(metric_fn, "__name__", "metric"), observed, p, iterations, seed)


def rouge_l_or_zero(hypothesis, reference) -> float:
    """rouge_l, scoring an empty generated caption as 0 instead of raising."""
    return rouge_l(hypothesis, reference) if _as_tokens(hypothesis) else 0.0


def _corpus(fn):
    def metric(outputs, refs):
        return float(np.mean([fn(o, r) for o, r in zip(outputs, refs)]))
    metric.__name__ = fn.__name__
    return metric


# name -> (system-level metric, kind of item it reads)
BOOTSTRAP_METRICS = {
    "mes_accuracy": (mes_accuracy, "mes"),
    "bleu4": (_corpus(bleu4), "caption"),
    "rouge_l": (_corpus(rouge_l_or_zero), "caption"),
    "token_precision": (_corpus(token_precision), "caption"),
}
