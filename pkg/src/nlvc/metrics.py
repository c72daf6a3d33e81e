"""Top-k extraction, GAP@k and Hit@1."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


def top_k(probs, k: int = 20) -> list[tuple[int, float]]:
    """The k most confident (class, confidence) pairs, descending; ties by class id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = np.asarray(probs, dtype=np.float64).ravel()
    order = np.lexsort((np.arange(p.size), -p))[:k]
    return [(int(c), float(p[c])) for c in order]


def _as_records(predictions, k: int):
    """Normalize predictions (probability vectors or (class, conf) lists) to top-k lists."""
    out = []
    for pred in predictions:
        if isinstance(pred, np.ndarray) or (len(pred) and np.isscalar(pred[0])):
            out.append(top_k(pred, k))
        else:
            pairs = sorted(((int(c), float(s)) for c, s in pred), key=lambda t: (-t[1], t[0]))
            out.append(pairs[:k])
    return out


def gap_at_k(predictions, labels, k: int = 20) -> float:
    """Global average precision over the pooled per-video top-k predictions.

    Records are ranked by confidence (ties: video index, then class id);
    GAP = sum over hits at rank i of precision@i, divided by the total number of
    ground-truth (video, label) pairs.
    """
    records = _as_records(predictions, k)
    if len(records) != len(labels):
        raise ValueError(f"{len(records)} prediction rows for {len(labels)} label sets")
    positives = sum(len(set(ls)) for ls in labels)
    if positives == 0:
        raise ValueError("GAP is undefined with zero ground-truth labels")
    pooled = [(-conf, v, c, c in set(labels[v])) for v, recs in enumerate(records) for c, conf in recs]
    pooled.sort(key=lambda t: t[:3])
    hits = np.array([t[3] for t in pooled], dtype=np.float64)
    if hits.size == 0:
        return 0.0
    ranks = np.arange(1, hits.size + 1)
    precision = np.cumsum(hits) / ranks
    return float((precision * hits).sum() / positives)


def hit_at_one(predictions, labels) -> float:
    """Fraction of videos whose top class is one of their labels."""
    if len(labels) == 0:
        raise ValueError("hit@1 needs at least one video")
    records = _as_records(predictions, 1)
    return float(np.mean([bool(recs) and recs[0][0] in set(ls) for recs, ls in zip(records, labels)]))


@dataclass
class EvalResult:
    gap: float
    hit_at_one: float
    videos: int
    predictions: int
    positives: int
    k: int = 20

    def report_lines(self) -> list[str]:
        return [f"GAP={self.gap:.6f}", f"HIT@1={self.hit_at_one:.6f}", f"videos={self.videos}",
                f"predictions={self.predictions}", f"positives={self.positives}", f"k={self.k}"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate(predictions, labels, k: int = 20) -> EvalResult:
    records = _as_records(predictions, k)
    return EvalResult(
        gap=gap_at_k(records, labels, k),
        hit_at_one=hit_at_one(records, labels),
        videos=len(records),
        predictions=sum(len(r) for r in records),
        positives=sum(len(set(ls)) for ls in labels),
        k=k,
    )
