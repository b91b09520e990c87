"""Ranking metrics per impression and their aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoders import NewsFeatures, encode_news_rows, encode_users
from .mindio import Impression


class EvaluationError(ValueError):
    pass


def _order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties by original index
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def auc(labels, scores) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("AUC needs at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def mrr(labels, scores) -> float:
    y = np.asarray(labels)[_order(scores)]
    if not y.any():
        raise EvaluationError("MRR needs at least one positive")
    ranks = np.flatnonzero(y == 1) + 1.0
    return float(np.mean(1.0 / ranks))


def ndcg(labels, scores, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(labels, dtype=np.float64)
    if not y.any():
        raise EvaluationError("nDCG needs at least one positive")
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    got = y[_order(scores)][:k]
    ideal = np.sort(y)[::-1][:k]
    return float((got * disc[: got.size]).sum() / (ideal * disc[: ideal.size]).sum())


@dataclass
class MetricReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    count: int
    skipped: int = 0
    label: str = ""

    def as_dict(self) -> dict[str, float]:
        return {"auc": self.auc, "mrr": self.mrr, "ndcg5": self.ndcg5, "ndcg10": self.ndcg10}

    def to_tsv(self) -> str:
        head = "variant\tauc\tmrr\tndcg@5\tndcg@10\timpressions\tskipped"
        row = f"{self.label or '-'}\t{self.auc:.6f}\t{self.mrr:.6f}\t{self.ndcg5:.6f}\t{self.ndcg10:.6f}\t{self.count}\t{self.skipped}"
        return head + "\n" + row + "\n"

    def to_kv(self) -> str:
        items = [("variant", self.label or "-")]
        items += [(k, repr(v)) for k, v in self.as_dict().items()]
        items += [("impressions", str(self.count)), ("skipped", str(self.skipped))]
        return "".join(f"{k}={v}\n" for k, v in items)


def aggregate(label_lists, score_lists, label: str = "") -> MetricReport:
    """Per-impression metrics averaged over impressions that have both classes."""
    rows = []
    skipped = 0
    for y, s in zip(label_lists, score_lists):
        y = np.asarray(y)
        if y.size == 0 or y.all() or not y.any():
            skipped += 1
            continue
        rows.append((auc(y, s), mrr(y, s), ndcg(y, s, 5), ndcg(y, s, 10)))
    if not rows:
        raise EvaluationError(f"no scorable impressions ({skipped} skipped)")
    m = np.mean(np.array(rows), axis=0)
    return MetricReport(float(m[0]), float(m[1]), float(m[2]), float(m[3]), len(rows), skipped, label)


def encode_all_news(model, feats: NewsFeatures, chunk: int = 512) -> np.ndarray:
    n = len(feats.ids)
    out = []
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        out.append(encode_news_rows(model.params, model.config, feats, rows).data)
    if not out:
        return np.zeros((0, model.config.news_dim))
    return np.concatenate(out, axis=0)


def user_vectors(model, news_vecs: np.ndarray, feats: NewsFeatures, histories, chunk: int = 256) -> np.ndarray:
    hmax = model.config.history_max
    rows_list = [[feats.row[n] for n in h if n in feats.row][-hmax:] for h in histories]
    out = []
    table = nk.Tensor(news_vecs)
    for start in range(0, len(rows_list), chunk):
        part = rows_list[start : start + chunk]
        z = max([len(r) for r in part] + [0])
        idx = np.zeros((len(part), z), dtype=np.int64)
        mask = np.zeros((len(part), z), dtype=bool)
        for i, r in enumerate(part):
            idx[i, : len(r)] = r
            mask[i, : len(r)] = True
        out.append(encode_users(model.params, table, idx, mask).data)
    if not out:
        return np.zeros((0, news_vecs.shape[1]))
    return np.concatenate(out, axis=0)


def predict(model, feats: NewsFeatures, impressions: list[Impression], news_vecs: np.ndarray | None = None):
    """Scores per impression: ``(labels, scores)`` lists with unknown candidates dropped."""
    if news_vecs is None:
        news_vecs = encode_all_news(model, feats)
    users = user_vectors(model, news_vecs, feats, [imp.history for imp in impressions])
    labels, scores = [], []
    for imp, u in zip(impressions, users):
        known = [(feats.row[n], lab) for n, lab in imp.candidates if n in feats.row]
        rows = np.array([r for r, _ in known], dtype=np.int64)
        labels.append(np.array([lab for _, lab in known], dtype=np.int64))
        scores.append(news_vecs[rows] @ u if rows.size else np.zeros(0))
    return labels, scores


def evaluate(model, feats: NewsFeatures, impressions: list[Impression], label: str = "") -> MetricReport:
    labels, scores = predict(model, feats, impressions)
    return aggregate(labels, scores, label)
