"""News and user encoders.

A news vector is the concatenation ``[general; kg; llm]``:

* general: additive attention over word embeddings of title + abstract,
* llm: learned mix of pooled LLM layer states followed by ``tanh(f_l(.))``,
* kg: a query derived from the llm (or general) vector attends, per hop and
  per head, over the hop's neighbour entities; the attended vectors of all
  hops and heads are projected by ``Q``.

A user vector is additive attention over the news vectors of the history.
Disabled branches are left out of the concatenation entirely.

The ``encode_*`` functions for a single item mirror the equations one to one
and are what the tests check; training and evaluation go through the batched
``encode_news_rows`` / ``encode_users`` which compute the same thing over
padded arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .config import ConfigError, TrainConfig
from .embedstore import LayerEmbeddings
from .kgstore import TripleGraph, hop_sets, stable_seed
from .mindio import ClickDataset, NewsRecord
from .numkit import ParamRegistry, Tensor


class ValidationError(ValueError):
    """Inputs are inconsistent with the model configuration."""


# ---------------------------------------------------------------- static inputs


@dataclass
class NewsFeatures:
    """Fixed per-news model inputs, row-indexed."""

    ids: list[str]
    row: dict[str, int]
    tokens: np.ndarray  # (N, T) int, 0 = pad
    lengths: np.ndarray  # (N,)
    llm: np.ndarray | None  # (N, L, D)
    hop_idx: np.ndarray | None  # (N, S, M) index into entity_table, -1 = empty slot
    entity_ids: list[str] = field(default_factory=list)
    entity_table: np.ndarray | None = None  # (Ne, E)

    def rows(self, news_ids) -> np.ndarray:
        return np.array([self.row[n] for n in news_ids], dtype=np.int64)


def news_hops(graph: TripleGraph, record: NewsRecord, cfg: TrainConfig) -> list[tuple[str, ...]]:
    hs = hop_sets(graph, record.entity_ids, cfg.kg_hops, cfg.kg_max_neighbors, stable_seed(cfg.seed, record.news_id))
    hops = list(hs.hops)
    if cfg.kg_include_source_hop:
        src = [e for e in dict.fromkeys(record.entity_ids) if e in graph.embeddings]
        if len(src) > cfg.kg_max_neighbors:
            rng = np.random.default_rng(stable_seed(cfg.seed, record.news_id, "source"))
            keep = np.sort(rng.choice(len(src), size=cfg.kg_max_neighbors, replace=False))
            src = [src[i] for i in keep]
        hops.insert(0, tuple(src))
    return hops


def prepare_features(
    dataset: ClickDataset, graph: TripleGraph | None, store: LayerEmbeddings | None, cfg: TrainConfig
) -> NewsFeatures:
    ids = sorted(dataset.news)
    row = {n: i for i, n in enumerate(ids)}
    tok_lists = [dataset.token_ids(dataset.news[n]) for n in ids]
    width = max([len(t) for t in tok_lists] + [1])
    tokens = np.zeros((len(ids), width), dtype=np.int64)
    lengths = np.zeros(len(ids), dtype=np.int64)
    for i, t in enumerate(tok_lists):
        tokens[i, : len(t)] = t
        lengths[i] = len(t)

    llm = None
    if cfg.use_llm:
        if store is None:
            raise ValidationError("use_llm=true but no LLM embedding store was given")
        missing = store.missing(ids)
        if missing:
            head = ", ".join(missing[:10])
            raise ValidationError(f"{len(missing)} news ids missing from the LLM embedding store: {head}")
        if store.layers != cfg.llm_layers:
            raise ValidationError(f"LLM store has {store.layers} layers, config expects {cfg.llm_layers}")
        llm = np.stack([store[n] for n in ids]) if ids else np.zeros((0, store.layers, store.dim))

    hop_idx = None
    entity_ids: list[str] = []
    table = None
    if cfg.use_kg:
        if graph is None:
            raise ValidationError("use_kg=true but no knowledge graph was given")
        dim = graph.entity_dim
        if dim is not None and dim != cfg.entity_dim:
            raise ValidationError(f"entity vectors have dim {dim}, config expects {cfg.entity_dim}")
        ent_row: dict[str, int] = {}
        per_news = []
        for n in ids:
            hops = news_hops(graph, dataset.news[n], cfg)
            per_news.append([[ent_row.setdefault(e, len(ent_row)) for e in hop] for hop in hops])
        entity_ids = list(ent_row)
        table = np.zeros((len(entity_ids), cfg.entity_dim))
        for e, i in ent_row.items():
            table[i] = graph.embeddings[e]
        width_m = max([len(h) for hops in per_news for h in hops] + [1])
        hop_idx = np.full((len(ids), cfg.kg_hop_slots, width_m), -1, dtype=np.int64)
        for i, hops in enumerate(per_news):
            for k, h in enumerate(hops):
                hop_idx[i, k, : len(h)] = h
    return NewsFeatures(ids, row, tokens, lengths, llm, hop_idx, entity_ids, table)


# ---------------------------------------------------------------- single-item ops


def additive_attention(items: Tensor, proj: Tensor, query: Tensor) -> Tensor:
    """``sum_j softmax(w . tanh(A x_j))_j * (A x_j)`` over the rows of ``items``."""
    if items.shape[0] == 0:
        return Tensor(np.zeros(proj.shape[1]))
    p = nk.linear(items, proj)
    weights = nk.softmax(nk.matmul(nk.tanh(p), query))
    return nk.matmul(weights, p)


def encode_general(token_ids, params: ParamRegistry) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        return Tensor(np.zeros(params["gen.proj"].shape[1]))
    emb = nk.take(params["gen.word_emb"], ids)
    return additive_attention(emb, params["gen.proj"], params["gen.query"])


def encode_llm(layers, params: ParamRegistry) -> Tensor:
    layers = nk.as_tensor(layers)
    a = params["llm.layer_weights"]
    if layers.data.ndim != 2 or layers.shape[0] != a.shape[0]:
        raise nk.ShapeError(f"encode_llm: expected {a.shape[0]} layer rows, got shape {layers.shape}")
    mixed = nk.matmul(a, layers)
    return nk.tanh(nk.linear(mixed, params["llm.f_l.W"], params["llm.f_l.b"]))


def kg_query(source: Tensor, params: ParamRegistry) -> Tensor:
    return nk.tanh(nk.linear(source, params["kg.f_s.W"], params["kg.f_s.b"]))


def kg_attend(q: Tensor, X, W_kh) -> tuple[Tensor, Tensor]:
    """Attention of one query over one hop's entity rows with one head."""
    X = nk.as_tensor(X)
    m = X.shape[0]
    if m == 0:
        raise nk.DomainError("kg_attend needs at least one entity")
    qq = nk.add(Tensor(np.zeros(X.shape)), q)
    feats = nk.concat([qq, X, nk.mul(qq, X)], axis=1)
    w = nk.as_tensor(W_kh)
    scores = nk.reshape(nk.matmul(feats, w), (m,)) if w.data.ndim == 2 else nk.matmul(feats, w)
    alpha = nk.softmax(scores)
    return alpha, nk.matmul(alpha, X)


@dataclass
class HeadTrace:
    hop: int
    head: int
    entity_ids: tuple[str, ...]
    weights: np.ndarray


def encode_kg(q: Tensor, hops: list[np.ndarray], params: ParamRegistry, hop_ids=None, first_hop: int = 1):
    """Multi-hop, multi-head entity attention projected by ``Q``.

    Returns ``(r_kg, trace)``; an empty hop contributes zeros for every head.
    """
    W = params["kg.attn"]
    n_slots, n_heads, three_e = W.shape
    dim = three_e // 3
    parts = []
    trace = []
    for k in range(n_slots):
        X = np.asarray(hops[k], dtype=np.float64).reshape(-1, dim)
        for h in range(n_heads):
            if X.shape[0] == 0:
                parts.append(Tensor(np.zeros(dim)))
                continue
            alpha, xhat = kg_attend(q, X, nk.index(W, (k, h)))
            parts.append(xhat)
            ids = tuple(hop_ids[k]) if hop_ids is not None else tuple(str(i) for i in range(X.shape[0]))
            trace.append(HeadTrace(k + first_hop, h + 1, ids, alpha.data.copy()))
    return nk.matmul(nk.concat(parts), params["kg.Q"]), trace


@dataclass
class NewsRepr:
    r_gne: Tensor
    r_kg: Tensor | None
    r_llm: Tensor | None
    trace: list[HeadTrace]

    @property
    def r_n(self) -> Tensor:
        return nk.concat([t for t in (self.r_gne, self.r_kg, self.r_llm) if t is not None])


def encode_news(news_id: str, feats: NewsFeatures, params: ParamRegistry, cfg: TrainConfig) -> NewsRepr:
    i = feats.row[news_id]
    r_gne = encode_general(feats.tokens[i, : feats.lengths[i]], params)
    r_llm = encode_llm(feats.llm[i], params) if cfg.use_llm else None
    r_kg = None
    trace: list[HeadTrace] = []
    if cfg.use_kg:
        q = kg_query(r_llm if cfg.kg_query_source == "llm" else r_gne, params)
        hops, hop_ids = [], []
        for slot in feats.hop_idx[i]:
            idx = slot[slot >= 0]
            hops.append(feats.entity_table[idx])
            hop_ids.append([feats.entity_ids[j] for j in idx])
        first = 0 if cfg.kg_include_source_hop else 1
        r_kg, trace = encode_kg(q, hops, params, hop_ids, first_hop=first)
    return NewsRepr(r_gne, r_kg, r_llm, trace)


def encode_user(history: list[Tensor], params: ParamRegistry) -> Tensor:
    if not history:
        return Tensor(np.zeros(params["user.proj"].shape[1]))
    stacked = nk.concat([nk.reshape(h, (1, h.shape[0])) for h in history], axis=0)
    return additive_attention(stacked, params["user.proj"], params["user.query"])


def score(r_n, r_u) -> Tensor:
    """Unnormalised match score: inner product of news and user vectors."""
    r_n, r_u = nk.as_tensor(r_n), nk.as_tensor(r_u)
    if r_n.shape != r_u.shape:
        raise nk.ShapeError(f"score: news vector {r_n.shape} vs user vector {r_u.shape}")
    return nk.dot(r_n, r_u)


# ---------------------------------------------------------------- batched path


def _masked_additive(items: Tensor, mask: np.ndarray, proj: Tensor, query: Tensor) -> Tensor:
    """Batched additive attention over axis 1 of ``items`` (B, T, d)."""
    p = nk.matmul(items, proj)
    logits = nk.matmul(nk.tanh(p), query)
    weights = nk.softmax(logits, axis=-1, mask=mask)
    return nk.einsum("bt,btd->bd", weights, p)


def encode_news_rows(params: ParamRegistry, cfg: TrainConfig, feats: NewsFeatures, rows: np.ndarray, with_trace: bool = False):
    """News vectors for ``rows`` as one (B, news_dim) tensor.

    With ``with_trace`` also returns the attention weights as a
    (B, S, H, M) array and the matching hop index array.
    """
    rows = np.asarray(rows, dtype=np.int64)
    width = max(int(feats.lengths[rows].max()) if rows.size else 0, 1)
    tok = feats.tokens[rows, :width]
    tok_mask = np.arange(width)[None, :] < feats.lengths[rows][:, None]
    emb = nk.take(params["gen.word_emb"], tok)
    r_gne = _masked_additive(emb, tok_mask, params["gen.proj"], params["gen.query"])
    parts = [r_gne]
    r_llm = None
    alpha_np = None
    if cfg.use_llm:
        a = params["llm.layer_weights"]
        mixed = nk.einsum("l,bld->bd", a, Tensor(feats.llm[rows]))
        r_llm = nk.tanh(nk.linear(mixed, params["llm.f_l.W"], params["llm.f_l.b"]))
    if cfg.use_kg:
        q = nk.tanh(nk.linear(r_llm if cfg.kg_query_source == "llm" else r_gne, params["kg.f_s.W"], params["kg.f_s.b"]))
        idx = feats.hop_idx[rows]
        mask = idx >= 0
        X = feats.entity_table[np.where(mask, idx, 0)] if feats.entity_table.shape[0] else np.zeros(idx.shape + (cfg.entity_dim,))
        X = np.where(mask[..., None], X, 0.0)
        Xt = Tensor(X)
        W = params["kg.attn"]
        E = cfg.entity_dim
        Wq = nk.index(W, (slice(None), slice(None), slice(0, E)))
        Wx = nk.index(W, (slice(None), slice(None), slice(E, 2 * E)))
        Wqx = nk.index(W, (slice(None), slice(None), slice(2 * E, 3 * E)))
        s_q = nk.einsum("be,she->bsh", q, Wq)
        s_x = nk.einsum("bsme,she->bshm", Xt, Wx)
        qx = nk.mul(nk.reshape(q, (q.shape[0], 1, 1, E)), Xt)
        s_qx = nk.einsum("bsme,she->bshm", qx, Wqx)
        B, S = q.shape[0], W.shape[0]
        logits = nk.add(nk.add(s_x, s_qx), nk.reshape(s_q, (B, S, W.shape[1], 1)))
        alpha = nk.softmax(logits, axis=-1, mask=mask[:, :, None, :])
        xhat = nk.einsum("bshm,bsme->bshe", alpha, Xt)
        flat = nk.reshape(xhat, (B, S * W.shape[1] * E))
        parts.append(nk.matmul(flat, params["kg.Q"]))
        alpha_np = alpha.data
    if r_llm is not None:
        parts.append(r_llm)
    r_n = nk.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    if with_trace:
        return r_n, alpha_np, (feats.hop_idx[rows] if cfg.use_kg else None)
    return r_n


def encode_users(params: ParamRegistry, news_vecs: Tensor, hist_idx: np.ndarray, hist_mask: np.ndarray) -> Tensor:
    """User vectors from histories given as row indices into ``news_vecs``."""
    if hist_idx.shape[1] == 0:
        return Tensor(np.zeros((hist_idx.shape[0], params["user.proj"].shape[1])))
    items = nk.take(news_vecs, np.where(hist_mask, hist_idx, 0))
    return _masked_additive(items, hist_mask, params["user.proj"], params["user.query"])


def check_query_source(cfg: TrainConfig) -> None:
    if cfg.use_kg and cfg.kg_query_source == "llm" and not cfg.use_llm:
        raise ConfigError("kg.query_source=llm is impossible without the LLM branch")
