"""Deterministic synthetic click data with a controllable signal channel.

News belong to latent topics and users prefer one or two topics.  The
``mode`` decides which input channel carries the topic and how click labels
are assigned:

``word``   tokens drawn from topic word lists; label = candidate topic preferred.
``llm``    a per-topic direction is planted in the layer embeddings; label = topic preferred.
``kg``     source entities come from the topic's entity cluster; label = some candidate
           entity shares a graph edge with some history entity.
``mixed``  every channel carries the topic; label = topic preferred.

Channels that do not carry the signal are filled with seeded noise.
Evaluation impressions only show news from a held-out pool, so a model must
generalise through the channel content instead of memorising news ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedstore import LayerEmbeddings, synthetic_embeddings, write_store
from .kgstore import TripleGraph, build_graph, stable_seed
from .mindio import (
    ClickDataset,
    Impression,
    NewsRecord,
    build_vocab,
    tokenize,
    write_behaviors_tsv,
    write_entity_vec,
    write_news_tsv,
    write_triples_tsv,
)

MODES = ("word", "llm", "kg", "mixed")


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    mode: str = "mixed"
    news: int = 500
    users: int = 200
    topics: int = 8
    entities_per_topic: int = 30
    entity_dim: int = 100
    edges_per_entity: int = 3
    relations: int = 5
    llm_layers: int = 4
    llm_dim: int = 64
    plant_strength: float = 1.0
    topic_words: int = 20
    noise_words: int = 300
    history: int = 12
    train_impressions: int = 3
    eval_impressions: int = 1
    positives: int = 2
    negatives: int = 8
    noise: float = 0.0
    eval_news_fraction: float = 0.2
    vocab_min_freq: int = 2

    def validate(self) -> "SynthSpec":
        if self.mode not in MODES:
            raise SynthSpecError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.users < 0 or self.news < 0:
            raise SynthSpecError("sizes must be non-negative")
        if self.users > 0 and self.news < 2:
            raise SynthSpecError("need news to build impressions")
        if self.positives < 1 or self.negatives < 1:
            raise SynthSpecError("impressions need at least one positive and one negative candidate")
        if self.topics < 2:
            raise SynthSpecError("need at least two topics so negatives exist")
        if not 0.0 <= self.noise <= 1.0:
            raise SynthSpecError("noise must be within [0, 1]")
        if not 0.0 < self.eval_news_fraction < 1.0:
            raise SynthSpecError("eval_news_fraction must be in (0, 1)")
        if min(self.entities_per_topic, self.entity_dim, self.llm_layers, self.llm_dim, self.topic_words, self.noise_words) < 1:
            raise SynthSpecError("dimensions and pool sizes must be >= 1")
        return self


@dataclass
class SynthData:
    dataset: ClickDataset
    graph: TripleGraph
    store: LayerEmbeddings
    triples: list[tuple[str, str, str]]
    topic_of: dict[str, int]
    preferred: dict[str, tuple[int, ...]]


def _words(rng: np.random.Generator, pool: list[str], n: int) -> list[str]:
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def synth_dataset(spec: SynthSpec, seed: int) -> SynthData:
    spec.validate()
    rng = np.random.default_rng(stable_seed(seed, "synth", spec.mode))
    T, Ept, E = spec.topics, spec.entities_per_topic, spec.entity_dim

    # knowledge graph: one entity cluster per topic, edges inside clusters
    entities = [[f"Q{100000 + t * Ept + i}" for i in range(Ept)] for t in range(T)]
    centroids = rng.standard_normal((T, E))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    emb: dict[str, np.ndarray] = {}
    triples: list[tuple[str, str, str]] = []
    for t in range(T):
        for i, e in enumerate(entities[t]):
            emb[e] = centroids[t] + rng.standard_normal(E) * (0.5 / np.sqrt(E))
        for i, e in enumerate(entities[t]):
            k = min(spec.edges_per_entity, Ept - 1)
            if k <= 0:
                continue
            others = rng.choice(Ept - 1, size=k, replace=False)
            for j in others:
                j = int(j) + (1 if j >= i else 0)
                triples.append((e, f"P{int(rng.integers(spec.relations))}", entities[t][j]))
    all_entities = [e for group in entities for e in group]
    graph = build_graph(triples, emb)

    # vocabulary pools
    topic_pool = [[f"t{t}w{j}" for j in range(spec.topic_words)] for t in range(T)]
    noise_pool = [f"w{j}" for j in range(spec.noise_words)]

    # planted llm directions, orthonormal when D >= T
    raw = rng.standard_normal((spec.llm_dim, T))
    qmat, _ = np.linalg.qr(raw)
    directions = (qmat[:, :T] if qmat.shape[1] >= T else raw / np.linalg.norm(raw, axis=0)).T * spec.plant_strength

    text_signal = spec.mode in ("word", "mixed")
    kg_signal = spec.mode in ("kg", "mixed")
    llm_signal = spec.mode in ("llm", "mixed")

    news: dict[str, NewsRecord] = {}
    topic_of: dict[str, int] = {}
    store = LayerEmbeddings(layers=spec.llm_layers, dim=spec.llm_dim)
    ids = [f"N{i + 1}" for i in range(spec.news)]
    n_eval = int(round(spec.news * spec.eval_news_fraction)) if spec.news else 0
    eval_pool, train_pool = ids[len(ids) - n_eval :], ids[: len(ids) - n_eval]
    for nid in ids:
        t = int(rng.integers(T))
        topic_of[nid] = t
        if text_signal:
            title = [topic_pool[t][j] for j in rng.integers(0, spec.topic_words, size=int(rng.integers(4, 8)))]
            abstract = _words(rng, topic_pool[t] + noise_pool[:40], int(rng.integers(6, 12)))
        else:
            title = _words(rng, noise_pool, int(rng.integers(4, 8)))
            abstract = _words(rng, noise_pool, int(rng.integers(6, 12)))
        n_ent = int(rng.integers(1, 4))
        if kg_signal:
            chosen = rng.choice(Ept, size=n_ent, replace=False)
            ents = [entities[t][int(j)] for j in chosen]
        else:
            chosen = rng.choice(len(all_entities), size=n_ent, replace=False)
            ents = [all_entities[int(j)] for j in chosen]
        sub = f"sub{t}" if text_signal else f"sub{int(rng.integers(T))}"
        title_text = " ".join(title).capitalize()
        abstract_text = " ".join(abstract).capitalize() + "."
        news[nid] = NewsRecord(
            news_id=nid,
            category="news",
            subcategory=sub,
            title_tokens=tuple(tokenize(title_text)),
            abstract_tokens=tuple(tokenize(abstract_text)),
            entity_ids=tuple(dict.fromkeys(ents)),
            title=title_text,
            abstract=abstract_text,
        )
        planted = directions[t] if llm_signal else None
        store[nid] = synthetic_embeddings(nid, spec.llm_layers, spec.llm_dim, seed, planted)

    neighbors = {e: set(graph.neighbors(e)) for e in all_entities}

    def adjacent(cand: str, hist_entities: set[str]) -> bool:
        return any(neighbors.get(e, set()) & hist_entities for e in news[cand].entity_ids)

    by_topic: dict[int, list[str]] = {t: [] for t in range(T)}
    for nid in train_pool:
        by_topic[topic_of[nid]].append(nid)

    preferred: dict[str, tuple[int, ...]] = {}
    train_imps: list[Impression] = []
    eval_imps: list[Impression] = []
    counter = 0
    for u in range(spec.users):
        uid = f"U{u + 1}"
        n_pref = int(rng.integers(1, 3))
        pref = tuple(sorted(int(x) for x in rng.choice(T, size=n_pref, replace=False)))
        preferred[uid] = pref
        liked = [n for t in pref for n in by_topic[t]]
        if not liked:
            continue
        hist = [liked[int(i)] for i in rng.choice(len(liked), size=min(spec.history, len(liked)), replace=False)]
        hist_entities = {e for n in hist for e in news[n].entity_ids}
        hist_set = set(hist)

        def is_positive(cand: str) -> bool:
            if spec.mode == "kg":
                return adjacent(cand, hist_entities)
            return topic_of[cand] in pref

        for split, pool, count in (("train", train_pool, spec.train_impressions), ("eval", eval_pool, spec.eval_impressions)):
            avail = [n for n in pool if n not in hist_set]
            pos_pool = [n for n in avail if is_positive(n)]
            neg_pool = [n for n in avail if not is_positive(n)]
            for _ in range(count):
                if not pos_pool or not neg_pool:
                    break
                pos = [pos_pool[int(i)] for i in rng.choice(len(pos_pool), size=min(spec.positives, len(pos_pool)), replace=False)]
                neg = [neg_pool[int(i)] for i in rng.choice(len(neg_pool), size=min(spec.negatives, len(neg_pool)), replace=False)]
                cands = [(n, 1) for n in pos] + [(n, 0) for n in neg]
                if spec.noise > 0:
                    flips = rng.random(len(cands)) < spec.noise
                    cands = [(n, 1 - lab if f else lab) for (n, lab), f in zip(cands, flips)]
                perm = rng.permutation(len(cands))
                counter += 1
                imp = Impression(str(counter), uid, tuple(hist), tuple(cands[int(i)] for i in perm))
                (train_imps if split == "train" else eval_imps).append(imp)

    vocab = build_vocab(news, train_imps, spec.vocab_min_freq)
    dataset = ClickDataset(news, train_imps, eval_imps, vocab)
    return SynthData(dataset, graph, store, triples, topic_of, preferred)


def write_synth(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    """Write the synthetic corpus as MIND-format files plus an LKEM store."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "data.news": out / "news.tsv",
        "data.train_behaviors": out / "behaviors_train.tsv",
        "data.eval_behaviors": out / "behaviors_eval.tsv",
        "data.entity_vec": out / "entity_embedding.vec",
        "data.triples": out / "triples.tsv",
        "data.llm_embeddings": out / "llm.lkem",
    }
    write_news_tsv(data.dataset.news, paths["data.news"])
    write_behaviors_tsv(data.dataset.train_impressions, paths["data.train_behaviors"])
    write_behaviors_tsv(data.dataset.eval_impressions, paths["data.eval_behaviors"])
    write_entity_vec(data.graph.embeddings, paths["data.entity_vec"])
    write_triples_tsv(data.triples, paths["data.triples"])
    write_store(data.store, paths["data.llm_embeddings"])
    return paths
