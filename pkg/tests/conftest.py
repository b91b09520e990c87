import numpy as np
import pytest

from lkrec.config import TrainConfig
from lkrec.embedstore import LayerEmbeddings
from lkrec.encoders import prepare_features
from lkrec.kgstore import build_graph
from lkrec.mindio import ClickDataset, Impression, NewsRecord, build_vocab
from lkrec.trainer import build_model

TOY_DIMS = dict(d_word=4, d_gen=6, kg_out=5, kg_num_heads=2, kg_hops=2, llm_proj=7, entity_dim=3, neg_k=2, seed=0)

TOY_TRIPLES = [("Qa", "r", "Qb"), ("Qb", "r", "Qc"), ("Qc", "r", "Qd"), ("Qd", "r", "Qe"), ("Qa", "r", "Qf"), ("Qf", "r", "Qg"), ("Qe", "r", "Qg")]


def toy_world(seed=0, **overrides):
    """Six news, one user, a 7-entity graph and 4x8 layer states."""
    rng = np.random.default_rng(seed)
    words = ["storm", "coast", "vote", "senate", "goal", "match"]
    ents = {
        "N1": ("Qa",),
        "N2": ("Qb", "Qc"),
        "N3": ("Qd",),
        "N4": (),
        "N5": ("Qa", "Qg"),
        "N6": ("Qf",),
    }
    news = {}
    for i, nid in enumerate(sorted(ents)):
        toks = tuple(words[j] for j in rng.integers(0, len(words), size=3 + i % 3))
        news[nid] = NewsRecord(nid, "c", "s", toks[:2], toks[2:], ents[nid])
    imps = [Impression("1", "U1", ("N1", "N2"), (("N3", 1), ("N4", 0), ("N5", 0), ("N6", 0)))]
    emb = {e: rng.standard_normal(3) for e in "Qa Qb Qc Qd Qe Qf Qg".split()}
    graph = build_graph(TOY_TRIPLES, emb)
    store = LayerEmbeddings({nid: rng.standard_normal((4, 8)) for nid in news})
    ds = ClickDataset(news, imps, list(imps), build_vocab(news, imps, min_freq=1))
    cfg = TrainConfig(**{**TOY_DIMS, **overrides}).validate()
    feats = prepare_features(ds, graph, store, cfg)
    model = build_model(cfg, len(ds.vocab), 8)
    # spread initial weights so tanh and softmax are away from trivial regimes
    prng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        p.data[...] = prng.uniform(-0.8, 0.8, size=p.shape)
    return ds, graph, store, cfg, feats, model


@pytest.fixture
def toy():
    return toy_world()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    outcome_of = {}
    for key in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            if nodeid in outcome_of and getattr(rep, "when", "") != "call" and key != "error":
                continue
            line = rep.location[1] if getattr(rep, "location", None) else 0
            outcome_of[nodeid] = (line or 0, key, dict(getattr(rep, "user_properties", [])))
    if not outcome_of:
        return
    labels = {"passed": "PASS", "failed": "FAIL", "error": "FAIL", "skipped": "SKIP"}
    terminalreporter.section("acceptance criteria")
    for nodeid, (_, key, props) in sorted(outcome_of.items(), key=lambda kv: kv[1][0]):
        criterion = props.pop("criterion", nodeid.split("::")[-1])
        measured = ", ".join(f"{k}={v}" for k, v in props.items())
        terminalreporter.write_line(f"{labels[key]}  {criterion}" + (f"  [{measured}]" if measured else ""))
