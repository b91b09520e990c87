"""Acceptance criteria, one test each.

Every test records a ``criterion`` and the ``measured`` values as user
properties; ``conftest.pytest_terminal_summary`` prints one PASS/FAIL line
per criterion at the end of the run.

The learnability and ablation runs use the default model sizes and learning
rate (``TrainConfig()``) on synthetic data with 64-dimensional layer states.
All six ablation trainings together take several minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import toy_world
from lkrec import cli
from lkrec import numkit as nk
from lkrec.config import TrainConfig
from lkrec.embedstore import dumps_store, loads_store, read_store, write_store
from lkrec.encoders import encode_news_rows, prepare_features
from lkrec.evalkit import aggregate, auc, mrr, ndcg
from lkrec.kgstore import hop_sets
from lkrec.mindio import TrainSample
from lkrec.numkit import Tensor
from lkrec.synth import SynthSpec, synth_dataset
from lkrec.trainer import batch_loss, dumps_checkpoint, load_checkpoint, save_checkpoint, softmax_nll, train
from test_evalkit import brute_auc, brute_mrr, brute_ndcg, random_impressions
from test_kgstore import random_graph, relaxation_distances, with_embeddings

pytestmark = pytest.mark.acceptance

SEED = 0
LLM_DIM = 64


def note(record_property, criterion, **measured):
    record_property("criterion", criterion)
    for k, v in measured.items():
        record_property(k, v)


def fit(mode, **overrides):
    data = synth_dataset(SynthSpec(mode=mode, news=500, users=200, llm_dim=LLM_DIM), seed=SEED)
    cfg = TrainConfig(seed=SEED, **overrides)
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        feats = prepare_features(data.dataset, data.graph, data.store, cfg)
        ck, history = train(data.dataset, feats, cfg, llm_dim=LLM_DIM)
        elapsed = time.perf_counter() - t0
    return data, feats, ck, history, elapsed


VARIANTS = {
    "full": {},
    "w/o KG": {"use_kg": False},
    "w/o LLM": {"use_llm": False, "kg_query_source": "general"},
}


@pytest.fixture(scope="module")
def mixed_run():
    return fit("mixed")


@pytest.fixture(scope="module")
def ablation_aucs():
    out = {}
    for mode in ("kg", "llm"):
        for name, kw in VARIANTS.items():
            out[mode, name] = fit(mode, **kw)[2].metrics["auc"]
    return out


# ---------------------------------------------------------------- criteria


def test_full_scale_results_substituted(record_property):
    note(record_property, "full-scale benchmark numbers: not reproducible at desk scale; substituted by the property criteria below")
    pytest.skip("needs the full news corpus and multi-billion-parameter language models")


def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    _, _, _, cfg, feats, model = toy_world(neg_k=2)
    assert (cfg.d_word, cfg.d_gen, cfg.kg_out, cfg.kg_num_heads, cfg.kg_hops, cfg.neg_k) == (4, 6, 5, 2, 2, 2)
    assert model.params["llm.f_l.W"].shape[0] == 8
    # N4 has no entities, so the empty-hop path is covered as well
    batch = [TrainSample(("N1", "N2"), "N3", ("N5", "N6")), TrainSample(("N2",), "N5", ("N4", "N1"))]
    model.params.zero_grad()
    with nk.Tape() as tape:
        loss = batch_loss(model, feats, batch)
    tape.backward(loss)
    worst = {}
    for name, p in model.params.items():

        def f(x, p=p):
            saved = p.data
            p.data = x
            try:
                return float(batch_loss(model, feats, batch).data)
            finally:
                p.data = saved

        worst[name] = nk.relative_error(p.grad, nk.finite_diff_grad(f, p.data.copy(), 1e-5))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    note(record_property, "gradient suite: every parameter rel err < 1e-4, < 30 s",
         params=len(worst), max_rel_err=f"{worst[top]:.2e} ({top})", seconds=f"{elapsed:.1f}")  # fmt: skip
    assert worst[top] < 1e-4
    assert elapsed < 30


def test_metric_oracle(record_property):
    worst = 0.0
    for y, s in random_impressions(1000, seed=11, max_len=30):
        worst = max(
            worst,
            abs(auc(y, s) - brute_auc(y, s)),
            abs(mrr(y, s) - brute_mrr(y, s)),
            abs(ndcg(y, s, 5) - brute_ndcg(y, s, 5)),
            abs(ndcg(y, s, 10) - brute_ndcg(y, s, 10)),
        )
    rng = np.random.default_rng(12)
    labels, scores = [], []
    while len(labels) < 10_000:
        m = int(rng.integers(2, 31))
        y = (rng.random(m) < 0.3).astype(int)
        if 0 < y.sum() < m:
            labels.append(y)
            scores.append(rng.random(m))
    null = aggregate(labels, scores).auc
    note(record_property, "metric oracle: brute-force agreement within 1e-9; null AUC 0.5 +- 0.02",
         max_abs_diff=f"{worst:.1e}", null_auc=f"{null:.4f}")  # fmt: skip
    assert worst <= 1e-9
    assert abs(null - 0.5) <= 0.02


def test_learnability(record_property, mixed_run):
    _, _, ck, history, elapsed = mixed_run
    note(record_property, "learnability: mixed synthetic data reaches val AUC >= 0.95 within 10 epochs, < 5 min on one core",
         best_auc=f"{ck.metrics['auc']:.4f}", best_epoch=ck.epoch, epochs_run=len(history), seconds=f"{elapsed:.0f}")  # fmt: skip
    assert len(history) <= 10
    assert ck.metrics["auc"] >= 0.95
    assert elapsed < 300


def test_ablation_signal_routing(record_property, ablation_aucs):
    a = ablation_aucs
    note(record_property, "ablation routing: kg data full/w-o-LLM >= 0.90, w-o-KG <= 0.60; llm data full/w-o-KG >= 0.90, w-o-LLM <= 0.60",
         **{f"{m}:{v}": f"{x:.4f}" for (m, v), x in a.items()})  # fmt: skip
    assert a["kg", "full"] >= 0.90 and a["kg", "w/o LLM"] >= 0.90
    assert a["kg", "w/o KG"] <= 0.60
    assert a["llm", "full"] >= 0.90 and a["llm", "w/o KG"] >= 0.90
    assert a["llm", "w/o LLM"] <= 0.60


def test_attention_invariants(record_property, mixed_run):
    data, feats, ck, _, _ = mixed_run
    model = ck.model()
    worst, vectors = 0.0, 0
    for start in range(0, len(feats.ids), 256):
        rows = np.arange(start, min(len(feats.ids), start + 256))
        _, alpha, idx = encode_news_rows(model.params, model.config, feats, rows, with_trace=True)
        filled = (idx >= 0).any(axis=-1)  # (B, S): hops that emit a weight vector
        sums = alpha.sum(axis=-1)  # (B, S, H)
        emitted = np.broadcast_to(filled[:, :, None], sums.shape)
        vectors += int(emitted.sum())
        worst = max(worst, float(np.abs(sums[emitted] - 1.0).max(initial=0.0)))
        assert not alpha[np.broadcast_to((idx < 0)[:, :, None, :], alpha.shape)].any()

    rng = np.random.default_rng(321)
    graphs = 0
    while graphs < 100:
        n_nodes = int(rng.integers(2, 201))
        triples = random_graph(rng, n_nodes, int(rng.integers(1, 2 * n_nodes)))
        if not triples:
            continue
        graphs += 1
        g = with_embeddings(triples, dim=2)
        nodes = sorted(g.adjacency)
        srcs = {str(x) for x in rng.choice(nodes, size=min(len(nodes), int(rng.integers(1, 4))), replace=False)}
        hs = hop_sets(g, srcs, 3, max_per_hop=10**6, seed=0)
        dist = relaxation_distances(triples, srcs, n_nodes + 1)
        for k in range(1, 4):
            assert set(hs[k - 1]) == {v for v, d in dist.items() if d == k}
    note(record_property, "attention invariants: every alpha sums to 1 +- 1e-9; hop_sets equals BFS on 100 graphs",
         alpha_vectors=vectors, max_sum_err=f"{worst:.1e}", graphs=graphs)  # fmt: skip
    assert vectors > 0 and worst <= 1e-9


def test_determinism(record_property, tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data_dir), "--seed", "5"]) == 0
    reports, checkpoints = [], []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["--config", str(data_dir / "data.cfg"), "--seed", "5", "--set", "train.max_epochs=2", "--out", str(out)]
        assert cli.main(["train", *args]) == 0
        assert cli.main(["eval", *args]) == 0
        reports.append((out / "report.tsv").read_bytes() + (out / "report.txt").read_bytes())
        checkpoints.append((out / cli.CHECKPOINT_NAME).read_bytes())
    capsys.readouterr()
    note(record_property, "determinism: train+eval twice give byte-identical reports and checkpoints",
         report_bytes=len(reports[0]), checkpoint_bytes=len(checkpoints[0]))  # fmt: skip
    assert reports[0] == reports[1]
    assert checkpoints[0] == checkpoints[1]


def test_format_round_trips(record_property, tmp_path, mixed_run):
    data, _, ck, _, _ = mixed_run
    p1, p2 = tmp_path / "a.lkem", tmp_path / "b.lkem"
    write_store(data.store, p1)
    write_store(read_store(p1), p2)
    lkem_ok = p1.read_bytes() == p2.read_bytes() and dumps_store(loads_store(p1.read_bytes())) == p1.read_bytes()
    c1, c2 = tmp_path / "a.lkck", tmp_path / "b.lkck"
    save_checkpoint(ck, c1)
    save_checkpoint(load_checkpoint(c1), c2)
    ck_ok = c1.read_bytes() == c2.read_bytes() == dumps_checkpoint(ck)
    note(record_property, "format round-trips: LKEM and checkpoint write-read-write byte-identical",
         lkem_bytes=p1.stat().st_size, checkpoint_bytes=c1.stat().st_size)  # fmt: skip
    assert lkem_ok and ck_ok


def test_loss_anchor(record_property):
    values = [0.0, 0.37, -12.5, 1e3, -1e3]
    tied = np.array([[v] * 5 for v in values])
    per_sample = [float(softmax_nll(Tensor(row)).data) for row in tied]
    batched = float(softmax_nll(Tensor(tied)).data)
    worst = max(abs(x - math.log(5)) for x in per_sample + [batched])
    note(record_property, "loss anchor: tied scores with K=4 give ln 5 +- 1e-12", max_abs_err=f"{worst:.1e}")
    assert worst <= 1e-12
