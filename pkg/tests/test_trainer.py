import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_world
from lkrec import numkit as nk
from lkrec import trainer
from lkrec.config import ConfigError, TrainConfig
from lkrec.encoders import prepare_features
from lkrec.evalkit import evaluate
from lkrec.mindio import TrainSample
from lkrec.numkit import Tensor
from lkrec.synth import SynthSpec, synth_dataset

SMALL = dict(d_word=8, d_gen=8, kg_out=8, llm_proj=8, entity_dim=100, lr=1e-3, max_epochs=2, batch_size=32)


def small_run(mode="mixed", **kw):
    data = synth_dataset(SynthSpec(mode=mode, news=80, users=30, llm_dim=16), seed=3)
    cfg = TrainConfig(**{**SMALL, **kw})
    feats = prepare_features(data.dataset, data.graph, data.store, cfg)
    return data, cfg, feats


# ---------------------------------------------------------------- loss


def test_loss_all_tied_is_ln5():
    assert abs(float(trainer.softmax_nll(Tensor(np.full(5, 0.37))).data) - math.log(5)) < 1e-12


def test_loss_positive_dominates():
    assert float(trainer.softmax_nll(Tensor([60.0, 0.0, 0.0, 0.0, 0.0])).data) < 1e-20


def test_loss_hand_value():
    got = float(trainer.softmax_nll(Tensor([1.0, 0.0, 0.0, 0.0, 0.0])).data)
    assert got == pytest.approx(math.log(math.e + 4) - 1, abs=1e-14)
    assert got == pytest.approx(0.90483, abs=1e-5)


def test_batched_loss_is_mean():
    s = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, -1.0]])
    expected = np.mean([float(trainer.softmax_nll(Tensor(r)).data) for r in s])
    assert float(trainer.softmax_nll(Tensor(s)).data) == pytest.approx(expected, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_loss_probability_bounds(scores):
    loss = float(trainer.softmax_nll(Tensor(scores)).data)
    p = math.exp(-loss)
    assert loss >= 0 and 0 < p <= 1
    if max(scores) - min(scores) < 30:
        assert p < 1


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal((3, 5))
        t = Tensor(x, requires_grad=True)
        with nk.Tape() as tape:
            loss = trainer.softmax_nll(t)
        tape.backward(loss)
        num = nk.finite_diff_grad(lambda v: float(trainer.softmax_nll(Tensor(v)).data), x)
        assert nk.relative_error(t.grad, num) < 1e-4


# ---------------------------------------------------------------- model construction


def closed_form_count(cfg, V, D):
    r = cfg.d_gen + cfg.kg_out + cfg.llm_proj
    n = V * cfg.d_word + cfg.d_word * cfg.d_gen + cfg.d_gen
    n += cfg.llm_layers + D * cfg.llm_proj + cfg.llm_proj
    n += cfg.llm_proj * cfg.entity_dim + cfg.entity_dim
    n += cfg.kg_hops * cfg.kg_num_heads * 3 * cfg.entity_dim
    n += cfg.kg_hops * cfg.kg_num_heads * cfg.entity_dim * cfg.kg_out
    n += r * r + r
    return n


def test_default_parameter_count():
    cfg = TrainConfig()
    model = trainer.build_model(cfg, vocab_size=1000, llm_dim=4096)
    assert model.params.count() == closed_form_count(cfg, 1000, 4096)


def test_init_rules():
    model = trainer.build_model(TrainConfig(), vocab_size=50, llm_dim=16)
    p = model.params
    np.testing.assert_array_equal(p["llm.layer_weights"].data, [0.25] * 4)
    assert not p["llm.f_l.b"].data.any() and not p["kg.f_s.b"].data.any()
    assert np.abs(p["kg.Q"].data).max() <= 0.1 and abs(p["kg.Q"].data.std() - 0.1 / np.sqrt(3)) < 2e-3


def test_no_kg_parameters_without_kg():
    model = trainer.build_model(TrainConfig(use_kg=False), 10, 8)
    assert not [n for n in model.params if n.startswith("kg.")]


def test_same_seed_same_init():
    a = trainer.build_model(TrainConfig(seed=4), 10, 8).params.snapshot()
    b = trainer.build_model(TrainConfig(seed=4), 10, 8).params.snapshot()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_contradictory_flags():
    with pytest.raises(ConfigError):
        trainer.build_model(TrainConfig(use_llm=False, kg_query_source="llm"), 10, 8)


# ---------------------------------------------------------------- optimisation


def test_single_adam_step_descends():
    for seed in range(20):
        _, _, _, cfg, feats, model = toy_world(seed=seed)
        sample = TrainSample(("N1", "N2"), "N3", ("N5", "N6"))
        model.params.zero_grad()
        with nk.Tape() as tape:
            before = trainer.sample_loss(sample, model, feats)
        tape.backward(before)
        nk.adam_step(model.params, nk.AdamState(), 1e-3)
        after = trainer.sample_loss(sample, model, feats)
        assert float(after.data) < float(before.data), seed


def test_zero_learning_rate_freezes_params():
    data, cfg, feats = small_run(lr=0.0)
    init = trainer.build_model(cfg, len(data.dataset.vocab), 16).params.snapshot()
    ck, _ = trainer.train(data.dataset, feats, cfg, llm_dim=16)
    for k, v in init.items():
        assert ck.params[k].tobytes() == v.tobytes()


def test_training_replay_identical_checkpoints():
    data, cfg, feats = small_run()
    a, log_a = trainer.train(data.dataset, feats, cfg, llm_dim=16)
    b, log_b = trainer.train(data.dataset, feats, cfg, llm_dim=16)
    assert trainer.dumps_checkpoint(a) == trainer.dumps_checkpoint(b)
    assert [e.line() for e in log_a] == [e.line() for e in log_b]


def test_early_stopping_respects_patience():
    data, cfg, feats = small_run(max_epochs=30, patience=1, lr=3e-3)
    ck, log = trainer.train(data.dataset, feats, cfg, llm_dim=16)
    aucs = [e.report.auc for e in log]
    assert ck.metrics["auc"] == max(aucs)
    if len(log) < 30:
        assert aucs[-1] <= max(aucs[:-1])


def test_empty_training_set():
    data, cfg, feats = small_run()
    data.dataset.train_impressions = []
    with pytest.raises(trainer.TrainingError):
        trainer.train(data.dataset, feats, cfg, llm_dim=16)


def test_non_finite_loss_aborts(monkeypatch):
    data, cfg, feats = small_run()
    monkeypatch.setattr(trainer, "batch_loss", lambda *a: Tensor(float("nan")))
    with pytest.raises(trainer.TrainingError, match="non-finite"):
        trainer.train(data.dataset, feats, cfg, llm_dim=16)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    data, cfg, feats = small_run()
    ck, _ = trainer.train(data.dataset, feats, cfg, llm_dim=16)
    path = tmp_path / "m.lkck"
    trainer.save_checkpoint(ck, path)
    back = trainer.load_checkpoint(path)
    assert back.config == cfg and back.epoch == ck.epoch and back.metrics == ck.metrics
    assert trainer.dumps_checkpoint(back) == path.read_bytes()
    r1 = evaluate(ck.model(), feats, data.dataset.eval_impressions)
    r2 = evaluate(back.model(), feats, data.dataset.eval_impressions)
    assert r1.to_kv() == r2.to_kv()


def test_checkpoint_format_errors():
    with pytest.raises(trainer.CheckpointFormatError):
        trainer.loads_checkpoint(b"NOPE")
    ck = trainer.Checkpoint(TrainConfig(), {"w": np.ones((2, 3))}, 1, {"auc": 0.5})
    buf = trainer.dumps_checkpoint(ck)
    with pytest.raises(trainer.CheckpointFormatError):
        trainer.loads_checkpoint(buf[:-3])
