import struct

import numpy as np
import pytest

from lkrec import embedstore as es


def test_empty_store(tmp_path):
    p = tmp_path / "e.lkem"
    es.write_store(es.LayerEmbeddings(layers=4, dim=8), p)
    store = es.read_store(p)
    assert len(store) == 0 and (store.layers, store.dim) == (4, 8)


def test_layout_length():
    buf = es.dumps_store({"N12": np.zeros((4, 2))})
    assert len(buf) == 4 + 4 * 4 + 2 + len("N12") + 4 * 2 * 4


def test_round_trip_is_exact_at_float32(tmp_path):
    rng = np.random.default_rng(0)
    entries = {f"N{i}": rng.standard_normal((4, 16)) for i in range(1000)}
    p = tmp_path / "e.lkem"
    es.write_store(entries, p)
    back = es.read_store(p)
    assert sorted(back) == sorted(entries)
    for k, v in entries.items():
        assert back[k].tobytes() == v.astype(np.float32).astype(np.float64).tobytes()
    assert es.dumps_store(back) == p.read_bytes()


def test_deterministic_bytes():
    rng = np.random.default_rng(1)
    entries = {k: rng.standard_normal((4, 3)) for k in ("b", "a", "c")}
    assert es.dumps_store(entries) == es.dumps_store(dict(reversed(list(entries.items()))))


def test_non_finite_rejected():
    bad = np.zeros((4, 2))
    bad[1, 1] = np.nan
    with pytest.raises(ValueError):
        es.dumps_store({"N1": bad})


def test_non_uniform_rejected():
    with pytest.raises(ValueError):
        es.dumps_store({"a": np.zeros((4, 2)), "b": np.zeros((4, 3))})


def test_truncated_record_names_index():
    buf = es.dumps_store({f"N{i}": np.ones((4, 2)) for i in range(3)})
    with pytest.raises(es.EmbeddingFormatError, match="record 2"):
        es.loads_store(buf[:-5])


def test_bad_magic_and_version():
    buf = es.dumps_store({"N1": np.ones((4, 2))})
    with pytest.raises(es.EmbeddingFormatError, match="magic"):
        es.loads_store(b"XXXX" + buf[4:])
    with pytest.raises(es.EmbeddingFormatError, match="version"):
        es.loads_store(buf[:4] + struct.pack("<I", 2) + buf[8:])


def test_store_rejects_mixed_shapes():
    store = es.LayerEmbeddings()
    store["a"] = np.zeros((4, 2))
    with pytest.raises(ValueError):
        store["b"] = np.zeros((3, 2))
    assert store.missing(["a", "z"]) == ["z"]


def test_synthetic_embeddings_replay_and_norm():
    a = es.synthetic_embeddings("N1", 4, 64, seed=3)
    assert a.tobytes() == es.synthetic_embeddings("N1", 4, 64, seed=3).tobytes()
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9)


def test_synthetic_embeddings_distinct_ids():
    rows = {es.synthetic_embeddings(f"N{i}", 1, 16, seed=0)[0].tobytes() for i in range(1000)}
    assert len(rows) == 1000


def test_synthetic_embeddings_planted():
    d = np.zeros(8)
    d[0] = 2.0
    base = es.synthetic_embeddings("N5", 4, 8, seed=1)
    planted = es.synthetic_embeddings("N5", 4, 8, seed=1, planted=d)
    np.testing.assert_allclose(planted - base, np.tile(d, (4, 1)))
