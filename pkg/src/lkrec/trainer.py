"""Model construction, softmax ranking loss, training loop and checkpoints."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numkit as nk
from .config import TrainConfig, train_config_from_text, train_config_to_text
from .encoders import NewsFeatures, check_query_source, encode_news_rows, encode_users
from .evalkit import EvaluationError, MetricReport, evaluate
from .kgstore import stable_seed
from .mindio import ClickDataset, TrainSample, build_samples
from .numkit import AdamState, ParamRegistry, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Model:
    config: TrainConfig
    params: ParamRegistry


def param_shapes(cfg: TrainConfig, vocab_size: int, llm_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [
        ("gen.word_emb", (vocab_size, cfg.d_word)),
        ("gen.proj", (cfg.d_word, cfg.d_gen)),
        ("gen.query", (cfg.d_gen,)),
    ]
    if cfg.use_llm:
        shapes += [
            ("llm.layer_weights", (cfg.llm_layers,)),
            ("llm.f_l.W", (llm_dim, cfg.llm_proj)),
            ("llm.f_l.b", (cfg.llm_proj,)),
        ]
    if cfg.use_kg:
        q_in = cfg.llm_proj if cfg.kg_query_source == "llm" else cfg.d_gen
        slots, heads, e = cfg.kg_hop_slots, cfg.kg_num_heads, cfg.entity_dim
        shapes += [
            ("kg.f_s.W", (q_in, e)),
            ("kg.f_s.b", (e,)),
            ("kg.attn", (slots, heads, 3 * e)),
            ("kg.Q", (slots * heads * e, cfg.kg_out)),
        ]
    r = cfg.news_dim
    shapes += [("user.proj", (r, r)), ("user.query", (r,))]
    return shapes


def build_model(
    cfg: TrainConfig, vocab_size: int, llm_dim: int, word_vectors: dict[str, np.ndarray] | None = None, vocab=None
) -> Model:
    """Fresh parameters: U(-0.1, 0.1) weights, zero biases, equal layer weights."""
    cfg.validate()
    check_query_source(cfg)
    rng = np.random.default_rng(stable_seed(cfg.seed, "init"))
    params = ParamRegistry()
    for name, shape in param_shapes(cfg, vocab_size, llm_dim):
        if name.endswith(".b"):
            value = np.zeros(shape)
        elif name == "llm.layer_weights":
            value = np.full(shape, 1.0 / shape[0])
        else:
            value = rng.uniform(-0.1, 0.1, size=shape)
        params.add(name, value)
    if word_vectors and vocab:
        emb = params["gen.word_emb"].data
        for w, i in vocab.items():
            vec = word_vectors.get(w)
            if vec is not None and vec.shape == (cfg.d_word,):
                emb[i] = vec
    return Model(cfg, params)


def load_word_vectors(path: str | Path, dim: int) -> dict[str, np.ndarray]:
    """Whitespace-separated ``word v1 .. vdim`` lines (GloVe layout)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            cols = line.rstrip().split(" ")
            if len(cols) == dim + 1:
                out[cols[0]] = np.array(cols[1:], dtype=np.float64)
    return out


# ---------------------------------------------------------------- loss


def softmax_nll(scores: Tensor) -> Tensor:
    """Negative log of the softmax mass on column 0 (the clicked item).

    ``scores`` is (K+1,) or (B, K+1); a batch is averaged.
    """
    lp = nk.log_softmax(scores, axis=-1)
    if scores.data.ndim == 1:
        return nk.scale(nk.index(lp, 0), -1.0)
    return nk.scale(nk.mean(nk.index(lp, (slice(None), 0))), -1.0)


def batch_scores(model: Model, feats: NewsFeatures, samples: list[TrainSample]) -> Tensor:
    """(B, K+1) match scores, clicked news in column 0."""
    local: dict[str, int] = {}
    for s in samples:
        for n in s.history[-model.config.history_max :]:
            local.setdefault(n, len(local))
        local.setdefault(s.positive, len(local))
        for n in s.negatives:
            local.setdefault(n, len(local))
    rows = feats.rows(local)
    vecs = encode_news_rows(model.params, model.config, feats, rows)
    hists = [[local[n] for n in s.history[-model.config.history_max :]] for s in samples]
    z = max([len(h) for h in hists] + [0])
    idx = np.zeros((len(samples), z), dtype=np.int64)
    mask = np.zeros((len(samples), z), dtype=bool)
    for i, h in enumerate(hists):
        idx[i, : len(h)] = h
        mask[i, : len(h)] = True
    users = encode_users(model.params, vecs, idx, mask)
    cand = np.array([[local[s.positive]] + [local[n] for n in s.negatives] for s in samples], dtype=np.int64)
    return nk.einsum("bkd,bd->bk", nk.take(vecs, cand), users)


def batch_loss(model: Model, feats: NewsFeatures, samples: list[TrainSample]) -> Tensor:
    return softmax_nll(batch_scores(model, feats, samples))


def sample_loss(sample: TrainSample, model: Model, feats: NewsFeatures) -> Tensor:
    return batch_loss(model, feats, [sample])


# ---------------------------------------------------------------- checkpoints


CK_MAGIC = b"LKCK"
CK_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    def model(self) -> Model:
        reg = ParamRegistry()
        for name, value in self.params.items():
            reg.add(name, value)
        return Model(self.config, reg)


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def dumps_checkpoint(ck: Checkpoint) -> bytes:
    """Binary layout (little-endian)::

        b"LKCK" u32 version
        u32 n + config text (key=value lines, UTF-8)
        u32 n + meta text (epoch and validation metrics, key=value lines)
        u32 tensor count
        per tensor: u16 name length, name, u32 ndim, ndim x u32 dims, float64 data
    """
    meta = f"epoch={ck.epoch}\n" + "".join(f"{k}={v!r}\n" for k, v in ck.metrics.items())
    out = [CK_MAGIC, struct.pack("<I", CK_VERSION), _blob(train_config_to_text(ck.config).encode()), _blob(meta.encode())]
    out.append(struct.pack("<I", len(ck.params)))
    for name, value in ck.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    return b"".join(out)


class CheckpointFormatError(ValueError):
    pass


def loads_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CK_MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    off = 4

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        b = buf[off : off + n]
        off += n
        return b

    (version,) = take("<I")
    if version != CK_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    cfg = train_config_from_text(take_bytes(take("<I")[0]).decode())
    meta_lines = take_bytes(take("<I")[0]).decode().splitlines()
    epoch = 0
    metrics = {}
    for line in meta_lines:
        k, v = line.split("=", 1)
        if k == "epoch":
            epoch = int(v)
        else:
            metrics[k] = float(v)
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = take_bytes(nlen).decode("utf-8")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take_bytes(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after checkpoint")
    return Checkpoint(cfg, params, epoch, metrics)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    loss: float
    report: MetricReport | None

    def line(self) -> str:
        if self.report is None:
            return f"{self.epoch}\t{self.loss:.6f}\t-\t-\t-\t-"
        r = self.report
        return f"{self.epoch}\t{self.loss:.6f}\t{r.auc:.6f}\t{r.mrr:.6f}\t{r.ndcg5:.6f}\t{r.ndcg10:.6f}"


LOG_HEADER = "epoch\tloss\tauc\tmrr\tndcg@5\tndcg@10"


def train(
    dataset: ClickDataset,
    feats: NewsFeatures,
    cfg: TrainConfig,
    llm_dim: int = 0,
    word_vectors: dict[str, np.ndarray] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Mini-batch Adam on the (K+1)-way softmax loss with early stopping on validation AUC.

    Returns the checkpoint of the best validation epoch (the last epoch when
    there is no validation set) and the per-epoch log.
    """
    cfg.validate()
    samples = build_samples(dataset.train_impressions, cfg.neg_k, cfg.seed, cfg.history_max)
    if not samples:
        raise TrainingError("no training samples (need impressions with clicks and non-clicks)")
    model = build_model(cfg, len(dataset.vocab), llm_dim, word_vectors, dataset.vocab)
    state = AdamState()
    rng = np.random.default_rng(stable_seed(cfg.seed, "shuffle"))
    best: Checkpoint | None = None
    best_auc = -math.inf
    stale = 0
    history: list[EpochLog] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            model.params.zero_grad()
            with Tape() as tape:
                loss = batch_loss(model, feats, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting at {start}")
            tape.backward(loss)
            nk.adam_step(model.params, state, cfg.lr)
            total += value * len(batch)
        report = None
        if dataset.eval_impressions:
            try:
                report = evaluate(model, feats, dataset.eval_impressions, label="validation")
            except EvaluationError:
                report = None
        entry = EpochLog(epoch, total / len(samples), report)
        history.append(entry)
        log.info("epoch %s", entry.line())
        if on_epoch is not None:
            on_epoch(entry)
        if report is None:
            best = Checkpoint(cfg, model.params.snapshot(), epoch, {})
            continue
        if report.auc > best_auc:
            best_auc = report.auc
            best = Checkpoint(cfg, model.params.snapshot(), epoch, report.as_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history
