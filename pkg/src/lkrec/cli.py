"""Command-line entry point: ``lkrec {ingest,synth,train,eval,ablate,explain}``.

All settings come from a flat ``key=value`` config file plus repeatable
``--set key=value`` overrides. Every file a command writes goes under
``--out``. Exit codes: 0 success, 1 runtime failure, 2 user or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, TrainConfig, load_config
from .embedstore import EmbeddingFormatError, LayerEmbeddings, read_store
from .encoders import ValidationError, encode_news_rows, prepare_features
from .evalkit import EvaluationError, MetricReport, encode_all_news, evaluate, user_vectors
from .kgstore import TripleGraph, build_graph
from .mindio import (
    ClickDataset,
    FormatError,
    ParseReport,
    build_dataset,
    parse_entity_vec,
    parse_triples_tsv,
    read_snapshot,
    write_snapshot,
)
from .synth import SynthSpec, SynthSpecError, synth_dataset, write_synth
from .trainer import (
    LOG_HEADER,
    Checkpoint,
    CheckpointFormatError,
    TrainingError,
    load_checkpoint,
    load_word_vectors,
    param_shapes,
    save_checkpoint,
    train,
)

log = logging.getLogger("lkrec")

SNAPSHOT_NAME = "snapshot.lksnap"
CHECKPOINT_NAME = "model.lkck"


class UsageError(Exception):
    """Bad input from the user: missing file, unknown id, inconsistent artifacts."""


USER_ERRORS = (
    UsageError,
    ConfigError,
    FormatError,
    EmbeddingFormatError,
    CheckpointFormatError,
    ValidationError,
    SynthSpecError,
)


# ---------------------------------------------------------------- loading helpers


def _require_files(run: RunConfig, required: list[str], optional: list[str] = ()) -> dict[str, Path | None]:
    """Resolve path keys and check every file exists before any work starts."""
    out: dict[str, Path | None] = {}
    for key in required:
        if key not in run.paths:
            raise UsageError(f"missing required path {key} (set it in the config or with --set {key}=PATH)")
        out[key] = run.path(key)
    for key in optional:
        out[key] = run.path(key, required=False)
    for key, path in out.items():
        if path is not None and not path.is_file():
            raise UsageError(f"{key}: file not found: {path}")
    return out


def _data_keys(run: RunConfig, need_kg: bool, need_llm: bool) -> tuple[list[str], list[str]]:
    if "data.snapshot" in run.paths:
        required = ["data.snapshot"]
    else:
        required = ["data.news", "data.train_behaviors"]
    optional = ["data.word_vectors"]
    if "data.snapshot" not in run.paths:
        optional.append("data.eval_behaviors")
    if need_kg:
        required += ["data.entity_vec", "data.triples"]
    if need_llm:
        required.append("data.llm_embeddings")
    return required, optional


def _load_dataset(paths: dict[str, Path | None], min_freq: int) -> ClickDataset:
    if paths.get("data.snapshot") is not None:
        return read_snapshot(paths["data.snapshot"])
    ds = build_dataset(paths["data.news"], paths["data.train_behaviors"], paths.get("data.eval_behaviors"), min_freq)
    if not ds.train_impressions:
        raise UsageError(f"no impressions in {paths['data.train_behaviors']}")
    return ds


def _load_graph(paths: dict[str, Path | None], dim: int) -> TripleGraph:
    emb = parse_entity_vec(paths["data.entity_vec"], dim)
    return build_graph(parse_triples_tsv(paths["data.triples"]), emb)


class Inputs:
    """Dataset plus the optional graph, LLM store and word vectors."""

    def __init__(self, run: RunConfig, need_kg: bool, need_llm: bool):
        cfg = run.train
        required, optional = _data_keys(run, need_kg, need_llm)
        paths = _require_files(run, required, optional)
        self.dataset = _load_dataset(paths, cfg.vocab_min_freq)
        self.graph = _load_graph(paths, cfg.entity_dim) if need_kg else None
        self.store: LayerEmbeddings | None = read_store(paths["data.llm_embeddings"]) if need_llm else None
        wv = paths.get("data.word_vectors")
        self.word_vectors = load_word_vectors(wv, cfg.d_word) if wv is not None else None

    @property
    def llm_dim(self) -> int:
        return self.store.dim if self.store is not None and self.store.dim is not None else 0

    def features(self, cfg: TrainConfig, dataset: ClickDataset | None = None):
        return prepare_features(dataset or self.dataset, self.graph, self.store, cfg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(args, out: Path) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _check_compatible(ck: Checkpoint, vocab_size: int, llm_dim: int) -> None:
    expected = dict(param_shapes(ck.config, vocab_size, llm_dim))
    got = {k: tuple(v.shape) for k, v in ck.params.items()}
    if expected != got:
        diffs = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))
        detail = ", ".join(f"{k}: checkpoint {got.get(k)} vs data {expected.get(k)}" for k in diffs[:5])
        raise UsageError(f"checkpoint does not match the data dimensions ({detail})")


# ---------------------------------------------------------------- commands


def cmd_synth(run: RunConfig, args) -> int:
    kw = {k.split(".", 1)[1]: v for k, v in run.synth.items()}
    kw.setdefault("entity_dim", run.train.entity_dim)
    kw.setdefault("llm_layers", run.train.llm_layers)
    kw.setdefault("vocab_min_freq", run.train.vocab_min_freq)
    spec = SynthSpec(**kw).validate()
    data = synth_dataset(spec, run.train.seed)
    out = _out_dir(args)
    paths = write_synth(data, out)
    lines = [f"{k}={p.resolve()}" for k, p in paths.items()]
    (out / "data.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ds = data.dataset
    print(f"mode={spec.mode}")
    print(f"news={len(ds.news)}")
    print(f"train_impressions={len(ds.train_impressions)}")
    print(f"eval_impressions={len(ds.eval_impressions)}")
    print(f"entities={data.graph.num_entities}")
    print(f"config={out / 'data.cfg'}")
    return 0


def ingest_stats(ds: ClickDataset, entity_table: dict | None) -> list[tuple[str, str]]:
    referenced = {e for rec in ds.news.values() for e in rec.entity_ids}
    if entity_table is None:
        coverage = "-"
    elif not referenced:
        coverage = "100.00"
    else:
        coverage = f"{100.0 * len(referenced & set(entity_table)) / len(referenced):.2f}"
    return [
        ("news", str(len(ds.news))),
        ("impressions", str(len(ds.train_impressions) + len(ds.eval_impressions))),
        ("train_impressions", str(len(ds.train_impressions))),
        ("eval_impressions", str(len(ds.eval_impressions))),
        ("entities_referenced", str(len(referenced))),
        ("entity_coverage_pct", coverage),
        ("vocab_size", str(len(ds.vocab))),
    ]


def cmd_ingest(run: RunConfig, args) -> int:
    paths = _require_files(
        run, ["data.news", "data.train_behaviors"], ["data.eval_behaviors", "data.entity_vec"]
    )
    report = ParseReport()
    ds = build_dataset(
        paths["data.news"], paths["data.train_behaviors"], paths["data.eval_behaviors"], run.train.vocab_min_freq, report
    )
    if not ds.train_impressions:
        raise UsageError(f"no impressions in {paths['data.train_behaviors']}")
    table = None
    if paths["data.entity_vec"] is not None:
        table = parse_entity_vec(paths["data.entity_vec"], run.train.entity_dim, report)
    out = _out_dir(args)
    write_snapshot(ds, out / SNAPSHOT_NAME)
    stats = ingest_stats(ds, table)
    (out / "ingest_stats.txt").write_text("".join(f"{k}={v}\n" for k, v in stats), encoding="utf-8")
    for k, v in stats:
        print(f"{k}={v}")
    print(f"warnings={len(report)}")
    print(f"snapshot={out / SNAPSHOT_NAME}")
    return 0


def _train_one(inputs: Inputs, cfg: TrainConfig, log_path: Path | None = None) -> Checkpoint:
    feats = inputs.features(cfg)
    lines = [LOG_HEADER]

    ck, _ = train(inputs.dataset, feats, cfg, inputs.llm_dim, inputs.word_vectors, lambda e: lines.append(e.line()))
    if log_path is not None:
        stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        log_path.write_text(f"# started {stamp}\n" + "\n".join(lines) + "\n", encoding="utf-8")
    return ck


def cmd_train(run: RunConfig, args) -> int:
    cfg = run.train.validate()
    inputs = Inputs(run, cfg.use_kg, cfg.use_llm)
    out = _out_dir(args)
    ck = _train_one(inputs, cfg, out / "train_log.tsv")
    save_checkpoint(ck, out / CHECKPOINT_NAME)
    print(f"best_epoch={ck.epoch}")
    for k, v in ck.metrics.items():
        print(f"best_{k}={v!r}")
    print(f"checkpoint={out / CHECKPOINT_NAME}")
    return 0


def _write_report(rep: MetricReport, out: Path) -> None:
    (out / "report.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    (out / "report.txt").write_text(rep.to_kv(), encoding="utf-8")


def cmd_eval(run: RunConfig, args) -> int:
    out = _out_dir(args)
    ck = load_checkpoint(_checkpoint_path(args, out))
    cfg = ck.config
    inputs = Inputs(run, cfg.use_kg, cfg.use_llm)
    _check_compatible(ck, len(inputs.dataset.vocab), inputs.llm_dim)
    if not inputs.dataset.eval_impressions:
        raise UsageError("no eval impressions to score")
    rep = evaluate(ck.model(), inputs.features(cfg), inputs.dataset.eval_impressions, label="eval")
    _write_report(rep, out)
    sys.stdout.write(rep.to_tsv())
    sys.stdout.write("\n")
    sys.stdout.write(rep.to_kv())
    return 0


def ablation_configs(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    return [
        ("full", cfg.variant(use_kg=True, use_llm=True)),
        ("w/o KG", cfg.variant(use_kg=False, use_llm=True)),
        ("w/o LLM", cfg.variant(use_kg=True, use_llm=False, kg_query_source="general")),
        ("orig", cfg.variant(use_kg=False, use_llm=False)),
    ]


def ablation_table(reports: list[MetricReport]) -> str:
    lines = ["variant\tauc\tmrr\tndcg@5\tndcg@10"]
    for r in reports:
        lines.append(f"{r.label}\t{r.auc:.6f}\t{r.mrr:.6f}\t{r.ndcg5:.6f}\t{r.ndcg10:.6f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(run: RunConfig, args) -> int:
    base = run.train.validate()
    inputs = Inputs(run, need_kg=True, need_llm=True)
    if not inputs.dataset.eval_impressions:
        raise UsageError("ablation needs eval impressions")
    out = _out_dir(args)
    reports = []
    for name, cfg in ablation_configs(base):
        log.info("ablation variant %s", name)
        ck = _train_one(inputs, cfg)
        reports.append(evaluate(ck.model(), inputs.features(cfg), inputs.dataset.eval_impressions, label=name))
    table = ablation_table(reports)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def _latest_history(ds: ClickDataset, user_id: str) -> tuple[str, ...]:
    found = None
    for imp in ds.train_impressions + ds.eval_impressions:
        if imp.user_id == user_id:
            found = imp.history
    if found is None:
        raise UsageError(f"unknown user id {user_id!r}")
    return found


def explain_lines(ck: Checkpoint, inputs: Inputs, news_id: str, user_id: str, top: int = 5) -> list[str]:
    ds = inputs.dataset
    if news_id not in ds.news:
        raise UsageError(f"unknown news id {news_id!r}")
    history = _latest_history(ds, user_id)
    cfg = ck.config
    keep = [n for n in dict.fromkeys(history + (news_id,)) if n in ds.news]
    sub = ClickDataset({n: ds.news[n] for n in keep}, [], [], ds.vocab)
    feats = inputs.features(cfg, sub)
    model = ck.model()

    lines = ["# trace", "news_id\thop\thead\tentity_id\tweight"]
    top_lines = ["# top", "news_id\thop\thead\trank\tentity_id\tweight"]
    row = np.array([feats.row[news_id]])
    _, alpha, hop_idx = encode_news_rows(model.params, cfg, feats, row, with_trace=True)
    if alpha is not None:
        first_hop = 0 if cfg.kg_include_source_hop else 1
        for s in range(alpha.shape[1]):
            slots = np.flatnonzero(hop_idx[0, s] >= 0)
            for h in range(alpha.shape[2]):
                ents = [(feats.entity_ids[hop_idx[0, s, m]], float(alpha[0, s, h, m])) for m in slots]
                for e, w in ents:
                    lines.append(f"{news_id}\t{s + first_hop}\t{h}\t{e}\t{w!r}")
                ranked = sorted(range(len(ents)), key=lambda i: -ents[i][1])
                for rank, i in enumerate(ranked[:top], 1):
                    top_lines.append(f"{news_id}\t{s + first_hop}\t{h}\t{rank}\t{ents[i][0]}\t{ents[i][1]!r}")

    vecs = encode_all_news(model, feats)
    u = user_vectors(model, vecs, feats, [history])[0]
    score = float(vecs[feats.row[news_id]] @ u)
    return lines + top_lines + ["# score", "user_id\tnews_id\tscore", f"{user_id}\t{news_id}\t{score!r}"]


def cmd_explain(run: RunConfig, args) -> int:
    if not args.news or not args.user:
        raise UsageError("explain needs --news ID and --user ID")
    out = _out_dir(args)
    ck = load_checkpoint(_checkpoint_path(args, out))
    inputs = Inputs(run, ck.config.use_kg, ck.config.use_llm)
    _check_compatible(ck, len(inputs.dataset.vocab), inputs.llm_dim)
    text = "\n".join(explain_lines(ck, inputs, args.news, args.user)) + "\n"
    (out / "explain.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V", help="override a config key")
    common.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="cap on BLAS threads (default 1)")
    common.add_argument("--out", default="out", metavar="DIR", help="output directory (default ./out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="lkrec", description="Knowledge- and LLM-augmented news recommendation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse MIND files into a snapshot and print corpus stats")
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus in MIND layout")
    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    for name, desc in (("eval", "score eval impressions with a checkpoint"), ("explain", "dump KG attention for one news item")):
        p = sub.add_parser(name, parents=[common], help=desc)
        p.add_argument("--checkpoint", metavar="PATH", help=f"checkpoint file (default OUT/{CHECKPOINT_NAME})")
        if name == "explain":
            p.add_argument("--news", metavar="ID")
            p.add_argument("--user", metavar="ID")
    sub.add_parser("ablate", parents=[common], help="train and compare full, w/o KG, w/o LLM and orig variants")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"train.seed={args.seed}")
        run = load_config(args.config, overrides)
        run.train.validate()
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](run, args)
    except USER_ERRORS as e:
        print(f"lkrec {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, EvaluationError, OSError) as e:
        print(f"lkrec {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
