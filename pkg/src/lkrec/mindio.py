"""MIND-format parsing, vocabulary, training samples and dataset snapshots."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
SNAPSHOT_MAGIC = "#LKSNAP"
SNAPSHOT_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+")


class FormatError(ValueError):
    """A file does not follow its documented layout."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class NewsRecord:
    news_id: str
    category: str
    subcategory: str
    title_tokens: tuple[str, ...]
    abstract_tokens: tuple[str, ...]
    entity_ids: tuple[str, ...]
    title: str = ""
    abstract: str = ""

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.title_tokens + self.abstract_tokens


@dataclass(frozen=True)
class Impression:
    impression_id: str
    user_id: str
    history: tuple[str, ...]
    candidates: tuple[tuple[str, int], ...]

    @property
    def labels(self) -> list[int]:
        return [lab for _, lab in self.candidates]


@dataclass(frozen=True)
class TrainSample:
    history: tuple[str, ...]
    positive: str
    negatives: tuple[str, ...]


@dataclass
class ClickDataset:
    news: dict[str, NewsRecord]
    train_impressions: list[Impression]
    eval_impressions: list[Impression]
    vocab: dict[str, int] = field(default_factory=dict)

    def token_ids(self, record: NewsRecord) -> list[int]:
        vocab = self.vocab
        return [vocab.get(w, UNK_ID) for w in record.tokens]

    def missing_news(self) -> list[str]:
        seen = set()
        for imp in self.train_impressions + self.eval_impressions:
            seen.update(imp.history)
            seen.update(n for n, _ in imp.candidates)
        return sorted(seen - set(self.news))


@dataclass
class ParseReport:
    warnings: list[str] = field(default_factory=list)

    def warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    def __len__(self) -> int:
        return len(self.warnings)


def _read_lines(path: str | Path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e


def _entity_ids(cell: str) -> list[str]:
    cell = cell.strip()
    if not cell:
        return []
    items = json.loads(cell)
    if not isinstance(items, list):
        raise ValueError("entity annotation is not a list")
    return [str(it["WikidataId"]) for it in items if isinstance(it, dict) and it.get("WikidataId")]


def parse_news_line(line: str) -> NewsRecord:
    cols = line.split("\t")
    if len(cols) < 8:
        raise ValueError(f"expected >= 8 columns, got {len(cols)}")
    news_id, cat, subcat, title, abstract, _url, t_ents, a_ents = cols[:8]
    if not news_id:
        raise ValueError("empty news id")
    ents = list(dict.fromkeys(_entity_ids(t_ents) + _entity_ids(a_ents)))
    return NewsRecord(
        news_id=news_id,
        category=cat,
        subcategory=subcat,
        title_tokens=tuple(tokenize(title)),
        abstract_tokens=tuple(tokenize(abstract)),
        entity_ids=tuple(ents),
        title=title,
        abstract=abstract,
    )


def parse_news_tsv(path: str | Path, report: ParseReport | None = None) -> dict[str, NewsRecord]:
    report = report if report is not None else ParseReport()
    out: dict[str, NewsRecord] = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        try:
            rec = parse_news_line(line)
        except (ValueError, KeyError, TypeError) as e:
            report.warn(f"{path}:{lineno}: skipped malformed news line ({e})")
            continue
        if rec.news_id in out:
            report.warn(f"{path}:{lineno}: duplicate news id {rec.news_id}, keeping first")
            continue
        out[rec.news_id] = rec
    return out


def parse_behaviors_line(line: str) -> Impression:
    cols = line.split("\t")
    if len(cols) < 5:
        raise ValueError(f"expected 5 columns, got {len(cols)}")
    imp_id, user, _time, hist, cands = cols[:5]
    cand_list = []
    for tok in cands.split():
        nid, sep, lab = tok.rpartition("-")
        if not sep or not nid or lab not in ("0", "1"):
            raise ValueError(f"candidate {tok!r} lacks a -0/-1 label")
        cand_list.append((nid, int(lab)))
    return Impression(imp_id, user, tuple(hist.split()), tuple(cand_list))


def parse_behaviors_tsv(path: str | Path, report: ParseReport | None = None) -> list[Impression]:
    report = report if report is not None else ParseReport()
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        try:
            out.append(parse_behaviors_line(line))
        except ValueError as e:
            report.warn(f"{path}:{lineno}: skipped behaviors line ({e})")
    return out


def parse_entity_vec(path: str | Path, dim: int = 100, report: ParseReport | None = None) -> dict[str, np.ndarray]:
    report = report if report is not None else ParseReport()
    table: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        cols = line.strip().split("\t")
        if len(cols) == 1 and not cols[0]:
            continue
        if len(cols) != dim + 1:
            report.warn(f"{path}:{lineno}: expected {dim + 1} columns, got {len(cols)}; skipped")
            continue
        try:
            vec = np.array([float(c) for c in cols[1:]], dtype=np.float64)
        except ValueError:
            report.warn(f"{path}:{lineno}: non-numeric value; skipped")
            continue
        if cols[0] in table:
            report.warn(f"{path}:{lineno}: duplicate entity {cols[0]}, last wins")
        table[cols[0]] = vec
    return table


def parse_triples_tsv(path: str | Path, report: ParseReport | None = None) -> list[tuple[str, str, str]]:
    report = report if report is not None else ParseReport()
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3 or not all(cols):
            report.warn(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail; skipped")
            continue
        out.append((cols[0], cols[1], cols[2]))
    return out


def build_vocab(news: dict[str, NewsRecord], impressions: list[Impression], min_freq: int = 2) -> dict[str, int]:
    """Vocabulary over news referenced by the training impressions.

    Id 0 is padding, id 1 the shared unknown word.  Words are ordered by
    descending frequency, then alphabetically, so ids are reproducible.
    """
    used: dict[str, None] = {}
    for imp in impressions:
        for nid in imp.history:
            used[nid] = None
        for nid, _ in imp.candidates:
            used[nid] = None
    counts: Counter[str] = Counter()
    for nid in used:
        rec = news.get(nid)
        if rec is not None:
            counts.update(rec.tokens)
    words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    vocab = {"<pad>": PAD_ID, UNK: UNK_ID}
    for w in words:
        vocab[w] = len(vocab)
    return vocab


def build_dataset(
    news_path, train_path, eval_path, min_freq: int = 2, report: ParseReport | None = None
) -> ClickDataset:
    report = report if report is not None else ParseReport()
    news = parse_news_tsv(news_path, report)
    train = parse_behaviors_tsv(train_path, report)
    evals = parse_behaviors_tsv(eval_path, report) if eval_path is not None else []
    train_ids = {imp.impression_id for imp in train}
    clash = [imp.impression_id for imp in evals if imp.impression_id in train_ids]
    if clash:
        report.warn(f"{len(clash)} eval impressions share ids with training; dropped from eval")
        evals = [imp for imp in evals if imp.impression_id not in train_ids]
    ds = ClickDataset(news, train, evals, build_vocab(news, train, min_freq))
    missing = ds.missing_news()
    if missing:
        report.warn(f"{len(missing)} referenced news ids are missing from the news file")
    return ds


def build_samples(
    impressions: list[Impression], k: int, seed: int, history_max: int = 50, report: ParseReport | None = None
) -> list[TrainSample]:
    """One sample per clicked candidate, negatives from the same impression."""
    if k < 1:
        raise ValueError("K must be >= 1")
    report = report if report is not None else ParseReport()
    rng = np.random.default_rng(seed)
    samples = []
    for imp in impressions:
        pos = [n for n, lab in imp.candidates if lab == 1]
        neg = [n for n, lab in imp.candidates if lab == 0]
        if not pos:
            continue
        neg_pool = [n for n in neg if n not in pos]
        if not neg_pool:
            report.warn(f"impression {imp.impression_id}: clicks but no negatives; skipped")
            continue
        hist = tuple(imp.history[-history_max:])
        for p in pos:
            if len(neg_pool) >= k:
                idx = rng.choice(len(neg_pool), size=k, replace=False)
            else:
                idx = rng.integers(0, len(neg_pool), size=k)
            samples.append(TrainSample(hist, p, tuple(neg_pool[i] for i in idx)))
    return samples


# ---------------------------------------------------------------- snapshot
#
# Line-oriented UTF-8 text:
#   #LKSNAP <version>
#   [vocab] <n>        then n lines  word<TAB>id
#   [news] <n>         then n lines  id cat subcat title abstract title_tokens abstract_tokens entities
#                      (token and entity lists space-separated)
#   [train] <n>        then n lines  impression_id user history candidates  (MIND behaviors, minus time)
#   [eval] <n>         same as [train]


def _imp_line(imp: Impression) -> str:
    cands = " ".join(f"{n}-{lab}" for n, lab in imp.candidates)
    return f"{imp.impression_id}\t{imp.user_id}\t{' '.join(imp.history)}\t{cands}"


def dumps_snapshot(ds: ClickDataset) -> str:
    out = [f"{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}", f"[vocab] {len(ds.vocab)}"]
    out += [f"{w}\t{i}" for w, i in ds.vocab.items()]
    out.append(f"[news] {len(ds.news)}")
    for nid in sorted(ds.news):
        r = ds.news[nid]
        out.append(
            "\t".join(
                [
                    r.news_id,
                    r.category,
                    r.subcategory,
                    r.title,
                    r.abstract,
                    " ".join(r.title_tokens),
                    " ".join(r.abstract_tokens),
                    " ".join(r.entity_ids),
                ]
            )
        )
    for tag, imps in (("train", ds.train_impressions), ("eval", ds.eval_impressions)):
        out.append(f"[{tag}] {len(imps)}")
        out += [_imp_line(imp) for imp in imps]
    return "\n".join(out) + "\n"


def loads_snapshot(text: str) -> ClickDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(SNAPSHOT_MAGIC):
        raise FormatError("not a dataset snapshot (bad header)")
    version = lines[0].split()[1] if len(lines[0].split()) > 1 else ""
    if version != str(SNAPSHOT_VERSION):
        raise FormatError(f"unsupported snapshot version {version!r}")
    pos = 1

    def section(name: str) -> list[str]:
        nonlocal pos
        head = lines[pos].split() if pos < len(lines) else []
        if len(head) != 2 or head[0] != f"[{name}]":
            raise FormatError(f"expected [{name}] section at line {pos + 1}")
        n = int(head[1])
        body = lines[pos + 1 : pos + 1 + n]
        if len(body) != n:
            raise FormatError(f"[{name}] section truncated")
        pos += 1 + n
        return body

    vocab = {}
    for ln in section("vocab"):
        w, i = ln.split("\t")
        vocab[w] = int(i)
    news = {}
    for ln in section("news"):
        c = ln.split("\t")
        if len(c) != 8:
            raise FormatError(f"bad news row {c[0]!r}")
        news[c[0]] = NewsRecord(
            news_id=c[0],
            category=c[1],
            subcategory=c[2],
            title=c[3],
            abstract=c[4],
            title_tokens=tuple(c[5].split()),
            abstract_tokens=tuple(c[6].split()),
            entity_ids=tuple(c[7].split()),
        )
    splits = []
    for name in ("train", "eval"):
        imps = []
        for ln in section(name):
            imp_id, user, hist, cands = ln.split("\t")
            imps.append(parse_behaviors_line(f"{imp_id}\t{user}\t\t{hist}\t{cands}"))
        splits.append(imps)
    return ClickDataset(news, splits[0], splits[1], vocab)


def write_snapshot(ds: ClickDataset, path: str | Path) -> None:
    Path(path).write_text(dumps_snapshot(ds), encoding="utf-8")


def read_snapshot(path: str | Path) -> ClickDataset:
    return loads_snapshot(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- MIND writers


def _entity_cell(ids) -> str:
    return json.dumps(
        [{"Label": e, "Type": "X", "WikidataId": e, "Confidence": 1.0, "OccurrenceOffsets": [], "SurfaceForms": []} for e in ids]
    )


def write_news_tsv(news: dict[str, NewsRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for nid in sorted(news):
            r = news[nid]
            fh.write(
                "\t".join([r.news_id, r.category, r.subcategory, r.title, r.abstract, "", _entity_cell(r.entity_ids), "[]"])
                + "\n"
            )


def write_behaviors_tsv(impressions: list[Impression], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for imp in impressions:
            cands = " ".join(f"{n}-{lab}" for n, lab in imp.candidates)
            fh.write(f"{imp.impression_id}\t{imp.user_id}\t-\t{' '.join(imp.history)}\t{cands}\n")


def write_entity_vec(table: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for eid in sorted(table):
            fh.write(eid + "\t" + "\t".join(repr(float(x)) for x in table[eid]) + "\n")


def write_triples_tsv(triples, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")
