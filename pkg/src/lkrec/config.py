"""Training configuration and the flat ``key=value`` run-config format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or contradictory configuration."""


@dataclass(frozen=True)
class TrainConfig:
    neg_k: int = 4
    batch_size: int = 64
    lr: float = 1e-4
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    history_max: int = 50
    use_kg: bool = True
    use_llm: bool = True
    kg_hops: int = 2
    kg_max_neighbors: int = 20
    kg_num_heads: int = 3
    kg_query_source: str = "llm"
    kg_include_source_hop: bool = False
    d_word: int = 300
    d_gen: int = 400
    kg_out: int = 128
    llm_proj: int = 500
    entity_dim: int = 100
    llm_layers: int = 4
    vocab_min_freq: int = 2

    def validate(self) -> "TrainConfig":
        positive = (
            "neg_k batch_size max_epochs patience history_max kg_hops kg_max_neighbors "
            "kg_num_heads d_word d_gen kg_out llm_proj entity_dim llm_layers vocab_min_freq"
        ).split()
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.kg_query_source not in ("llm", "general"):
            raise ConfigError(f"kg.query_source must be 'llm' or 'general', got {self.kg_query_source!r}")
        if self.use_kg and not self.use_llm and self.kg_query_source == "llm":
            raise ConfigError("kg.query_source=llm requires use_llm=true (w/o LLM variant must query from general)")
        return self

    @property
    def kg_hop_slots(self) -> int:
        return self.kg_hops + (1 if self.kg_include_source_hop else 0)

    @property
    def news_dim(self) -> int:
        dim = self.d_gen
        if self.use_kg:
            dim += self.kg_out
        if self.use_llm:
            dim += self.llm_proj
        return dim

    def variant(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


# dotted run-config key -> TrainConfig field
TRAIN_KEYS = {
    "train.neg_k": "neg_k",
    "train.batch_size": "batch_size",
    "train.lr": "lr",
    "train.max_epochs": "max_epochs",
    "train.patience": "patience",
    "train.seed": "seed",
    "train.history_max": "history_max",
    "model.use_kg": "use_kg",
    "model.use_llm": "use_llm",
    "kg.hops": "kg_hops",
    "kg.max_neighbors": "kg_max_neighbors",
    "kg.num_heads": "kg_num_heads",
    "kg.query_source": "kg_query_source",
    "kg.include_source_hop": "kg_include_source_hop",
    "model.d_word": "d_word",
    "model.d_gen": "d_gen",
    "model.kg_out": "kg_out",
    "model.llm_proj": "llm_proj",
    "model.entity_dim": "entity_dim",
    "model.llm_layers": "llm_layers",
    "vocab.min_freq": "vocab_min_freq",
}
FIELD_TO_KEY = {v: k for k, v in TRAIN_KEYS.items()}

PATH_KEYS = (
    "data.news",
    "data.train_behaviors",
    "data.eval_behaviors",
    "data.entity_vec",
    "data.triples",
    "data.llm_embeddings",
    "data.word_vectors",
    "data.snapshot",
)

SYNTH_KEYS = {
    "synth.mode": str,
    "synth.news": int,
    "synth.users": int,
    "synth.topics": int,
    "synth.entities_per_topic": int,
    "synth.noise": float,
    "synth.llm_dim": int,
    "synth.history": int,
    "synth.train_impressions": int,
    "synth.eval_impressions": int,
    "synth.positives": int,
    "synth.negatives": int,
    "synth.eval_news_fraction": float,
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(field_name: str, text: str):
    kind = _FIELD_TYPES[field_name]
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{FIELD_TO_KEY[field_name]}: cannot parse {text!r}") from e
    return text.strip()


@dataclass
class RunConfig:
    """Flat run configuration: training knobs, file paths and synth knobs."""

    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=dict)
    synth: dict[str, object] = field(default_factory=dict)

    def set(self, key: str, value: str) -> None:
        key = key.strip()
        if key in TRAIN_KEYS:
            name = TRAIN_KEYS[key]
            self.train = replace(self.train, **{name: _coerce(name, value)})
        elif key in PATH_KEYS:
            self.paths[key] = value.strip()
        elif key in SYNTH_KEYS:
            try:
                self.synth[key] = SYNTH_KEYS[key](value.strip())
            except ValueError as e:
                raise ConfigError(f"{key}: cannot parse {value!r}") from e
        else:
            raise ConfigError(f"unknown config key {key!r}")

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            if required:
                raise ConfigError(f"missing required path {key}")
            return None
        return Path(value)

    def to_text(self) -> str:
        lines = [f"{FIELD_TO_KEY[f.name]}={_render(getattr(self.train, f.name))}" for f in fields(TrainConfig)]
        lines += [f"{k}={self.paths[k]}" for k in PATH_KEYS if k in self.paths]
        lines += [f"{k}={self.synth[k]}" for k in SYNTH_KEYS if k in self.synth]
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        cfg.set(key, value)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text(encoding="utf-8"), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg


def train_config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{FIELD_TO_KEY[f.name]}={_render(getattr(cfg, f.name))}\n" for f in fields(TrainConfig))


def train_config_from_text(text: str) -> TrainConfig:
    cfg = TrainConfig()
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = line.split("=", 1)
        if key not in TRAIN_KEYS:
            raise ConfigError(f"unknown key in stored config: {key!r}")
        name = TRAIN_KEYS[key]
        cfg = replace(cfg, **{name: _coerce(name, value)})
    return cfg
