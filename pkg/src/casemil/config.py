"""Run configuration: line-oriented ``section.key = value`` files with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .casedata import CASE_SHAPES, SyntheticConfig
from .featurenet import NetConfig
from .milpool import VALID_SPECS, PoolingSpec, SpecError
from .model import ModelConfig
from .training import SCHEMES, TrainConfig

SECTIONS = ("dataset", "model", "training", "eval", "seeds")


class ConfigError(ValueError):
    def __init__(self, msg: str, key: str | None = None, line: int | None = None):
        where = "".join([f"line {line}: " if line else "", f"{key}: " if key else ""])
        super().__init__(where + msg)
        self.key = key
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _optional_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _shape_mass(text: str) -> dict[str, float]:
    """``4-std:0.7, 1L/1R:0.3`` -> {shape: mass}."""
    out = {}
    for tok in text.split(","):
        if not tok.strip():
            continue
        name, _, val = tok.rpartition(":")
        name = name.strip()
        if name not in CASE_SHAPES:
            raise ValueError(f"unknown case shape {name!r}; valid: {', '.join(CASE_SHAPES)}")
        out[name] = float(val)
    return out


def _choice(options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


def _spec(text: str) -> str:
    try:
        return str(PoolingSpec.parse(text))
    except SpecError:
        raise ValueError(f"invalid pooling spec {text.strip()!r}; valid: {', '.join(VALID_SPECS)}") from None


_net = NetConfig()
_model = ModelConfig()
_train = TrainConfig()
_syn = SyntheticConfig()

# key -> (parser, default); dataset keys have no defaults that make a dataset on their own
SCHEMA: dict[str, tuple] = {
    "dataset.manifest": (str, None),
    "dataset.dir": (str, None),
    "dataset.train": (str, None),
    "dataset.val": (str, None),
    "dataset.test": (str, None),
    "dataset.synthetic": (_bool, False),
    "dataset.synthetic.n_cases": (int, _syn.n_cases),
    "dataset.synthetic.malignant_fraction": (float, _syn.malignant_fraction),
    "dataset.synthetic.lesion_contrast": (float, _syn.lesion_contrast),
    "dataset.synthetic.view_counts": (_shape_mass, dict(_syn.view_count_distribution)),
    "dataset.synthetic.split_fractions": (_floats, tuple(_syn.split_fractions)),
    "dataset.synthetic.split_sizes": (_ints, None),
    "model.pooling": (_spec, _model.pooling),
    "model.t_fraction": (float, _model.t_fraction),
    "model.k": (int, _model.k),
    "model.channels": (_ints, tuple(_net.channels_per_stage)),
    "model.embed_dim": (int, _net.embed_dim),
    "model.hidden_dim": (int, _model.hidden_dim),
    "model.patch_size": (int, _model.patch_size),
    "model.image_height": (int, _model.image_height),
    "model.image_width": (int, _model.image_width),
    "training.optimizer": (_choice(("adam", "sgd")), _train.optimizer),
    "training.lr": (float, _train.lr),
    "training.weight_decay": (float, _train.weight_decay),
    "training.momentum": (float, _train.momentum),
    "training.beta": (float, _train.beta),
    "training.pos_weight": (_optional_float, _train.pos_weight),
    "training.batch_size": (int, _train.batch_size),
    "training.max_epochs": (int, _train.max_epochs),
    "training.patience": (int, _train.patience),
    "training.scheme": (_choice(SCHEMES), _train.scheme),
    "training.eval_batch_size": (int, _train.eval_batch_size),
    "eval.roi_match_threshold": (float, 0.1),
    "eval.attention_threshold": (float, 0.25),
    "eval.probability_threshold": (float, 0.5),
    "seeds.init": (int, 0),
    "seeds.data": (int, 0),
    "seeds.shuffle": (int, 0),
}


def _render(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ", ".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # only the keys that were set explicitly
    source: str | None = None

    def get(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def is_set(self, key: str) -> bool:
        return key in self.values

    def set(self, key: str, text: str, line: int | None = None) -> None:
        key = key.strip()
        if key not in SCHEMA:
            section = key.split(".", 1)[0]
            what = "unknown section" if section not in SECTIONS else "unknown key"
            raise ConfigError(what, key, line)
        try:
            self.values[key] = SCHEMA[key][0](text.strip())
        except ValueError as exc:
            raise ConfigError(str(exc), key, line) from None

    # -- typed views

    def model_config(self) -> ModelConfig:
        g = self.get
        return ModelConfig(net=NetConfig(channels_per_stage=tuple(g("model.channels")), embed_dim=g("model.embed_dim")),
                           pooling=g("model.pooling"), t_fraction=g("model.t_fraction"), k=g("model.k"),
                           image_height=g("model.image_height"), image_width=g("model.image_width"),
                           patch_size=g("model.patch_size"), hidden_dim=g("model.hidden_dim"))

    def train_config(self) -> TrainConfig:
        g = self.get
        try:
            return TrainConfig(optimizer=g("training.optimizer"), lr=g("training.lr"),
                               weight_decay=g("training.weight_decay"), momentum=g("training.momentum"),
                               beta=g("training.beta"), pos_weight=g("training.pos_weight"),
                               batch_size=g("training.batch_size"), max_epochs=g("training.max_epochs"),
                               patience=g("training.patience"), scheme=g("training.scheme"),
                               shuffle_seed=g("seeds.shuffle"), eval_batch_size=g("training.eval_batch_size"))
        except ValueError as exc:
            raise ConfigError(str(exc), "training") from None

    def synthetic_config(self) -> SyntheticConfig:
        g = self.get
        sizes = g("dataset.synthetic.split_sizes")
        cfg = SyntheticConfig(n_cases=g("dataset.synthetic.n_cases"), image_height=g("model.image_height"),
                              image_width=g("model.image_width"),
                              malignant_fraction=g("dataset.synthetic.malignant_fraction"),
                              view_count_distribution=dict(g("dataset.synthetic.view_counts")),
                              lesion_contrast=g("dataset.synthetic.lesion_contrast"), seed=g("seeds.data"),
                              split_fractions=tuple(g("dataset.synthetic.split_fractions")),
                              split_sizes=None if sizes is None else tuple(sizes))
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc), "dataset.synthetic") from None
        return cfg

    def to_text(self, explicit_only: bool = False) -> str:
        keys = sorted(self.values) if explicit_only else list(SCHEMA)
        lines = []
        for k in keys:
            v = self.get(k)
            if v is None and not self.is_set(k) and k.startswith("dataset."):
                continue
            lines.append(f"{k} = {_render(v)}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str | None = None) -> RunConfig:
    cfg = RunConfig(source=source)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", line=lineno)
        key, value = line.split("=", 1)
        if key.strip() in cfg.values:
            raise ConfigError("key set twice", key.strip(), lineno)
        cfg.set(key, value, lineno)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
