"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

Example::

    seed = 3
    [data]
    train_frames = 800
    [model]
    widths = 16, 32, 48, 48, 48, 48

Keys before the first header belong to the ``run`` section. ``#`` starts a
comment. Every value is validated against the field's type and errors carry
the offending line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass
class DataSection:
    plane_h: int = 96
    plane_w: int = 192
    train_frames: int = 800
    test_frames: int = 100
    train_seed_base: int = 0
    test_seed_base: int = 1_000_000
    light_fog_visibility: float = 300.0
    dense_fog_visibility: float = 40.0
    snow_rate: float = 300.0
    dataset: str = ""

    @property
    def plane(self) -> tuple[int, int]:
        return (self.plane_h, self.plane_w)


@dataclass
class ModelSection:
    mode: str = "entropy_deep"
    widths: tuple[int, ...] = (16, 32, 48, 48, 48, 48)
    stem_width: int = 8
    num_classes: int = 2
    exchange: str = "residual"


@dataclass
class AnchorSection:
    scale_min: float = 0.08
    scale_max: float = 0.8
    aspect_ratios: tuple[float, ...] = (1.0, 0.5, 2.0)
    match_threshold: float = 0.5


@dataclass
class TrainSection:
    epochs: int = 3
    batch_size: int = 8
    optimizer: str = "adam"
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    dropout_p: float = 0.5
    mining_ratio: float = 5.0
    flip: bool = True
    checkpoint: str = ""


@dataclass
class EvalSection:
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_det: int = 100
    pre_nms_top_k: int = 200
    iou_thresh: float = 0.5
    difficulty: str = "moderate"


@dataclass
class EntropySection:
    patch_m: int = 16
    patch_n: int = 16
    scenes: int = 50
    visibilities: tuple[float, ...] = (float("inf"), 50.0, 40.0, 30.0)
    ambients: tuple[float, ...] = (1.0, 0.0)
    write_maps: bool = False


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    entropy: EntropySection = field(default_factory=EntropySection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` overrides, e.g. ``train={"epochs": 0}``."""
        kw = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            kw[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
        unknown = set(sections) - set(kw)
        if unknown:
            raise ConfigError(f"unknown section(s) {sorted(unknown)}")
        return RunConfig(**kw)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"[{f.name}]")
            sec = getattr(self, f.name)
            for sf in fields(sec):
                lines.append(f"{sf.name} = {_format(getattr(sec, sf.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """Stable hash of every setting except output locations."""
        text = "\n".join(l for l in self.dumps().splitlines() if not l.startswith(("out =", "dataset =", "checkpoint =")))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float) and v == float("inf"):
        return "inf"
    return str(v)


def _convert(raw: str, template, name: str, line: int, path: str | None):
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            elem = type(template[0]) if template else str
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if not items:
                raise ValueError
            return tuple(elem(x) for x in items)
        return raw
    except ValueError:
        kind = type(template).__name__ if not isinstance(template, tuple) else "comma-separated list"
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}", line, path) from None


def parse_config(text: str, path: str | None = None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    sections = {f.name: dataclasses.asdict(getattr(cfg, f.name)) for f in fields(cfg)}
    current = "run"
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"malformed section header {s!r}", lineno, path)
            current = s[1:-1].strip()
            if current not in sections:
                raise ConfigError(f"unknown section [{current}]; expected one of {sorted(sections)}", lineno, path)
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", lineno, path)
        key, raw = (x.strip() for x in s.split("=", 1))
        if key not in sections[current]:
            raise ConfigError(f"unknown key {key!r} in [{current}]", lineno, path)
        template = getattr(getattr(cfg, current), key)
        sections[current][key] = _convert(raw, template, f"{current}.{key}", lineno, path)
    try:
        out = RunConfig(**{name: type(getattr(cfg, name))(**vals) for name, vals in sections.items()})
    except TypeError as e:
        raise ConfigError(str(e), None, path) from None
    validate(out, path)
    return out


def validate(cfg: RunConfig, path: str | None = None) -> None:
    def bad(msg):
        raise ConfigError(msg, None, path)

    d = cfg.data
    if d.plane_h <= 0 or d.plane_w <= 0 or d.plane_h % 4 or d.plane_w % 4:
        bad(f"data.plane must be positive multiples of 4, got {d.plane_h}x{d.plane_w}")
    if d.train_frames < 0 or d.test_frames < 0:
        bad("data frame counts must be >= 0")
    if not d.dense_fog_visibility < 100 or not 100 <= d.light_fog_visibility < 1000:
        bad("dense fog needs visibility < 100 m and light fog 100..1000 m")
    if len(cfg.model.widths) != 6:
        bad(f"model.widths needs 6 entries, got {len(cfg.model.widths)}")
    if cfg.model.exchange not in ("residual", "replace"):
        bad(f"model.exchange must be residual or replace, got {cfg.model.exchange!r}")
    t = cfg.train
    if t.epochs < 0 or t.batch_size < 1:
        bad("train.epochs must be >= 0 and train.batch_size >= 1")
    if not 0.0 <= t.dropout_p <= 1.0:
        bad(f"train.dropout_p must lie in [0, 1], got {t.dropout_p}")
    if t.optimizer not in ("sgd", "adam"):
        bad(f"train.optimizer must be sgd or adam, got {t.optimizer!r}")
    if t.learning_rate <= 0 or t.weight_decay < 0:
        bad("train.learning_rate must be > 0 and train.weight_decay >= 0")
    if cfg.eval.difficulty not in ("easy", "moderate", "hard"):
        bad(f"eval.difficulty must be easy, moderate or hard, got {cfg.eval.difficulty!r}")


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(p)) from None
    return parse_config(text, str(p))
