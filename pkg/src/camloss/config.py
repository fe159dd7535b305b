"""Plain ``key = value`` run configuration with typed, closed key set."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import losses as L
from . import network as N
from . import trainer as TR


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _blocks(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in text.split(","):
        width, _, stride = part.strip().partition(":")
        out.append((int(width), int(stride or 1)))
    return tuple(out)


def _blocks_str(blocks) -> str:
    return ",".join(f"{c}:{s}" for c, s in blocks)


_OPTIONAL = object()

# key -> (parser, default); _OPTIONAL marks keys with no default
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "out": (str, "runs/default"),
    "data.kind": (str, "shapes"),
    "data.path": (str, _OPTIONAL),
    "data.test_path": (str, _OPTIONAL),
    "data.train_count": (int, 2000),
    "data.test_count": (int, 500),
    "data.classes": (int, 4),
    "data.size": (int, 64),
    "data.clutter": (int, 3),
    "data.seed": (int, 0),
    "net.blocks": (_blocks, "8:1,16:2,32:2,64:2"),
    "net.width": (float, 1.0),
    "train.epochs": (int, 40),
    "train.batch_size": (int, 64),
    "train.lr": (float, 0.05),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.loss": (str, TR.CAMLOSS),
    "train.detach_cam_target": (_bool, "false"),
    "train.augment": (_bool, "true"),
    "alpha.t": (int, 20),
    "alpha.c": (float, 3.0),
    "alpha.adaptive": (_bool, "false"),
    "distill.method": (str, L.CCM),
    "distill.tau": (float, _OPTIONAL),
    "distill.beta": (float, _OPTIONAL),
    "distill.gamma": (float, _OPTIONAL),
    "distill.at_metric": (str, _OPTIONAL),
    "distill.teacher": (str, _OPTIONAL),
    "checkpoint": (str, _OPTIONAL),
    "export.indices": (str, "0,1,2,3"),
}

# the offset that separates the test split's per-sample streams from training
TEST_SEED_OFFSET = 1_000_003


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values.get(key)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self.values.get(k) in (None, "")]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    def network_config(self, class_count: int, channels: int, size: int) -> N.NetworkConfig:
        cfg = N.NetworkConfig(channels, size, class_count, self.values["net.blocks"])
        if self.values["net.width"] != 1.0:
            cfg = cfg.scaled(self.values["net.width"])
        return cfg

    def train_config(self) -> TR.TrainConfig:
        v = self.values
        return TR.TrainConfig(
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            lr=v["train.lr"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            alpha=L.AlphaSchedule(v["alpha.t"], v["alpha.c"], v["alpha.adaptive"]),
            seed=v["seed"],
            loss=v["train.loss"],
            detach_cam_target=v["train.detach_cam_target"],
            augment=v["train.augment"],
        )

    def distill_config(self) -> L.DistillConfig:
        v = self.values
        preset = L.DistillConfig.preset(v["distill.method"])
        return L.DistillConfig(
            v["distill.method"],
            preset.tau if v["distill.tau"] is None else v["distill.tau"],
            preset.beta if v["distill.beta"] is None else v["distill.beta"],
            preset.gamma if v["distill.gamma"] is None else v["distill.gamma"],
            preset.at_metric if v["distill.at_metric"] is None else v["distill.at_metric"],
        )

    def dump(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if value is None:
                continue
            if key == "net.blocks":
                value = _blocks_str(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``; every key is type-checked."""
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(parse_lines(Path(path).read_text(), str(path)))
    raw.update(overrides or {})
    unknown = sorted(k for k in raw if k not in SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {}
    for key, (parse, default) in SCHEMA.items():
        text = raw.get(key, default)
        if text is _OPTIONAL:
            values[key] = None
            continue
        try:
            values[key] = parse(text) if isinstance(text, str) else text
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    if values["train.loss"] not in (TR.CE, TR.CAMLOSS):
        raise ConfigError(f"train.loss must be 'ce' or 'camloss', got {values['train.loss']!r}")
    if values["distill.method"] not in (L.KD, L.AT, L.CCM):
        raise ConfigError(f"distill.method must be kd, at or ccm, got {values['distill.method']!r}")
    if values["data.kind"] not in ("shapes", "cifar10", "cache"):
        raise ConfigError(f"data.kind must be shapes, cifar10 or cache, got {values['data.kind']!r}")
    return RunConfig(values, raw)
