"""Run configuration: flat ``section.key=value`` text with command-line overrides.

Example::

    data.manifest=corpus/manifest.csv
    data.target_hw=16,16
    data.n_slices=12
    model.widths=8,16,32,32
    train.lr0=1e-4
    threads=1

Unknown keys are rejected.  Every default is the published protocol value
where one exists.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import PipelineConfig
from .models import RESNET18_2D, RESNET18_3D, ResNetConfig
from .training import ConfigError, TrainConfig


def _int_tuple(v: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in v.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {v!r}") from exc


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _halve(v: str) -> float:
    return float("inf") if v.strip().lower() in ("inf", "never", "none") else float(v)


# key -> (parser, default); None default means "depends on model kind"
KEYS: dict[str, tuple] = {
    "data.manifest": (str, ""),
    "data.axis": (int, 2),
    "data.target_hw": (_int_tuple, (50, 50)),
    "data.n_slices": (int, 36),
    "data.normalize_by": (str, "std"),
    "model.pool_k": (int, 3),
    "model.hidden": (int, 64),
    "model.widths": (_int_tuple, (64, 128, 256, 512)),
    "model.blocks": (_int_tuple, (2, 2, 2, 2)),
    "model.stem_kernel": (int, None),
    "model.stem_stride": (int, 2),
    "model.maxpool": (_bool, True),
    "model.seed": (int, 0),
    "train.lr0": (float, 1e-4),
    "train.halve_every": (_halve, 15.0),
    "train.epochs": (int, 60),
    "train.batch_size": (int, 1),
    "train.seed": (int, 0),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.checkpoint_every": (int, 15),
    "threads": (int, 0),
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        """Read ``path`` (optional), apply overrides and ``SSAR_THREADS``, validate everything."""
        raw: dict[str, str] = {}
        base = Path(".")
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            raw.update(parse_text(p.read_text(), str(p)))
            base = p.parent
        raw.update(overrides or {})
        env_threads = os.environ.get("SSAR_THREADS")
        if env_threads:
            raw["threads"] = env_threads
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, (parse, default) in KEYS.items():
            if key in raw:
                try:
                    values[key] = parse(raw[key])
                except (ValueError, ConfigError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
            else:
                values[key] = default
        cfg = cls(values, base)
        cfg.pipeline()
        cfg.train_config()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def manifest_path(self) -> Path | None:
        m = self.values["data.manifest"]
        if not m:
            return None
        p = Path(m)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def threads(self) -> int:
        return self.values["threads"]

    def pipeline(self) -> PipelineConfig:
        v = self.values
        hw = v["data.target_hw"]
        if len(hw) != 2:
            raise ConfigError(f"data.target_hw needs two values, got {hw}")
        try:
            return PipelineConfig(v["data.axis"], hw, v["data.n_slices"], v["data.normalize_by"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k[len("train.") :]: v for k, v in self.values.items() if k.startswith("train.")})

    def backbone(self, kind: str) -> ResNetConfig:
        v = self.values
        base = RESNET18_3D if kind == "vol3d" else RESNET18_2D
        try:
            return ResNetConfig(
                in_channels=1,
                widths=v["model.widths"],
                blocks=v["model.blocks"],
                stem_kernel=v["model.stem_kernel"] or base.stem_kernel,
                stem_stride=v["model.stem_stride"],
                maxpool=v["model.maxpool"],
                nd=base.nd,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_kwargs(self, kind: str) -> dict:
        kw = {"backbone": self.backbone(kind), "seed": self.values["model.seed"]}
        if kind == "sliceseq":
            kw.update(pool_k=self.values["model.pool_k"], hidden=self.values["model.hidden"])
        return kw

    def resolved(self) -> dict:
        """JSON-friendly snapshot of every setting."""
        out = {}
        for k, v in self.values.items():
            out[k] = list(v) if isinstance(v, tuple) else (str(v) if v == float("inf") else v)
        return out

    def to_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)
