"""JSON run configuration with dotted ``key=value`` overrides.

A config file is a JSON object with optional sections ``model``, ``loss``,
``noise``, ``train``, ``isp`` and ``nsma``. ``noise`` is either a sensor
calibration (``sensor``: path to a saved model) or an explicit range
(``a_min``, ``a_max``, optional ``logb_line`` as (slope, intercept) in natural
logs).
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional, Sequence

from .fanet import ModelConfig, teacher_config
from .losses import LossConfig
from .noise import DEFAULT_LOGB_LINE, SensorNoiseModel
from .tensor import ConfigError
from .training import TrainConfig

SECTIONS = ("model", "loss", "noise", "train", "isp", "nsma")

PRESETS: dict[str, dict] = {
    "default": {},
    # what a single CPU core trains in about ten minutes
    "desk": {"train": {"iterations": 5000, "batch": 8, "patch": 64, "max_lr": 1e-3, "synthetic_images": 64}},
    "teacher": {"model": teacher_config().to_json()},
}


@dataclass
class RunConfig:
    train: TrainConfig
    nsma_n: int = 4
    raw: dict = field(default_factory=dict)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    def resolved(self) -> dict:
        """Fully expanded config, suitable for a run manifest."""
        t = self.train
        return {
            "model": t.model.to_json(),
            "loss": {f.name: getattr(t.loss, f.name) for f in fields(t.loss)},
            "noise": t.noise.to_json(),
            "train": {k: getattr(t, k) for k in _TRAIN_KEYS},
            "isp": _isp_json(t.isp),
            "nsma": {"n": self.nsma_n},
        }


_TRAIN_KEYS = ("data_root", "synthetic_images", "image_size", "patch", "batch", "iterations", "max_lr", "seed",
               "checkpoint_every", "eval_every", "grad_clip")


def _isp_json(isp: dict) -> dict:
    out = {}
    for k, v in isp.items():
        out[k] = v.tolist() if hasattr(v, "tolist") else v
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, item: str) -> dict:
    """Set ``section.key=value`` in ``doc``. A bare ``key`` is looked up in
    the known section that defines it."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, _, value = item.partition("=")
    path = key.strip().split(".")
    if len(path) == 1:
        path = [_section_of(path[0]), path[0]]
    if path[0] not in SECTIONS:
        raise ConfigError(f"{key}: unknown section {path[0]!r} (expected one of {', '.join(SECTIONS)})")
    node = doc
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {part} is not a section")
    node[path[-1]] = _parse_value(value)
    return doc


def _section_of(key: str) -> str:
    owners = [s for s, keys in _known_keys().items() if key in keys]
    if len(owners) != 1:
        raise ConfigError(f"{key}: " + ("ambiguous key, qualify it with a section" if owners else "unknown key"))
    return owners[0]


def _known_keys() -> dict[str, set]:
    return {
        "model": {f.name for f in fields(ModelConfig)},
        "loss": {f.name for f in fields(LossConfig)},
        "noise": {"a_min", "a_max", "logb_line", "sensor"},
        "train": set(_TRAIN_KEYS),
        "isp": {"wb", "ccm", "gamma"},
        "nsma": {"n"},
    }


def _check_keys(doc: dict) -> None:
    known = _known_keys()
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: must be an object")
        for k in body:
            if k not in known[section]:
                raise ConfigError(f"{section}.{k}: unknown key")


def _noise(section: dict, base_dir: str) -> SensorNoiseModel:
    if "sensor" in section:
        path = section["sensor"]
        path = path if os.path.isabs(path) else os.path.join(base_dir, path)
        try:
            model = SensorNoiseModel.load(path)
        except OSError as e:
            raise ConfigError(f"noise.sensor: cannot read {path}: {e}") from e
    else:
        model = SensorNoiseModel.from_a_range(1e-4, 1e-2, DEFAULT_LOGB_LINE)
    if "a_min" in section or "a_max" in section:
        a_min = float(section.get("a_min", model.a_min))
        a_max = float(section.get("a_max", model.a_max))
        if not a_min > 0:
            raise ConfigError("noise.a_min: a_min > 0")
        if not a_min < a_max:
            raise ConfigError(f"noise.a_min: a_min < a_max required, got {a_min} >= {a_max}")
        model = model.with_a_range(a_min, a_max)
    if "logb_line" in section:
        line = section["logb_line"]
        if len(line) != 2 or not all(math.isfinite(float(v)) for v in line):
            raise ConfigError("noise.logb_line: expected [slope, intercept]")
        model = SensorNoiseModel(model.log_a_range, (float(line[0]), float(line[1])), model.gain_to_a,
                                 model.gain_to_b, model.gain_range)
    return model


def _isp(section: dict) -> dict:
    import numpy as np

    out = {}
    if "wb" in section:
        wb = section["wb"]
        if len(wb) != 3 or min(wb) <= 0:
            raise ConfigError("isp.wb: three positive gains")
        out["wb"] = tuple(float(v) for v in wb)
    if "ccm" in section:
        ccm = np.asarray(section["ccm"], dtype=np.float64)
        if ccm.shape != (3, 3):
            raise ConfigError("isp.ccm: 3x3 matrix")
        out["ccm"] = ccm
    if "gamma" in section:
        out["gamma"] = bool(section["gamma"])
    return out


def _build(section: dict, cls, prefix: str):
    try:
        return cls(**section)
    except ConfigError:
        raise
    except TypeError as e:
        raise ConfigError(f"{prefix}: {e}") from e


def build(doc: dict, base_dir: str = ".") -> RunConfig:
    """Typed configs from a parsed document; every embedded type is validated."""
    _check_keys(doc)
    model = _build(doc.get("model", {}), ModelConfig, "model")
    loss_doc = dict(doc.get("loss", {}))
    if loss_doc.get("teacher") and not os.path.isabs(loss_doc["teacher"]):
        loss_doc["teacher"] = os.path.join(base_dir, loss_doc["teacher"])
    loss = _build(loss_doc, LossConfig, "loss")
    noise = _noise(doc.get("noise", {}), base_dir)
    tdoc = dict(doc.get("train", {}))
    if tdoc.get("data_root") and not os.path.isabs(tdoc["data_root"]):
        tdoc["data_root"] = os.path.join(base_dir, tdoc["data_root"])
    for k, v in tdoc.items():
        if k in ("batch", "iterations", "patch", "seed", "synthetic_images", "image_size", "checkpoint_every",
                 "eval_every") and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConfigError(f"train.{k}: expected an integer, got {v!r}")
    train = _build({**tdoc, "model": model, "loss": loss, "noise": noise, "isp": _isp(doc.get("isp", {}))},
                   TrainConfig, "train")
    n = doc.get("nsma", {}).get("n", 4)
    if not isinstance(n, int) or n < 1:
        raise ConfigError("nsma.n: n ≥ 1")
    return RunConfig(train, n, doc)


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``path`` (a JSON file or a preset name), apply overrides, validate.

    ``None`` means the ``default`` preset. A missing file raises
    ``FileNotFoundError``.
    """
    base_dir = "."
    if path is None or path in PRESETS:
        doc = copy.deepcopy(PRESETS[path or "default"])
    else:
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base_dir = os.path.dirname(os.path.abspath(path))
        if "preset" in doc:
            preset = doc.pop("preset")
            if preset not in PRESETS:
                raise ConfigError(f"preset: unknown preset {preset!r}")
            doc = _deep_merge(PRESETS[preset], doc)
    for item in overrides:
        apply_override(doc, item)
    return build(doc, base_dir)
