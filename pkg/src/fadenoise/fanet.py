"""Feature-Align U-Net on packed RAW input.

Dataflow for ``scales = S`` (widths ``w_s = base_width * 2**s``)::

    stem 3x3 (4 -> w0) -> relu
    enc0   ARNet(w0)            + Feature-Align     -> skip0 (pointwise shrink)
    down_s ARNet(w_{s-1} -> w_s, stride 2) + FA     -> skip_s   (0 < s < S-1)
    down_{S-1}, mid ARNet(w_{S-1})  + FA            (bottleneck)
    up_s   pointwise (w_{s+1} -> w_s), nearest x2, + replicated skip_s
    dec_s  ARNet(w_s) + FA
    head 3x3 (w0 -> 4); output = input + head

All weights live in a flat ``dict[str, Tensor]`` keyed by layer path
(``"enc0.expand.w"``, ``"dec1.fa.gamma.b"``, ...).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, fdt, no_grad
from .tensor import ops

if TYPE_CHECKING:
    from .training import AdamState

Weights = dict[str, Tensor]


@dataclass
class ModelConfig:
    scales: int = 3
    base_width: int = 16
    expansion: int = 2
    groups: int = 4
    skip_shrink_channels: int = 4
    fa_hidden: int = 16
    feature_align: bool = True
    skips: bool = True
    # fixed rescale of the k-sigma input inside the network; the residual is scaled back
    input_scale: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scales < 2:
            raise ConfigError("model.scales: scales >= 2")
        if self.base_width < 1 or self.base_width % self.groups:
            raise ConfigError(f"model.base_width: must be divisible by groups ({self.groups})")
        if self.expansion < 1:
            raise ConfigError("model.expansion: expansion >= 1")
        if self.skip_shrink_channels < 1:
            raise ConfigError("model.skip_shrink_channels: skip_shrink_channels >= 1")
        if self.fa_hidden < 1:
            raise ConfigError("model.fa_hidden: fa_hidden >= 1")
        if not self.input_scale > 0:
            raise ConfigError("model.input_scale: input_scale > 0")

    def width(self, s: int) -> int:
        return self.base_width * 2 ** s

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def teacher_config() -> ModelConfig:
    """Large plain U-Net used as the distillation teacher."""
    return ModelConfig(scales=4, base_width=64, expansion=2, groups=1, skip_shrink_channels=64,
                       fa_hidden=16, feature_align=False)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    groups: int = 1
    scale: int = 0  # resolution level of the conv *output*; 0 = packed input


def _arnet_specs(name, c_in, c_out, stride, scale, cfg) -> list[ConvSpec]:
    hid = c_in * cfg.expansion
    return [
        ConvSpec(f"{name}.expand", c_in, hid, 1, 1, 1, scale - (stride == 2)),
        ConvSpec(f"{name}.group", hid, hid, 3, stride, cfg.groups, scale),
        ConvSpec(f"{name}.project", hid, c_out, 1, 1, 1, scale),
    ]


def _fa_specs(name, channels, scale, cfg) -> list[ConvSpec]:
    if not cfg.feature_align:
        return []
    return [
        ConvSpec(f"{name}.fa.trunk", 4, cfg.fa_hidden, 3, 1, 1, scale),
        ConvSpec(f"{name}.fa.gamma", cfg.fa_hidden, channels, 1, 1, 1, scale),
        ConvSpec(f"{name}.fa.beta", cfg.fa_hidden, channels, 1, 1, 1, scale),
    ]


def layer_specs(cfg: ModelConfig) -> list[ConvSpec]:
    S = cfg.scales
    w = cfg.width
    sk = cfg.skip_shrink_channels
    specs = [ConvSpec("stem", 4, w(0), 3)]
    specs += _arnet_specs("enc0", w(0), w(0), 1, 0, cfg) + _fa_specs("enc0", w(0), 0, cfg)
    if cfg.skips:
        specs.append(ConvSpec("skip0", w(0), sk, 1))
    for s in range(1, S):
        specs += _arnet_specs(f"down{s}", w(s - 1), w(s), 2, s, cfg) + _fa_specs(f"down{s}", w(s), s, cfg)
        if s < S - 1 and cfg.skips:
            specs.append(ConvSpec(f"skip{s}", w(s), sk, 1, scale=s))
    specs += _arnet_specs("mid", w(S - 1), w(S - 1), 1, S - 1, cfg) + _fa_specs("mid", w(S - 1), S - 1, cfg)
    for s in range(S - 2, -1, -1):
        # pointwise conv runs before the nearest upsample; the two commute
        specs.append(ConvSpec(f"up{s}", w(s + 1), w(s), 1, scale=s + 1))
        specs += _arnet_specs(f"dec{s}", w(s), w(s), 1, s, cfg) + _fa_specs(f"dec{s}", w(s), s, cfg)
    specs.append(ConvSpec("head", w(0), 4, 3))
    return specs


def _zero_init(name: str) -> bool:
    return name == "head" or name.endswith(".fa.gamma") or name.endswith(".fa.beta")


def init_weights(cfg: ModelConfig, seed=0, dtype=np.float32) -> Weights:
    """Kaiming fan-in init; biases, Feature-Align heads and the head start at zero."""
    rng = np.random.default_rng(seed)
    weights: Weights = {}
    for sp in layer_specs(cfg):
        shape = (sp.c_out, sp.c_in // sp.groups, sp.k, sp.k)
        fan_in = shape[1] * sp.k * sp.k
        if _zero_init(sp.name):
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        weights[f"{sp.name}.w"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{sp.name}.w")
        weights[f"{sp.name}.b"] = Tensor(np.zeros(sp.c_out, dtype=dtype), requires_grad=True, name=f"{sp.name}.b")
    return weights


def _conv(x: Tensor, weights: Weights, name: str, stride=1, groups=1) -> Tensor:
    w = weights[f"{name}.w"]
    return ops.conv2d(x, w, weights[f"{name}.b"], stride=stride, pad=w.shape[-1] // 2, groups=groups)


def arnet_block(x: Tensor, weights: Weights, name: str, stride: int = 1, groups: int = 1) -> Tensor:
    """Pointwise expand -> relu -> 3x3 group conv -> relu -> pointwise project.

    Adds the input back when the block keeps both resolution and width.
    """
    c_in = x.shape[1]
    if c_in % groups:
        raise ShapeError(f"{name}: {c_in} channels not divisible by groups={groups}")
    h = ops.relu(_conv(x, weights, f"{name}.expand"))
    h = ops.relu(_conv(h, weights, f"{name}.group", stride=stride, groups=groups))
    out = _conv(h, weights, f"{name}.project")
    if stride == 1 and out.shape == x.shape:
        out = ops.add(out, x)
    return out


def feature_align(feat: Tensor, noisy: Tensor, weights: Weights, name: str) -> Tensor:
    """Modulate ``feat`` by a per-element scale and bias predicted from ``noisy``.

    ``G = (1 + gamma) * F + beta``; zero head weights give ``G = F`` exactly.
    """
    if noisy.shape[2:] != feat.shape[2:] or noisy.shape[0] != feat.shape[0]:
        raise ShapeError(f"{name}: noisy input {noisy.shape} does not match features {feat.shape}")
    h = ops.relu(_conv(noisy, weights, f"{name}.fa.trunk"))
    gamma = _conv(h, weights, f"{name}.fa.gamma")
    beta = _conv(h, weights, f"{name}.fa.beta")
    return ops.add(ops.add(feat, ops.mul(gamma, feat)), beta)


def shrink_skip(enc_feat: Tensor, weights: Weights, name: str) -> Tensor:
    return _conv(enc_feat, weights, name)


def expand_skip(shrunk: Tensor, target_channels: int) -> Tensor:
    """Replicate channels cyclically, e.g. 2 -> 5 gives (c0, c1, c0, c1, c0)."""
    c = shrunk.shape[1]
    return ops.take_channels(shrunk, [i % c for i in range(target_channels)])


def _maybe_fa(x, pyr, weights, name, cfg, s):
    return feature_align(x, pyr[s], weights, name) if cfg.feature_align else x


def check_input(cfg: ModelConfig, x: Tensor) -> None:
    if x.data.ndim != 4 or x.shape[1] != 4:
        raise ShapeError(f"expected packed input (N, 4, h, w), got {x.shape}")
    m = 2 ** (cfg.scales - 1)
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(
            f"packed dims {x.shape[2:]} must be divisible by {m} (Bayer dims by 2**scales={2 * m})")


def forward(cfg: ModelConfig, weights: Weights, noisy: Tensor, return_features: bool = False):
    """Denoise a k-sigma-transformed packed RAW batch.

    With ``return_features`` the encoder activation at every scale is
    returned as well (used by the feature-matching losses).
    """
    check_input(cfg, noisy)
    S = cfg.scales
    x_in = ops.scale(noisy, cfg.input_scale)
    pyr = [x_in]
    if cfg.feature_align:
        for _ in range(1, S):
            pyr.append(ops.avg_pool2d(pyr[-1], 2))

    feats = []
    skips: dict[int, Tensor] = {}
    x = ops.relu(_conv(x_in, weights, "stem"))
    x = _maybe_fa(arnet_block(x, weights, "enc0", 1, cfg.groups), pyr, weights, "enc0", cfg, 0)
    feats.append(x)
    if cfg.skips:
        skips[0] = shrink_skip(x, weights, "skip0")
    for s in range(1, S):
        x = _maybe_fa(arnet_block(x, weights, f"down{s}", 2, cfg.groups), pyr, weights, f"down{s}", cfg, s)
        if s < S - 1:
            feats.append(x)
            if cfg.skips:
                skips[s] = shrink_skip(x, weights, f"skip{s}")
    x = _maybe_fa(arnet_block(x, weights, "mid", 1, cfg.groups), pyr, weights, "mid", cfg, S - 1)
    feats.append(x)
    for s in range(S - 2, -1, -1):
        x = ops.upsample_nearest(_conv(x, weights, f"up{s}"), 2)
        if cfg.skips:
            x = ops.add(x, expand_skip(skips[s], x.shape[1]))
        x = _maybe_fa(arnet_block(x, weights, f"dec{s}", 1, cfg.groups), pyr, weights, f"dec{s}", cfg, s)
    out = ops.add(noisy, ops.scale(_conv(x, weights, "head"), 1.0 / cfg.input_scale))
    return (out, feats) if return_features else out


# -- MAC accounting ------------------------------------------------------

def conv_macs(sp: ConvSpec, h_out: int, w_out: int) -> int:
    return (sp.c_in // sp.groups) * sp.c_out * sp.k * sp.k * h_out * w_out


def count_macs(cfg_or_layers, H: int, W: int) -> float:
    """GMACs per megapixel of Bayer input of size H x W.

    Accepts a :class:`ModelConfig` or an explicit list of :class:`ConvSpec`
    (whose ``scale`` 0 means the packed H/2 x W/2 grid).
    """
    layers = layer_specs(cfg_or_layers) if isinstance(cfg_or_layers, ModelConfig) else cfg_or_layers
    total = 0
    for sp in layers:
        f = 2 ** (sp.scale + 1)
        total += conv_macs(sp, H // f, W // f)
    return total / (H * W / 1e6) / 1e9


def param_count(weights: Weights) -> int:
    return int(sum(t.data.size for t in weights.values()))


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, weights: Weights, extra: Optional[dict] = None,
                    adam: Optional[AdamState] = None) -> None:
    """Directory checkpoint: ``config.json`` plus one FDT1 file per parameter."""
    os.makedirs(os.path.join(path, "weights"), exist_ok=True)
    names = sorted(weights)
    for n in names:
        fdt.save(os.path.join(path, "weights", f"{n}.fdt"), weights[n].data)
    meta = {"model": cfg.to_json(), "parameters": names, "extra": extra or {}}
    if adam is not None:
        os.makedirs(os.path.join(path, "adam"), exist_ok=True)
        for n in names:
            fdt.save(os.path.join(path, "adam", f"{n}.m.fdt"), adam.m[n])
            fdt.save(os.path.join(path, "adam", f"{n}.v.fdt"), adam.v[n])
        meta["adam"] = {"step": adam.step, "betas": list(adam.betas), "eps": adam.eps}
    with open(os.path.join(path, "config.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_checkpoint(path, requires_grad: bool = True) -> tuple[ModelConfig, Weights]:
    with open(os.path.join(path, "config.json")) as f:
        meta = json.load(f)
    cfg = ModelConfig.from_json(meta["model"])
    weights = {
        n: Tensor(fdt.load(os.path.join(path, "weights", f"{n}.fdt")), requires_grad=requires_grad, name=n)
        for n in meta["parameters"]
    }
    expected = {f"{sp.name}.{k}" for sp in layer_specs(cfg) for k in "wb"}
    if set(weights) != expected:
        raise ShapeError(f"checkpoint {path} parameters do not match its config")
    return cfg, weights


def weights_checksum(weights: Weights) -> str:
    import hashlib

    h = hashlib.sha256()
    for n in sorted(weights):
        h.update(n.encode())
        h.update(np.ascontiguousarray(weights[n].data).tobytes())
    return h.hexdigest()


def run(cfg: ModelConfig, weights: Weights, noisy: np.ndarray) -> np.ndarray:
    """Inference helper on a packed numpy batch."""
    with no_grad():
        return forward(cfg, weights, Tensor(noisy)).data
