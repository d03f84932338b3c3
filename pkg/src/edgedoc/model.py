"""EdgeDoc network: hybrid conv/attention encoder, U-Net decoder, two heads."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as T
from .fileio import FormatError, decode_btf, encode_btf, write_atomic, write_text_atomic
from .layers import LayerKind, LayerSpec, ParamBundle
from .tensor import Tensor

CHECKPOINT_FORMAT = "edgedoc-checkpoint-1"


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    attention_stages: tuple[int, ...] = (2, 3, 4)
    input_size: tuple[int, int] = (256, 256)
    decoder_channels: tuple[int, ...] = (64, 32, 16, 8, 8)
    kernel: int = 3
    expansion: int = 4
    attn_temperature: float = 1.0

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "attention_stages", "input_size", "decoder_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.in_channels != 2:
            raise ConfigError("in_channels must be 2 (green channel + residual)")
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("exactly 4 encoder stages are required")
        if any(c <= 0 for c in self.stage_channels) or any(d < 0 for d in self.stage_depths):
            raise ConfigError("stage channels must be positive and depths non-negative")
        if any(s not in (1, 2, 3, 4) for s in self.attention_stages):
            raise ConfigError(f"attention stages must be within 1..4, got {self.attention_stages}")
        if len(self.decoder_channels) != 5 or any(c <= 0 for c in self.decoder_channels):
            raise ConfigError("decoder_channels needs 5 positive widths (3 skip blocks + 2 full-res blocks)")
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input size must be positive multiples of 32, got {self.input_size}")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


TOY = ModelConfig()
# small widths used by gradient checks and quick runs
REDUCED = ModelConfig(
    stage_channels=(8, 8, 16, 16),
    stage_depths=(1, 1, 1, 1),
    decoder_channels=(16, 8, 8, 4, 4),
    input_size=(64, 64),
)


@dataclass
class ForwardOutput:
    cls_logit: Tensor  # N x 1
    mask_logit: Tensor  # N x 1 x H x W
    stage_features: list[Tensor] = field(default_factory=list)


def layer_specs(cfg: ModelConfig) -> list[tuple[str, LayerSpec]]:
    """Ordered (prefix, spec) list describing every parameterized block."""
    sc, k, e = cfg.stage_channels, cfg.kernel, cfg.expansion
    specs: list[tuple[str, LayerSpec]] = [("stem", LayerSpec(LayerKind.CONV_STEM, cfg.in_channels, sc[0], 4, e))]
    for s in range(4):
        if s > 0:
            specs.append((f"stages.{s}.down", LayerSpec(LayerKind.DOWNSAMPLE, sc[s - 1], sc[s], 2, e)))
        for b in range(cfg.stage_depths[s]):
            specs.append((f"stages.{s}.blocks.{b}", LayerSpec(LayerKind.CONV_ENCODER_BLOCK, sc[s], sc[s], k, e)))
        if s + 1 in cfg.attention_stages:
            specs.append((f"stages.{s}.attn", LayerSpec(LayerKind.TRANSPOSE_ATTENTION_BLOCK, sc[s], sc[s], k, e)))
    dc = cfg.decoder_channels
    skips = [sc[2], sc[1], sc[0], 0, 0]
    cin = sc[3]
    for i in range(5):
        specs.append((f"decoder.{i}", LayerSpec(LayerKind.UP_BLOCK, cin + skips[i], dc[i], k, e)))
        cin = dc[i]
    specs.append(("cls_head", LayerSpec(LayerKind.CLS_HEAD, sc[3], 1, 1, e)))
    specs.append(("mask_head", LayerSpec(LayerKind.MASK_HEAD, dc[-1], 1, 1, e)))
    return specs


def build_model(cfg: ModelConfig = TOY, seed: int = 0) -> ParamBundle:
    """Initialize parameters deterministically from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ParamBundle()
    for prefix, spec in layer_specs(cfg):
        kind = spec.kind
        if kind is LayerKind.CONV_STEM:
            L.init_stem(p, rng, prefix, spec.in_channels, spec.out_channels, spec.kernel)
        elif kind is LayerKind.DOWNSAMPLE:
            L.init_downsample(p, rng, prefix, spec.in_channels, spec.out_channels)
        elif kind is LayerKind.CONV_ENCODER_BLOCK:
            L.init_conv_encoder_block(p, rng, prefix, spec.in_channels, spec.kernel, spec.expansion)
        elif kind is LayerKind.TRANSPOSE_ATTENTION_BLOCK:
            L.init_transpose_attention_block(p, rng, prefix, spec.in_channels, spec.expansion, cfg.attn_temperature)
        elif kind is LayerKind.UP_BLOCK:
            L.init_up_block(p, rng, prefix, spec.in_channels, 0, spec.out_channels, spec.kernel)
        elif kind is LayerKind.CLS_HEAD:
            L.init_cls_head(p, rng, prefix, spec.in_channels)
        elif kind is LayerKind.MASK_HEAD:
            L.init_mask_head(p, rng, prefix, spec.in_channels)
    return p


def forward(params: ParamBundle, x: Tensor | np.ndarray, cfg: ModelConfig = TOY,
            keep_features: bool = False) -> ForwardOutput:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.input_size:
        raise T.ShapeError("forward", x.shape, (None, cfg.in_channels, *cfg.input_size))
    h = L.stem(x, params, "stem")
    feats = []
    for s in range(4):
        if s > 0:
            h = L.downsample(h, params, f"stages.{s}.down")
        for b in range(cfg.stage_depths[s]):
            h = L.conv_encoder_block(h, params, f"stages.{s}.blocks.{b}")
        if s + 1 in cfg.attention_stages:
            h = L.transpose_attention_block(h, params, f"stages.{s}.attn")
        feats.append(h)
    cls_logit = L.cls_head(feats[3], params, "cls_head")
    d = feats[3]
    for i, skip in enumerate([feats[2], feats[1], feats[0], None, None]):
        d = L.up_block(d, params, f"decoder.{i}", skip)
    mask_logit = L.mask_head(d, params, "mask_head")
    return ForwardOutput(cls_logit, mask_logit, feats if keep_features else [])


def predict(params: ParamBundle, x, cfg: ModelConfig = TOY) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid scores (N,) and masks (N x H x W) without recording a graph."""
    with T.no_grad():
        out = forward(params, x, cfg)
        score = T.sigmoid(out.cls_logit).data[:, 0]
        mask = T.sigmoid(out.mask_logit).data[:, 0]
    return score, mask


# ---------------------------------------------------------------------------
# checkpoints: directory with manifest.txt + one BTF file per parameter


def save_checkpoint(path, params: ParamBundle, cfg: ModelConfig, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format={CHECKPOINT_FORMAT}"]
    for k, v in cfg.to_dict().items():
        lines.append(f"config.{k}={json.dumps(v)}")
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k}={v}")
    for name, t in params.items():
        fname = f"{name}.btf"
        write_atomic(path / fname, encode_btf(t.data))
        lines.append(f"param.{name}={fname}")
    write_text_atomic(path / "manifest.txt", "\n".join(lines) + "\n")
    return path


def read_checkpoint_manifest(path) -> tuple[ModelConfig, dict[str, str], dict[str, str]]:
    path = Path(path)
    mf = path / "manifest.txt"
    if not mf.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mf}")
    cfg_d, files, meta = {}, {}, {}
    fmt = None
    for raw in mf.read_text("utf-8").splitlines():
        if not raw.strip():
            continue
        key, sep, val = raw.partition("=")
        if not sep:
            raise CheckpointError(f"malformed checkpoint manifest line: {raw!r}")
        if key == "format":
            fmt = val
        elif key.startswith("config."):
            v = json.loads(val)
            cfg_d[key[7:]] = tuple(v) if isinstance(v, list) else v
        elif key.startswith("param."):
            files[key[6:]] = val
        elif key.startswith("meta."):
            meta[key[5:]] = val
    if fmt != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {fmt!r}")
    try:
        cfg = ModelConfig.from_dict(cfg_d)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"bad config in checkpoint: {exc}") from exc
    return cfg, files, meta


def load_checkpoint(path, expected_cfg: ModelConfig | None = None) -> tuple[ParamBundle, ModelConfig, dict]:
    """Load parameters, checking names and shapes against the stored config."""
    path = Path(path)
    cfg, files, meta = read_checkpoint_manifest(path)
    if expected_cfg is not None and expected_cfg != cfg:
        raise CheckpointError("checkpoint config differs from the requested config")
    reference = build_model(cfg, 0)
    if set(files) != set(reference.names()):
        missing = sorted(set(reference.names()) - set(files))
        extra = sorted(set(files) - set(reference.names()))
        raise CheckpointError(f"parameter names mismatch; missing={missing[:5]} extra={extra[:5]}")
    params = ParamBundle()
    for name in reference.names():
        try:
            arr = decode_btf((path / files[name]).read_bytes())
        except (OSError, FormatError) as exc:
            raise CheckpointError(f"cannot read {name}: {exc}") from exc
        if arr.shape != reference[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {reference[name].shape}")
        params[name] = Tensor(arr, requires_grad=True)
    return params, cfg, meta
