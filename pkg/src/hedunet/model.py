"""HED-UNet: encoder-decoder feature pyramid with per-level side outputs and
task-specific merging heads for segmentation and edge detection."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, DoubleConv, Module
from .tensor import Tensor

MERGING = ("none", "learned", "attention")
MERGE_SPACES = ("logits", "probs")
DEM_LEVEL = 4  # DEM joins after the fourth downsampling step (1/16 resolution)
PROB_CLAMP = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 6
    base_channels: int = 16
    in_channels: int = 2
    merging: str = "attention"
    deep_supervision: bool = True
    use_dem: bool = False
    seed: int = 0
    merge_space: str = "logits"

    def validate(self) -> None:
        if not 2 <= self.levels <= 6:
            raise ConfigError(f"levels must be in [2, 6], got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.merging not in MERGING:
            raise ConfigError(f"merging must be one of {MERGING}, got {self.merging!r}")
        if self.merge_space not in MERGE_SPACES:
            raise ConfigError(f"merge_space must be one of {MERGE_SPACES}")
        if self.use_dem and self.levels < DEM_LEVEL + 1:
            raise ConfigError("use_dem requires levels >= 5")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    def channels(self, k: int) -> int:
        return self.base_channels * 2 ** min(k, 4)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionBundle:
    """Network outputs for one batch.

    ``attn_seg``/``attn_edge`` are N x K x H x W weight tensors (level k in
    channel k), present only with attention merging.
    """

    seg_logits: Tensor
    edge_logits: Tensor
    seg_prob: Tensor
    edge_prob: Tensor
    side_seg: list[Tensor] = field(default_factory=list)
    side_edge: list[Tensor] = field(default_factory=list)
    attn_seg: Tensor | None = None
    attn_edge: Tensor | None = None


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class Head(Module):
    """Merging head for one task: per-level prediction layers plus the merge."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        L = cfg.levels
        self.merging = cfg.merging
        self.merge_space = cfg.merge_space
        self.pred = [Conv2d(cfg.channels(k), 1, 1, rng) for k in range(L)]
        self.attn = [Conv2d(cfg.channels(k), 1, 1, rng) for k in range(L)] if cfg.merging == "attention" else []
        self.merge = Conv2d(L, 1, 1, rng, bias=False) if cfg.merging == "learned" else None

    def __call__(self, feats: list[Tensor]):
        sides = [self.pred[k](f) for k, f in enumerate(feats)]
        if self.merging == "none":
            return sides[0], T.sigmoid(sides[0]), sides, None
        ups = [T.bilinear_upsample(s, 2**k) for k, s in enumerate(sides)]
        if self.merge_space == "probs":
            ups = [T.sigmoid(u) for u in ups]
        stack = T.concat(ups, axis=1)
        if self.merging == "learned":
            merged = self.merge(stack)
            weights = None
        else:
            gates = [T.bilinear_upsample(self.attn[k](f), 2**k) for k, f in enumerate(feats)]
            weights = T.softmax_over(gates)
            merged = T.tsum(T.mul(stack, weights), axis=1, keepdims=True)
        if self.merge_space == "probs":
            p = np.clip(merged.data, PROB_CLAMP, 1 - PROB_CLAMP)
            return Tensor(np.log(p / (1 - p))), merged, sides, weights
        return merged, T.sigmoid(merged), sides, weights


class HEDUNet(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        rng = rng_for(cfg.seed)
        L = cfg.levels
        self.enc = []
        for k in range(L):
            cin = cfg.in_channels if k == 0 else cfg.channels(k - 1)
            if cfg.use_dem and k == DEM_LEVEL:
                cin += 1
            self.enc.append(DoubleConv(cin, cfg.channels(k), rng))
        self.lateral = [Conv2d(cfg.channels(k + 1), cfg.channels(k), 1, rng) for k in range(L - 1)]
        self.dec = [DoubleConv(cfg.channels(k), cfg.channels(k), rng) for k in range(L - 1)]
        self.seg_head = Head(cfg, rng)
        self.edge_head = Head(cfg, rng)
        if cfg.use_dem:
            self.dem_stats = np.array([0.0, 1.0], dtype=T.DTYPE)  # mean, std

    def features(self, x: Tensor, dem: Tensor | None = None) -> list[Tensor]:
        """Decoder feature pyramid, finest level first."""
        cfg = self.config
        enc = []
        h = x
        for k, block in enumerate(self.enc):
            if k > 0:
                h = T.max_pool2(h)
            if cfg.use_dem and k == DEM_LEVEL:
                mean, std = self.dem_stats
                h = T.concat([h, Tensor((dem.data - mean) / std)], axis=1)
            h = block(h)
            enc.append(h)
        dec = [None] * cfg.levels
        dec[-1] = enc[-1]
        for k in range(cfg.levels - 2, -1, -1):
            top = T.bilinear_upsample(self.lateral[k](dec[k + 1]), 2)
            dec[k] = self.dec[k](T.add(enc[k], top))
        return dec

    def __call__(self, x: Tensor, dem: Tensor | None = None) -> PredictionBundle:
        return forward(self, x, dem)


def build(cfg: ModelConfig) -> HEDUNet:
    return HEDUNet(cfg)


def forward(model: HEDUNet, x: Tensor, dem: Tensor | None = None) -> PredictionBundle:
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
    _, _, h, w = x.shape
    m = 2 ** (cfg.levels - 1)
    if h % m or w % m:
        raise ValueError(f"input extents {h}x{w} must be divisible by {m}")
    if cfg.use_dem:
        if dem is None:
            raise ValueError("model was built with use_dem but no DEM was given")
        if dem.shape != (x.shape[0], 1, h // 16, w // 16):
            raise ValueError(f"DEM must be N x 1 x {h // 16} x {w // 16}, got {dem.shape}")
    elif dem is not None:
        raise ValueError("DEM given to a model built without use_dem")
    feats = model.features(x, dem)
    seg, seg_p, side_seg, attn_seg = model.seg_head(feats)
    edge, edge_p, side_edge, attn_edge = model.edge_head(feats)
    return PredictionBundle(seg, edge, seg_p, edge_p, side_seg, side_edge, attn_seg, attn_edge)


def parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# receptive field
# ---------------------------------------------------------------------------

def _up_src(a: int, b: int, f: int) -> tuple[int, int]:
    # coarse pixels touched by fine pixels a..b under half-pixel bilinear upsampling
    if f == 1:
        return a, b
    return int(np.floor((a + 0.5) / f - 0.5)), int(np.floor((b + 0.5) / f - 0.5)) + 1


def receptive_field(layers: list[tuple[str, int]]) -> int:
    """Side length of the centred box containing every input that can affect
    one output pixel of a sequential 1-D chain.

    ``layers`` holds ("conv", k), ("pool", 2) or ("up", f) in forward order.
    All output phases are considered, so the box holds for every pixel.
    """
    period = 1
    for kind, v in layers:
        if kind == "pool":
            period *= v
    half = 0
    for o in range(period):
        a, b = o, o
        for kind, v in reversed(layers):
            if kind == "conv":
                a, b = a - v // 2, b + v // 2
            elif kind == "pool":
                a, b = v * a, v * b + v - 1
            elif kind == "up":
                a, b = _up_src(a, b, v)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        half = max(half, o - a, b - o)
    return 2 * half + 1


def _enc_support(k: int, a: int, b: int) -> tuple[int, int]:
    a, b = a - 2, b + 2  # double 3x3 conv
    if k == 0:
        return a, b
    return _enc_support(k - 1, 2 * a, 2 * b + 1)


def _dec_support(k: int, levels: int, a: int, b: int) -> tuple[int, int]:
    if k == levels - 1:
        return _enc_support(k, a, b)
    a, b = a - 2, b + 2
    lo, hi = _enc_support(k, a, b)
    ca, cb = _up_src(a, b, 2)
    lo2, hi2 = _dec_support(k + 1, levels, ca, cb)
    return min(lo, lo2), max(hi, hi2)


def theoretical_rf(cfg: ModelConfig) -> int:
    """Side length of the centred input box that can influence one final output pixel."""
    cfg.validate()
    L = cfg.levels
    ks = [0] if cfg.merging == "none" else list(range(L))
    half = 0
    for o in range(2 ** (L - 1)):
        lo, hi = o, o
        for k in ks:
            a, b = _up_src(o, o, 2**k)
            l2, h2 = _dec_support(k, L, a, b)
            lo, hi = min(lo, l2), max(hi, h2)
        half = max(half, o - lo, hi - o)
    return 2 * half + 1


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"HEDU1"


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def state_items(model: HEDUNet) -> list[tuple[str, np.ndarray]]:
    items = [(n, p.data) for n, p in model.named_parameters()]
    items += [(n, b) for n, b in model.named_buffers()]
    return items


def save_checkpoint(model: HEDUNet, path) -> None:
    """Write magic, length-prefixed canonical JSON config, then named float32 blobs."""
    cfg = canonical_json(model.config.to_dict()).encode()
    items = state_items(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> HEDUNet:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a HEDU1 checkpoint")
    pos = 5
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    cfg = ModelConfig.from_dict(json.loads(raw[pos : pos + n]))
    pos += n
    model = HEDUNet(cfg)
    targets = dict(state_items(model))
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name not in targets or targets[name].shape != arr.shape:
            raise ValueError(f"{path}: unexpected tensor {name} {shape}")
        targets[name][...] = arr
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return model
