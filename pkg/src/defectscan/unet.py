"""Noise-prediction U-Net for small single-channel patches.

Down path -> mid block -> up path, built from residual blocks with group
normalization, SiLU, spatial self-attention and additive time-embedding
injection.  Resampling uses 4x4 stride-2 (transposed) convolutions so each
level halves/doubles the resolution; skips are fused by channel concatenation
into the next residual block's 3x3 convolution.
"""

import json
import os
import struct
import threading
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, DimensionError

CHECKPOINT_MAGIC = b"DSCKPT1\n"


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters; one entry per resolution level."""

    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    time_embed_dim: int = 128
    groups: int = 8
    attention_levels: tuple = (False, True)

    def validate(self, image_size=28):
        if self.base_channels % self.groups != 0:
            raise ConfigurationError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}")
        if len(self.channel_multipliers) != len(self.attention_levels):
            raise ConfigurationError(
                "channel_multipliers and attention_levels must have equal length")
        if self.time_embed_dim % 2 != 0:
            raise ConfigurationError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        levels = len(self.channel_multipliers)
        if image_size % (2 ** levels) != 0:
            raise ConfigurationError(
                f"image size {image_size} not divisible by 2^{levels} downsamplings")
        if image_size // (2 ** levels) < 4:
            raise ConfigurationError(
                f"deepest feature map {image_size // (2 ** levels)} < 4; reduce levels")
        return self

    @property
    def level_channels(self):
        return tuple(self.base_channels * m for m in self.channel_multipliers)


class _Registry:
    """Named parameter store; every tensor registered exactly once."""

    def __init__(self):
        self.params = {}

    def add(self, name, array):
        if name in self.params:
            raise ConfigurationError(f"parameter {name!r} registered twice")
        t = ad.Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class _Conv:
    def __init__(self, reg, rng, name, cin, cout, k, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        self.w = reg.add(f"{name}.weight", _kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.b = reg.add(f"{name}.bias", np.zeros(cout))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class _ConvT:
    def __init__(self, reg, rng, name, cin, cout, k, stride, padding):
        self.stride, self.padding = stride, padding
        self.w = reg.add(f"{name}.weight", _kaiming(rng, (cin, cout, k, k), cin * k * k))
        self.b = reg.add(f"{name}.bias", np.zeros(cout))

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class _Norm:
    def __init__(self, reg, name, channels, groups):
        self.groups = groups
        self.gamma = reg.add(f"{name}.gamma", np.ones(channels))
        self.beta = reg.add(f"{name}.beta", np.zeros(channels))

    def __call__(self, x):
        return ad.group_norm(x, self.groups, self.gamma, self.beta)


class _Dense:
    def __init__(self, reg, rng, name, din, dout):
        self.w = reg.add(f"{name}.weight", _kaiming(rng, (din, dout), din))
        self.b = reg.add(f"{name}.bias", np.zeros(dout))

    def __call__(self, x):
        return ad.add_row_bias(ad.matmul(x, self.w), self.b)


class _ResBlock:
    """norm-silu-conv, add projected time embedding, norm-silu-conv, residual."""

    def __init__(self, reg, rng, name, cin, cout, temb_dim, groups):
        self.norm1 = _Norm(reg, f"{name}.norm1", cin, groups)
        self.conv1 = _Conv(reg, rng, f"{name}.conv1", cin, cout, 3, padding=1)
        self.temb = _Dense(reg, rng, f"{name}.temb", temb_dim, cout)
        self.norm2 = _Norm(reg, f"{name}.norm2", cout, groups)
        self.conv2 = _Conv(reg, rng, f"{name}.conv2", cout, cout, 3, padding=1)
        self.skip = _Conv(reg, rng, f"{name}.skip", cin, cout, 1) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(ad.silu(self.norm1(x)))
        h = ad.add_channelwise(h, self.temb(ad.silu(temb)))
        h = self.conv2(ad.silu(self.norm2(h)))
        res = self.skip(x) if self.skip is not None else x
        return ad.add(h, res)


class _AttnBlock:
    def __init__(self, reg, rng, name, channels):
        scale = 1.0 / np.sqrt(channels)
        self.mats = [reg.add(f"{name}.{p}", rng.standard_normal((channels, channels)) * scale)
                     for p in ("wq", "wk", "wv", "wo")]

    def __call__(self, x):
        return ad.self_attention(x, *self.mats)


class UNetModel:
    """The noise predictor: parameters plus the wiring to run them.

    Parameters are mutated only by the training loop; forward passes on
    disjoint inputs are independent (the eval counter takes a lock).
    """

    def __init__(self, config, seed):
        config.validate()
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        reg = _Registry()
        chans = config.level_channels
        g, td = config.groups, config.time_embed_dim

        self.time_mlp = [_Dense(reg, rng, "time.fc1", td, td),
                         _Dense(reg, rng, "time.fc2", td, td)]
        self.stem = _Conv(reg, rng, "stem", config.in_channels, chans[0], 3, padding=1)

        self.down_res, self.down_attn, self.downsample = [], [], []
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down_res.append(_ResBlock(reg, rng, f"down{i}.res", prev, c, td, g))
            self.down_attn.append(_AttnBlock(reg, rng, f"down{i}.attn", c)
                                  if config.attention_levels[i] else None)
            self.downsample.append(_Conv(reg, rng, f"down{i}.pool", c, c, 4, stride=2, padding=1))
            prev = c

        self.mid_res1 = _ResBlock(reg, rng, "mid.res1", prev, prev, td, g)
        self.mid_attn = _AttnBlock(reg, rng, "mid.attn", prev)
        self.mid_res2 = _ResBlock(reg, rng, "mid.res2", prev, prev, td, g)

        self.upsample, self.up_res, self.up_attn = [], [], []
        cur = prev
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.upsample.append(_ConvT(reg, rng, f"up{i}.unpool", cur, c, 4, stride=2, padding=1))
            self.up_res.append(_ResBlock(reg, rng, f"up{i}.res", 2 * c, c, td, g))
            self.up_attn.append(_AttnBlock(reg, rng, f"up{i}.attn", c)
                                if config.attention_levels[i] else None)
            cur = c

        self.out_norm = _Norm(reg, "out.norm", chans[0], g)
        self.out_conv = _Conv(reg, rng, "out.conv", chans[0], config.in_channels, 3, padding=1)

        self.params = reg.params
        self.eval_count = 0
        self._count_lock = threading.Lock()

    @property
    def parameter_count(self):
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward(self, x, t):
        """Predict the noise in x[N, C, H, W] at integer timesteps t (scalar or per-sample)."""
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"forward: expected [N,{self.config.in_channels},H,W], got {x.data.shape}")
        n, _, h, w = x.data.shape
        levels = len(self.config.channel_multipliers)
        if h % (2 ** levels) != 0 or w % (2 ** levels) != 0:
            raise DimensionError(f"forward: spatial {h}x{w} not divisible by 2^{levels}")
        ts = np.full(n, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
        if ts.shape != (n,):
            raise DimensionError(f"forward: t has shape {ts.shape}, expected ({n},)")
        if np.any(ts < 1):
            raise ContractError(f"forward: timesteps must be >= 1, got min {ts.min()}")
        with self._count_lock:
            self.eval_count += n

        temb = ad.embed_timesteps(ts, self.config.time_embed_dim)
        temb = self.time_mlp[1](ad.silu(self.time_mlp[0](temb)))

        hcur = self.stem(x)
        skips = []
        for res, attn, pool in zip(self.down_res, self.down_attn, self.downsample):
            hcur = res(hcur, temb)
            if attn is not None:
                hcur = attn(hcur)
            skips.append(hcur)
            hcur = pool(hcur)

        hcur = self.mid_res2(self.mid_attn(self.mid_res1(hcur, temb)), temb)

        for unpool, res, attn in zip(self.upsample, self.up_res, self.up_attn):
            hcur = unpool(hcur)
            skip = skips.pop()
            if hcur.data.shape[2:] != skip.data.shape[2:]:
                raise DimensionError(
                    f"skip fusion: up path {hcur.data.shape[2:]} != down path {skip.data.shape[2:]}")
            hcur = res(ad.concat_channels(hcur, skip), temb)
            if attn is not None:
                hcur = attn(hcur)

        return self.out_conv(ad.silu(self.out_norm(hcur)))


def unet_init(config, seed):
    """Build a model with deterministic parameters for the given seed."""
    return UNetModel(config, seed)


def parameter_checksum(model):
    """Order-sensitive digest of all parameter bytes (determinism checks)."""
    import hashlib
    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint container: magic, little-endian header length, JSON header,
# float32 little-endian tensor payloads in header order
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, step_count=0, extra=None):
    header = {
        "format_version": 1,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(model.config).items()},
        "seed": model.seed,
        "step_count": int(step_count),
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild (model, header) from a checkpoint file; exact parameter round-trip."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        cfg_d = dict(header["config"])
        for key in ("channel_multipliers", "attention_levels"):
            cfg_d[key] = tuple(cfg_d[key])
        model = UNetModel(UNetConfig(**cfg_d), header["seed"])
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in model.params:
                raise ContractError(f"{path}: unknown tensor {name!r} in checkpoint")
            t = model.params[name]
            if t.shape != shape:
                raise DimensionError(
                    f"{path}: tensor {name!r} shape {shape} != model {t.shape}")
            count = int(np.prod(shape))
            raw = f.read(count * 4)
            t.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return model, header
