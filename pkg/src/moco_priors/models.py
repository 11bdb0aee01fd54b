"""UNet and ResNet correction networks with optional prior injection.

Three injection modes share one layout: an encoder producing a latent (plus
skip features for the UNet), an optional auxiliary encoder for the priors,
a fusion step, and a decoder. Main-path modules carry the same names in every
mode, so baseline weights can be copied into a dual-branch model and back.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ModelConfig",
    "LatentFusion",
    "CorrectionNet",
    "build_model",
    "forward",
    "fuse_latent",
    "count_parameters",
    "first_layer",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

ARCHS = ("unet", "resnet")
INJECTIONS = ("baseline", "multichannel", "dualbranch")
FUSIONS = ("add", "concat_conv")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unet"
    injection: str = "baseline"
    n_prior: int = 0
    fusion: str = "add"
    depth: int = 3
    base_features: int = 16
    res_blocks: int = 3
    norm: str = "none"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.injection not in INJECTIONS:
            raise ValueError(f"injection must be one of {INJECTIONS}, got {self.injection!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.injection != "baseline" and self.n_prior < 1:
            raise ValueError(f"{self.injection} injection needs n_prior >= 1, got {self.n_prior}")
        if self.n_prior < 0:
            raise ValueError("n_prior must be >= 0")
        if self.depth < 1 or self.base_features < 1 or self.res_blocks < 0:
            raise ValueError("depth and base_features must be >= 1, res_blocks >= 0")
        if self.norm not in ("none", "instance"):
            raise ValueError(f"norm must be 'none' or 'instance', got {self.norm!r}")

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**{"depth": 4, "base_features": 64, "res_blocks": 9, **kw})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**{"depth": 3, "base_features": 16, "res_blocks": 3, **kw})

    @property
    def in_channels(self) -> int:
        return 1 + self.n_prior if self.injection == "multichannel" else 1

    @property
    def downsample_factor(self) -> int:
        return 2**self.depth if self.arch == "unet" else 4


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _norm(kind: str, ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True) if kind == "instance" else nn.Identity()


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm: str = "none"):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), _norm(norm, cout), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1), _norm(norm, cout), nn.ReLU(),
        )


class UNetEncoder(nn.Module):
    """Contraction path and bottleneck."""

    def __init__(self, cin: int, base: int, depth: int, norm: str = "none"):
        super().__init__()
        feats = [base * 2**i for i in range(depth + 1)]
        self.levels = nn.ModuleList()
        for i in range(depth):
            self.levels.append(DoubleConv(cin if i == 0 else feats[i - 1], feats[i], norm))
        self.bottleneck = DoubleConv(feats[depth - 1], feats[depth], norm)
        self.latent_channels = feats[depth]

    def forward(self, x):
        skips = []
        for level in self.levels:
            x = level(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return self.bottleneck(x), skips


class UNetDecoder(nn.Module):
    def __init__(self, base: int, depth: int, norm: str = "none"):
        super().__init__()
        feats = [base * 2**i for i in range(depth + 1)]
        self.ups = nn.ModuleList()
        self.convs = nn.ModuleList()
        for i in reversed(range(depth)):
            self.ups.append(nn.ConvTranspose2d(feats[i + 1], feats[i], 2, stride=2))
            self.convs.append(DoubleConv(2 * feats[i], feats[i], norm))
        self.head = nn.Conv2d(base, 1, 1)

    def forward(self, x, skips):
        for up, conv, skip in zip(self.ups, self.convs, reversed(skips)):
            x = conv(torch.cat([skip, up(x)], dim=1))
        return self.head(x)


class ResNetEncoder(nn.Module):
    """Two downsampling blocks, each a stride-1 and a stride-2 3x3 convolution."""

    def __init__(self, cin: int, base: int, norm: str = "none"):
        super().__init__()
        f1, f2 = base, 2 * base
        self.down = nn.Sequential(
            nn.Conv2d(cin, f1, 3, padding=1), _norm(norm, f1), nn.ReLU(),
            nn.Conv2d(f1, f1, 3, stride=2, padding=1), _norm(norm, f1), nn.ReLU(),
            nn.Conv2d(f1, f2, 3, padding=1), _norm(norm, f2), nn.ReLU(),
            nn.Conv2d(f2, f2, 3, stride=2, padding=1), _norm(norm, f2), nn.ReLU(),
        )
        self.latent_channels = f2

    def forward(self, x):
        return self.down(x), []


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, norm: str = "none"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), _norm(norm, ch), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1), _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResNetDecoder(nn.Module):
    """Residual blocks on the fused latent, then two 2x upsampling blocks."""

    def __init__(self, base: int, res_blocks: int, norm: str = "none"):
        super().__init__()
        f1, f2 = base, 2 * base
        self.blocks = nn.Sequential(*[ResidualBlock(f2, norm) for _ in range(res_blocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(f2, f1, 2, stride=2), _norm(norm, f1), nn.ReLU(),
            nn.Conv2d(f1, f1, 3, padding=1), _norm(norm, f1), nn.ReLU(),
            nn.ConvTranspose2d(f1, f1, 2, stride=2), _norm(norm, f1), nn.ReLU(),
            nn.Conv2d(f1, f1, 3, padding=1), _norm(norm, f1), nn.ReLU(),
        )
        self.head = nn.Conv2d(f1, 1, 1)

    def forward(self, x, skips):
        return self.head(self.up(self.blocks(x)))


class LatentFusion(nn.Module):
    """Combine main and auxiliary latents by addition or concat + 1x1 convolution."""

    def __init__(self, mode: str, channels: int):
        super().__init__()
        if mode not in FUSIONS:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.channels = channels
        self.conv = nn.Conv2d(2 * channels, channels, 1) if mode == "concat_conv" else None

    def forward(self, main, aux):
        if main.shape != aux.shape:
            raise ValueError(f"latent shape mismatch: {tuple(main.shape)} vs {tuple(aux.shape)}")
        if self.mode == "add":
            return main + aux
        return self.conv(torch.cat([main, aux], dim=1))


class CorrectionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.arch == "unet":
            self.encoder = UNetEncoder(cfg.in_channels, cfg.base_features, cfg.depth, cfg.norm)
            self.decoder = UNetDecoder(cfg.base_features, cfg.depth, cfg.norm)
        else:
            self.encoder = ResNetEncoder(cfg.in_channels, cfg.base_features, cfg.norm)
            self.decoder = ResNetDecoder(cfg.base_features, cfg.res_blocks, cfg.norm)
        if cfg.injection == "dualbranch":
            if cfg.arch == "unet":
                self.aux_encoder = UNetEncoder(cfg.n_prior, cfg.base_features, cfg.depth, cfg.norm)
            else:
                self.aux_encoder = ResNetEncoder(cfg.n_prior, cfg.base_features, cfg.norm)
            self.fusion = LatentFusion(cfg.fusion, self.encoder.latent_channels)
        else:
            self.aux_encoder = None
            self.fusion = None

    def _check(self, x, priors):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"corrupted input must have shape (B, 1, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        f = cfg.downsample_factor
        if h % f or w % f:
            raise ValueError(f"input size {h}x{w} not divisible by {f}")
        if cfg.injection == "baseline":
            return
        if priors is None or priors.shape[1] == 0:
            raise ValueError(f"{cfg.injection} model requires {cfg.n_prior} prior channels")
        if priors.shape != (x.shape[0], cfg.n_prior, h, w):
            raise ValueError(
                f"priors must have shape {(x.shape[0], cfg.n_prior, h, w)}, got {tuple(priors.shape)}"
            )

    def forward(self, x, priors=None):
        self._check(x, priors)
        if self.cfg.injection == "multichannel":
            x = torch.cat([x, priors], dim=1)
        latent, skips = self.encoder(x)
        if self.aux_encoder is not None:
            aux, _ = self.aux_encoder(priors)
            latent = self.fusion(latent, aux)
        return self.decoder(latent, skips)


def first_layer(model: CorrectionNet) -> nn.Conv2d:
    return next(m for m in model.encoder.modules() if isinstance(m, nn.Conv2d))


def _init_weights(model: nn.Module, seed: int) -> None:
    # He-uniform on fan-in, zero bias
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // (m.stride[0] * m.stride[1])
            elif isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            else:
                continue
            bound = math.sqrt(6.0 / max(fan_in, 1))
            m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=g))
            if m.bias is not None:
                m.bias.zero_()


def build_model(cfg: ModelConfig, seed: int = 0) -> CorrectionNet:
    model = CorrectionNet(cfg)
    _init_weights(model, seed)
    return model


def forward(model: CorrectionNet, corrupted, priors=None):
    return model(corrupted, priors)


def fuse_latent(main, aux, fusion: LatentFusion):
    return fusion(main, aux)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoints: zip of config JSON + named raw float32 blobs
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


_EPOCH = (1980, 1, 1, 0, 0, 0)


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _blob(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def save_checkpoint(path, model: CorrectionNet, meta: dict | None = None, optimizer_state: dict | None = None) -> None:
    """Write config, parameters and optional metadata/optimizer state.

    Entries have fixed timestamps, so identical inputs give identical bytes.
    """
    params = {name: p for name, p in model.state_dict().items()}
    index = {name: list(p.shape) for name, p in params.items()}
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "config.json", json.dumps(asdict(model.cfg), indent=2, sort_keys=True).encode())
        _put(zf, "params.json", json.dumps(index, indent=2).encode())
        for name, p in params.items():
            _put(zf, f"params/{name}.f32", _blob(p))
        _put(zf, "meta.json", json.dumps(meta or {}, indent=2, sort_keys=True).encode())
        if optimizer_state is not None:
            tensors = {}
            for idx, st in optimizer_state["state"].items():
                for key, value in st.items():
                    tensors[f"{idx}/{key}"] = list(value.shape)
                    _put(zf, f"optim/{idx}/{key}.f32", _blob(value))
            doc = {"param_groups": optimizer_state["param_groups"], "tensors": tensors}
            _put(zf, "optim.json", json.dumps(doc, indent=2, sort_keys=True).encode())


def _read_blob(zf: zipfile.ZipFile, name: str, shape) -> torch.Tensor:
    try:
        raw = zf.read(name)
    except KeyError:
        raise CheckpointError(f"checkpoint lacks blob {name}") from None
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * n:
        raise CheckpointError(f"blob {name} holds {len(raw)} bytes, expected {4 * n}")
    return torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())


def load_checkpoint(path) -> tuple[CorrectionNet, dict, dict | None]:
    """Rebuild the model. Returns (model, meta, optimizer_state or None)."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            cfg = ModelConfig(**json.loads(zf.read("config.json")))
            index = json.loads(zf.read("params.json"))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid checkpoint config in {path}: {exc}") from exc
        model = CorrectionNet(cfg)
        expected = {name: list(t.shape) for name, t in model.state_dict().items()}
        if expected != index:
            missing = sorted(set(expected) - set(index))
            extra = sorted(set(index) - set(expected))
            wrong = sorted(k for k in set(expected) & set(index) if expected[k] != index[k])
            raise CheckpointError(
                f"checkpoint parameters do not match config: missing={missing} extra={extra} shape={wrong}"
            )
        state = {name: _read_blob(zf, f"params/{name}.f32", shape) for name, shape in index.items()}
        model.load_state_dict(state)
        meta = json.loads(zf.read("meta.json")) if "meta.json" in zf.namelist() else {}
        optim = None
        if "optim.json" in zf.namelist():
            doc = json.loads(zf.read("optim.json"))
            st: dict = {}
            for key, shape in doc["tensors"].items():
                idx, name = key.split("/", 1)
                st.setdefault(int(idx), {})[name] = _read_blob(zf, f"optim/{key}.f32", shape)
            optim = {"state": st, "param_groups": doc["param_groups"]}
    return model, meta, optim
