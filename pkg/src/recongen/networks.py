"""Reconstructor, noise predictor and step-controller networks.

Networks are torch modules working on ``(N, C, H, W)`` tensors.  The
``*_forward`` helpers also accept numpy images laid out ``(H, W, C)`` or
``(N, H, W, C)`` and hand back the same layout.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ReconNetConfig:
    depth: int = 2
    base_channels: int = 16
    block_kind: str = "plain_conv"  # or "simplified_attention"
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 4:
            raise ValueError("need depth >= 1 and base_channels >= 4")
        if self.block_kind not in ("plain_conv", "simplified_attention"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")


@dataclass
class EpsNetConfig:
    depth: int = 2
    base_channels: int = 16
    block_kind: str = "plain_conv"
    in_channels: int = 3
    condition_channels: int = 3
    gamma_embedding_dim: int = 32
    condition: str = "noisy"  # or "initial_estimate"
    # "velocity": eps_hat = sqrt(1-gamma) d_t + sqrt(gamma) u(...), "direct": eps_hat = u(...)
    output: str = "velocity"
    # diffusion runs on residual / residual_scale; 0 means "estimate when training starts"
    residual_scale: float = 0.0

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 4:
            raise ValueError("need depth >= 1 and base_channels >= 4")
        if self.condition not in ("noisy", "initial_estimate"):
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.output not in ("velocity", "direct"):
            raise ValueError(f"unknown output mode {self.output!r}")
        if not self.residual_scale >= 0:
            raise ValueError("residual_scale must be >= 0")


@dataclass
class ControllerNetConfig:
    num_classes: int = 11
    input_size: int = 32
    channels: int = 8
    in_channels: int = 3


def _groups(c: int) -> int:
    return 4 if c % 4 == 0 else 1


class PlainBlock(nn.Module):
    def __init__(self, c: int, emb_dim: int = 0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c), c)
        # conv1 bias would be cancelled by norm2; the level embedding is added after it
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_groups(c), c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c) if emb_dim else None

    def forward(self, h, emb=None):
        z = self.norm2(self.conv1(F.silu(self.norm1(h))))
        if self.emb is not None:
            z = z + self.emb(emb)[:, :, None, None]
        z = self.conv2(F.silu(z))
        return h + z


class GatedBlock(nn.Module):
    """Gated depthwise conv + channel attention, then a gated pointwise FFN."""

    def __init__(self, c: int, emb_dim: int = 0):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, c)
        self.expand = nn.Conv2d(c, 2 * c, 1)
        self.dw = nn.Conv2d(2 * c, 2 * c, 3, padding=1, groups=2 * c)
        self.sca = nn.Conv2d(c, c, 1)
        self.project = nn.Conv2d(c, c, 1)
        self.norm2 = nn.GroupNorm(1, c)
        self.ffn_in = nn.Conv2d(c, 2 * c, 1)
        self.ffn_out = nn.Conv2d(c, c, 1)
        self.beta = nn.Parameter(torch.full((1, c, 1, 1), 0.1))
        self.gamma = nn.Parameter(torch.full((1, c, 1, 1), 0.1))
        self.emb = nn.Linear(emb_dim, c) if emb_dim else None

    def forward(self, h, emb=None):
        a, b = self.dw(self.expand(self.norm1(h))).chunk(2, dim=1)
        z = a * b
        z = z * self.sca(z.mean(dim=(2, 3), keepdim=True))
        z = self.project(z)
        if self.emb is not None:
            z = z + self.emb(emb)[:, :, None, None]
        h = h + self.beta * z
        a, b = self.ffn_in(self.norm2(h)).chunk(2, dim=1)
        return h + self.gamma * self.ffn_out(a * b)


class UNet(nn.Module):
    """Encoder-decoder with additive skips; channel width doubles per level."""

    def __init__(self, in_ch, out_ch, depth, base, block_kind="plain_conv", emb_dim=0):
        super().__init__()
        block = PlainBlock if block_kind == "plain_conv" else GatedBlock
        chans = [base * 2**i for i in range(depth + 1)]
        self.depth = depth
        self.head = nn.Conv2d(in_ch, base, 3, padding=1)
        self.enc = nn.ModuleList(block(chans[i], emb_dim) for i in range(depth))
        self.down = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 2, stride=2) for i in range(depth))
        self.mid = block(chans[depth], emb_dim)
        self.up = nn.ModuleList(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1) for i in range(depth))
        self.dec = nn.ModuleList(block(chans[i], emb_dim) for i in range(depth))
        self.tail = nn.Conv2d(base, out_ch, 3, padding=1)

    def forward(self, x, emb=None):
        h = self.head(x)
        skips = []
        for i in range(self.depth):
            h = self.enc[i](h, emb)
            skips.append(h)
            h = self.down[i](h)
        h = self.mid(h, emb)
        for i in reversed(range(self.depth)):
            h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest")) + skips[i]
            h = self.dec[i](h, emb)
        return self.tail(h)


def _pad_to_multiple(x, m):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


class ReconNet(nn.Module):
    def __init__(self, config: ReconNetConfig):
        super().__init__()
        self.config = config
        self.unet = UNet(config.in_channels, config.out_channels, config.depth,
                         config.base_channels, config.block_kind)

    def forward(self, x):
        xp, (h, w) = _pad_to_multiple(x, 2**self.config.depth)
        return self.unet(xp)[..., :h, :w]


def gamma_embedding(gamma: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Sinusoidal features of ``sqrt(gamma)``, shape ``(N, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=gamma.dtype) / half)
    arg = scale * torch.sqrt(gamma)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class EpsNet(nn.Module):
    """Predicts the injected noise from ``(d_t, x, gamma)``.

    With ``output="velocity"`` the U-Net output ``u`` is combined with a
    skip from ``d_t``, ``eps_hat = sqrt(1-gamma) d_t + sqrt(gamma) u``, so
    the network regresses ``sqrt(gamma) eps - sqrt(1-gamma) d_0``.  The
    implied ``d_0`` estimate then carries the network error scaled by
    ``sqrt(1-gamma)`` rather than amplified by ``1/sqrt(gamma)``.
    """

    def __init__(self, config: EpsNetConfig):
        super().__init__()
        self.config = config
        e = config.gamma_embedding_dim
        self.embed = nn.Sequential(nn.Linear(e, 2 * e), nn.SiLU(), nn.Linear(2 * e, e))
        self.unet = UNet(config.in_channels + config.condition_channels, config.in_channels,
                         config.depth, config.base_channels, config.block_kind, emb_dim=e)

    def forward(self, d_t, x, gamma):
        if not torch.is_tensor(gamma):
            gamma = torch.as_tensor(gamma, dtype=d_t.dtype)
        gamma = gamma.to(d_t.dtype).reshape(-1).expand(d_t.shape[0])
        emb = self.embed(gamma_embedding(gamma, self.config.gamma_embedding_dim))
        inp, (h, w) = _pad_to_multiple(torch.cat([d_t, x], dim=1), 2**self.config.depth)
        out = self.unet(inp, emb)[..., :h, :w]
        if self.config.output == "velocity":
            g = gamma[:, None, None, None]
            out = torch.sqrt(1 - g) * d_t + torch.sqrt(g) * out
        return out


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class ControllerNet(nn.Module):
    """Eight conv-BN-ReLU blocks, max-pooling after blocks 2, 5, 6 and 8,
    residual adds 2->4 and 6->8, one linear layer.  Returns logits."""

    def __init__(self, config: ControllerNetConfig):
        super().__init__()
        self.config = config
        c = config.channels
        plan = [c, c, c, c, 2 * c, 2 * c, 2 * c, 2 * c]
        cins = [config.in_channels] + plan[:-1]
        self.blocks = nn.ModuleList(ConvBlock(i, o) for i, o in zip(cins, plan))
        self.pool = nn.MaxPool2d(2, ceil_mode=True)
        side = config.input_size
        for _ in range(4):
            side = -(-side // 2)
        self.fc = nn.Linear(plan[-1] * side * side, config.num_classes)

    def forward(self, x):
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ValueError(f"controller expects {self.config.input_size}px patches, got {tuple(x.shape[-2:])}")
        b = self.blocks
        h = self.pool(b[1](b[0](x)))
        skip = h
        h = b[3](b[2](h)) + skip
        h = self.pool(b[4](h))
        h = self.pool(b[5](h))
        skip = h
        h = self.pool(b[7](b[6](h)) + skip)
        return self.fc(h.flatten(1))


_KINDS = {"recon": (ReconNet, ReconNetConfig), "eps": (EpsNet, EpsNetConfig),
          "controller": (ControllerNet, ControllerNetConfig)}


class ParamSet:
    """A network, its EMA shadow copy and bookkeeping.

    ``net`` holds the live (trained) weights; ``ema`` is used for
    evaluation.
    """

    def __init__(self, kind: str, config, net: nn.Module | None = None, ema: nn.Module | None = None,
                 seed: int = 0):
        cls, cfg_cls = _KINDS[kind]
        if not isinstance(config, cfg_cls):
            raise TypeError(f"{kind} needs a {cfg_cls.__name__}")
        self.kind = kind
        self.config = config
        if net is None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                net = cls(config)
        self.net = net
        self.ema = ema if ema is not None else copy.deepcopy(net)
        self.ema.eval()
        self.ema.requires_grad_(False)
        self.steps = 0
        self.log: list = []

    @property
    def model(self) -> nn.Module:
        return self.ema

    def to(self, dtype) -> "ParamSet":
        self.net.to(dtype)
        self.ema.to(dtype)
        return self

    def state(self, which: str = "live") -> dict:
        mod = self.net if which == "live" else self.ema
        return {k: v.detach().clone() for k, v in mod.state_dict().items()}

    def copy(self) -> "ParamSet":
        out = ParamSet(self.kind, copy.deepcopy(self.config), copy.deepcopy(self.net), copy.deepcopy(self.ema))
        out.steps = self.steps
        return out


def new_params(kind: str, config=None, seed: int = 0) -> ParamSet:
    config = _KINDS[kind][1]() if config is None else config
    return ParamSet(kind, config, seed=seed)


# --- array plumbing -------------------------------------------------------------

def _to_nchw(a):
    if torch.is_tensor(a):
        return a, None
    a = np.asarray(a)
    single = a.ndim == 3
    if single:
        a = a[None]
    t = torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2), dtype=np.float32))
    return t, single


GRID = 2.0**-32

# CPU kernels round differently depending on the batch size.  Inference
# always runs in chunks of exactly this many items (the last one padded)
# so each item's output is independent of what it is batched with.
BATCH_QUANTUM = 8


def run_padded(fn, *tensors):
    """Call ``fn`` over fixed-size chunks of the leading batch axis."""
    n = tensors[0].shape[0]
    extra = (-n) % BATCH_QUANTUM
    if extra:
        tensors = [torch.cat([t, t[-1:].expand(extra, *t.shape[1:])]) for t in tensors]
    q = BATCH_QUANTUM
    return torch.cat([fn(*(t[i:i + q] for t in tensors)) for i in range(0, n + extra, q)])[:n]


def snap(a) -> np.ndarray:
    """Round onto the 2**-32 fixed-point grid.

    Float32 network outputs above ~4e-3 in magnitude are unchanged; on the
    grid, sums and differences of images and residuals are exact in
    float64.
    """
    return np.round(np.asarray(a, dtype=np.float64) / GRID) * GRID


def _from_nchw(t, single):
    if single is None:
        return t
    a = snap(t.detach().cpu().numpy().transpose(0, 2, 3, 1))
    return a[0] if single else a


def _module(params, use_ema):
    if isinstance(params, ParamSet):
        return params.ema if use_ema else params.net
    return params


def recon_forward(params, x, use_ema: bool = True):
    """Initial estimate for a noisy image (same shape as ``x``)."""
    net = _module(params, use_ema)
    t, single = _to_nchw(x)
    if t.shape[1] != net.config.in_channels:
        raise ValueError(f"expected {net.config.in_channels} channels, got {t.shape[1]}")
    t = t.to(next(net.parameters()).dtype)
    if single is None:
        return net(t)
    with torch.no_grad():
        return _from_nchw(run_padded(net, t), single)


def eps_forward(params, d_t, x, gamma, use_ema: bool = True):
    """Predicted noise for the noised residual ``d_t`` at level ``gamma``."""
    net = _module(params, use_ema)
    td, single = _to_nchw(d_t)
    tx, _ = _to_nchw(x)
    if td.shape[0] != tx.shape[0] or td.shape[-2:] != tx.shape[-2:]:
        raise ValueError("d_t and x must be spatially congruent")
    g = np.asarray(gamma.detach() if torch.is_tensor(gamma) else gamma, dtype=np.float64)
    if not np.all(np.isfinite(g)) or np.any(g <= 0) or np.any(g > 1):
        raise ValueError("gamma must lie in (0, 1]")
    dtype = next(net.parameters()).dtype
    gt = gamma if torch.is_tensor(gamma) else torch.as_tensor(g)
    gt = gt.to(dtype).reshape(-1).expand(td.shape[0])
    if single is None:
        return net(td.to(dtype), tx.to(dtype), gt)
    with torch.no_grad():
        return _from_nchw(run_padded(net, td.to(dtype), tx.to(dtype), gt), single)


def controller_logits(params, x_patch, use_ema: bool = True):
    net = _module(params, use_ema)
    t, single = _to_nchw(x_patch)
    t = t.to(next(net.parameters()).dtype)
    if single is None:
        return net(t)
    with torch.no_grad():
        out = run_padded(net, t)
    out = out.detach().cpu().numpy().astype(np.float64)
    return out[0] if single else out


def controller_forward(params, x_patch, use_ema: bool = True):
    """Class probabilities over the step grid (softmax of the logits)."""
    logits = controller_logits(params, x_patch, use_ema)
    if torch.is_tensor(logits):
        return torch.softmax(logits, dim=-1)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


# --- checkpoints ------------------------------------------------------------------

def write_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Directory of raw little-endian float32 files plus ``manifest.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in (meta or {}).items()]
    for name, arr in arrays.items():
        a = np.asarray(arr.detach().cpu() if torch.is_tensor(arr) else arr, dtype="<f4")
        fname = name.replace("/", "__") + ".f32"
        (path / fname).write_bytes(a.tobytes())
        shape = "x".join(map(str, a.shape)) if a.ndim else "scalar"
        lines.append(f"array {name} = {shape} <f4 {fname}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_arrays(path):
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    arrays, meta = {}, {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("array "):
            shape_s, dtype, fname = val.split()
            shape = () if shape_s == "scalar" else tuple(int(v) for v in shape_s.split("x"))
            data = np.frombuffer((path / fname).read_bytes(), dtype=dtype)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{fname}: size does not match manifest shape {shape}")
            arrays[key[6:]] = data.reshape(shape).copy()
        else:
            meta[key] = val
    return arrays, meta


def save_checkpoint(params: ParamSet, path) -> None:
    arrays = {f"live/{k}": v for k, v in params.net.state_dict().items()}
    arrays.update({f"ema/{k}": v for k, v in params.ema.state_dict().items()})
    meta = {"kind": params.kind, "steps": params.steps}
    meta.update({f"config.{k}": v for k, v in asdict(params.config).items()})
    meta["ema_pairing"] = "live/<name> <-> ema/<name>"
    write_arrays(path, arrays, meta)


def load_checkpoint(path) -> ParamSet:
    arrays, meta = read_arrays(path)
    kind = meta["kind"]
    cfg_cls = _KINDS[kind][1]
    kwargs = {}
    for f in fields(cfg_cls):
        raw = meta.get(f"config.{f.name}")
        if raw is not None:
            kwargs[f.name] = {"str": str, "float": float}.get(f.type if isinstance(f.type, str)
                                                             else f.type.__name__, int)(raw)
    params = ParamSet(kind, cfg_cls(**kwargs))
    for which, mod in (("live", params.net), ("ema", params.ema)):
        sd = mod.state_dict()
        for k, ref in sd.items():
            a = arrays.get(f"{which}/{k}")
            if a is None:
                raise ValueError(f"checkpoint {path} lacks {which}/{k}")
            sd[k] = torch.from_numpy(a).to(ref.dtype).reshape(ref.shape)
        mod.load_state_dict(sd)
    params.steps = int(meta.get("steps", 0))
    return params
