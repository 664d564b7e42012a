"""Deconvolution compensation model for finite-aperture measurements.

A bank of K learnable kernels, each a transducer-local source position
with a regularizer, deconvolves every trace of an (element, view) patch
by the Wiener filter

    W_k(f) = H_k(f) / (H_k(f)^2 + lambda_k),

where H_k is the far-field element response at the kernel's local
coordinates. A small encoder-decoder scores the K deconvolved channels
plus the raw input, and a channel softmax blends them into a single
compensated patch. Full arrays are processed by sliding patches over
the element/view plane, cyclically in the view axis.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorio
from .forward import FrequencyGrid, PressureTensor, fft_length, sir_spectrum_batch
from .geometry import SystemConfig, config_hash, pose_arrays

__all__ = [
    "SirKernel",
    "PatchSpec",
    "SynthesisNetSpec",
    "SynthesisNet",
    "ConstantLogitNet",
    "DeconvNetModel",
    "wiener_deconvolve",
    "deconvolve_patch",
    "synthesize",
    "forward_patch",
    "infer_full",
    "oracle_deconvolve",
    "init_model",
    "mae_loss",
    "Hyperparams",
    "train",
    "extract_patch",
    "val_tiling",
    "save_checkpoint",
    "load_checkpoint",
]

DOWN_STRIDE = (2, 2, 4)


class SirKernel(nn.Module):
    """One deconvolution kernel: local source position + log regularizer."""

    def __init__(self, local, lam: float):
        super().__init__()
        local = torch.as_tensor(local, dtype=torch.get_default_dtype()).reshape(3)
        if float(local.norm()) == 0.0:
            raise ValueError("kernel local position must be nonzero")
        if lam < 0:
            raise ValueError("regularizer must be nonnegative")
        log_lam = math.log(lam) if lam > 0 else -math.inf
        self.local = nn.Parameter(local.clone())
        self.log_lambda = nn.Parameter(torch.tensor(log_lam, dtype=local.dtype))

    @property
    def lam(self) -> torch.Tensor:
        return self.log_lambda.exp()


@dataclass(frozen=True)
class PatchSpec:
    """Patch footprint on the (element, view) plane and inference strides."""

    n_r_patch: int = 32
    n_v_patch: int = 32
    stride_r: int = 0
    stride_v: int = 0

    def __post_init__(self) -> None:
        if self.n_r_patch < 1 or self.n_v_patch < 1:
            raise ValueError("patch dims must be >= 1")
        # stride 0 means "same as patch" (non-overlapping tiling)
        if self.stride_r == 0:
            object.__setattr__(self, "stride_r", self.n_r_patch)
        if self.stride_v == 0:
            object.__setattr__(self, "stride_v", self.n_v_patch)
        if not 1 <= self.stride_r <= self.n_r_patch:
            raise ValueError("stride_r must be in [1, n_r_patch]")
        if not 1 <= self.stride_v <= self.n_v_patch:
            raise ValueError("stride_v must be in [1, n_v_patch]")


@dataclass(frozen=True)
class SynthesisNetSpec:
    """Channel widths of the three resolution levels and conv footprint."""

    widths: tuple[int, int, int] = (16, 32, 64)
    kernel_size: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self) -> None:
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ValueError("need three positive channel widths")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_size):
            raise ValueError("kernel footprint must be odd per axis")


def _pad_cyclic_view(x: torch.Tensor, kernel: tuple[int, int, int]) -> torch.Tensor:
    """Pad (B,C,R,V,T): circular along V, zeros along R and T."""
    pr, pv, pt = (k // 2 for k in kernel)
    if pv:
        x = F.pad(x, (0, 0, pv, pv, 0, 0), mode="circular")
    if pr or pt:
        x = F.pad(x, (pt, pt, 0, 0, pr, pr))
    return x


class _ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int, int]):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv3d(c_in, c_out, kernel, bias=False)
        self.bn = nn.BatchNorm3d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(_pad_cyclic_view(x, self.kernel))))


class _Down(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, DOWN_STRIDE, stride=DOWN_STRIDE, bias=False)
        self.bn = nn.BatchNorm3d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class _Up(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.ConvTranspose3d(c_in, c_out, DOWN_STRIDE, stride=DOWN_STRIDE, bias=False)
        self.bn = nn.BatchNorm3d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class SynthesisNet(nn.Module):
    """3-level encoder-decoder emitting one logit volume per joint channel.

    Downsampling is (2, 2, 4) over (element, view, time) per level, so the
    patch must be a multiple of 4 in the element and view axes; the time
    axis is zero-padded to a multiple of 16 internally and cropped back.
    """

    def __init__(self, channels: int, spec: SynthesisNetSpec):
        super().__init__()
        w1, w2, w3 = spec.widths
        k = spec.kernel_size
        self.stem = _ConvBlock(channels, w1, k)
        self.down1 = _Down(w1, w1)
        self.block1 = _ConvBlock(w1, w2, k)
        self.down2 = _Down(w2, w2)
        self.block2 = _ConvBlock(w2, w3, k)
        self.up2 = _Up(w3, w2)
        self.fuse2 = _ConvBlock(2 * w2, w2, k)
        self.up1 = _Up(w2, w1)
        self.fuse1 = _ConvBlock(2 * w1, w1, k)
        self.head = nn.Conv3d(w1, channels, 1)

    def forward(self, x):
        _, _, r, v, t = x.shape
        if r % 4 or v % 4:
            raise ValueError("patch element/view dims must be multiples of 4")
        t_pad = (-t) % 16
        if t_pad:
            x = F.pad(x, (0, t_pad))
        s0 = self.stem(x)
        s1 = self.block1(self.down1(s0))
        bottom = self.block2(self.down2(s1))
        y = self.fuse2(torch.cat([self.up2(bottom), s1], dim=1))
        y = self.fuse1(torch.cat([self.up1(y), s0], dim=1))
        y = self.head(y)
        return y[..., :t] if t_pad else y


class ConstantLogitNet(nn.Module):
    """Test double: emits all-zero logits, so the softmax is uniform."""

    def forward(self, x):
        return torch.zeros_like(x)


class DeconvNetModel(nn.Module):
    """Kernel bank + synthesis subnetwork bound to one system configuration."""

    def __init__(self, kernels, patch: PatchSpec, config: SystemConfig,
                 net_spec: SynthesisNetSpec | None = None, net: nn.Module | None = None):
        super().__init__()
        kernels = list(kernels)
        if not kernels:
            raise ValueError("need at least one kernel")
        self.kernels = nn.ModuleList(kernels)
        self.patch = patch
        self.config = config
        self.config_hash = config_hash(config)
        self.net_spec = net_spec if net_spec is not None else SynthesisNetSpec()
        self.net = net if net is not None else SynthesisNet(len(kernels) + 1, self.net_spec)

    @property
    def k(self) -> int:
        return len(self.kernels)

    def forward(self, patch_in):
        return forward_patch(self, patch_in)


def _bank_filters(bank, config: SystemConfig, n_fft: int, dtype, device):
    """Wiener filter bank (K, n_bins) for the zero-padded trace length."""
    locs = torch.stack([k.local for k in bank])
    lams = torch.stack([k.log_lambda for k in bank]).exp()[:, None]
    n_bins = n_fft // 2 + 1
    f = torch.arange(n_bins, dtype=dtype, device=device) / (n_fft * config.dt)
    norm = locs.norm(dim=1, keepdim=True)
    ux = config.elem_a * locs[:, 0:1] * f[None, :] / (config.sos * norm)
    uy = config.elem_b * locs[:, 1:2] * f[None, :] / (config.sos * norm)
    h = torch.sinc(ux) * torch.sinc(uy)
    return h / (h * h + lams)


def wiener_deconvolve(trace, kernel: SirKernel, config: SystemConfig, freqs=None):
    """Deconvolve time traces (last axis) with one kernel's Wiener filter.

    Accepts a numpy array or torch tensor of shape (..., n_t); returns the
    same kind. The transform is zero-padded to fft_length(n_t); an optional
    FrequencyGrid is validated against that convention.
    """
    is_np = not isinstance(trace, torch.Tensor)
    x = torch.as_tensor(np.asarray(trace, dtype=float) if is_np else trace)
    n_t = x.shape[-1]
    n_fft = fft_length(n_t)
    if freqs is not None and freqs.n_bins != n_fft // 2 + 1:
        raise ValueError("frequency grid does not match the padded trace length")
    w = _bank_filters([kernel], config, n_fft, x.dtype, x.device)[0]
    y = torch.fft.irfft(torch.fft.rfft(x, n=n_fft, dim=-1) * w, n=n_fft, dim=-1)
    y = y[..., :n_t]
    return y.detach().numpy() if is_np else y


def deconvolve_patch(patch, bank, config: SystemConfig) -> torch.Tensor:
    """Apply every kernel trace-wise: (..., R, V, T) -> (..., K, R, V, T)."""
    bank = list(bank)
    if not bank:
        raise ValueError("kernel bank is empty")
    x = torch.as_tensor(patch)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ValueError("patch must have shape (R, V, T) or (B, R, V, T)")
        x = x[None]
    n_t = x.shape[-1]
    n_fft = fft_length(n_t)
    w = _bank_filters(bank, config, n_fft, x.dtype, x.device)
    spec = torch.fft.rfft(x, n=n_fft, dim=-1)
    y = torch.fft.irfft(spec[:, None] * w[None, :, None, None, :], n=n_fft, dim=-1)
    y = y[..., :n_t]
    return y if batched else y[0]


def synthesize(joint: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Channel-weighted sum; weights must sum to 1 across channels."""
    if joint.shape != weights.shape:
        raise ValueError("joint and weight tensors must share a shape")
    err = float((weights.sum(dim=-4) - 1.0).abs().max().detach())
    if err > 1e-5:
        raise ValueError(f"channel weight sums deviate from 1 by {err:.2e}")
    return (joint * weights).sum(dim=-4)


def forward_patch(model: DeconvNetModel, patch_in) -> torch.Tensor:
    """Deconvolve, score, softmax, blend. Differentiable end to end."""
    x = torch.as_tensor(patch_in)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[1] != model.patch.n_r_patch or x.shape[2] != model.patch.n_v_patch:
        raise ValueError(
            f"patch shape {tuple(x.shape[1:3])} does not match model patch "
            f"({model.patch.n_r_patch}, {model.patch.n_v_patch})"
        )
    dec = deconvolve_patch(x, model.kernels, model.config)
    joint = torch.cat([dec, x[:, None]], dim=1)
    weights = torch.softmax(model.net(joint), dim=1)
    out = synthesize(joint, weights)
    return out if batched else out[0]


def infer_full(model: DeconvNetModel, full: PressureTensor) -> PressureTensor:
    """Compensate a whole measurement tensor by sliding-window patches.

    Element-axis tiling is clamped at the far edge; view-axis tiling wraps
    cyclically. Overlapping patch outputs are averaged uniformly.
    """
    if full.config_hash != model.config_hash:
        warnings.warn(
            "input tensor configuration differs from the model's; proceeding",
            RuntimeWarning,
            stacklevel=2,
        )
    n_r, n_v, _ = full.shape
    p_r, p_v = model.patch.n_r_patch, model.patch.n_v_patch
    if p_r > n_r:
        raise ValueError("patch exceeds the array in the element axis")
    if p_v > n_v:
        raise ValueError("patch exceeds the array in the view axis")

    r_starts = list(range(0, n_r - p_r + 1, model.patch.stride_r))
    if r_starts[-1] != n_r - p_r:
        r_starts.append(n_r - p_r)
    v_starts = list(range(0, n_v, model.patch.stride_v))

    dtype = next(model.parameters()).dtype
    num = np.zeros(full.shape)
    den = np.zeros(full.shape[:2])
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for r0 in r_starts:
                for v0 in v_starts:
                    vidx = np.arange(v0, v0 + p_v) % n_v
                    block = full.data[r0 : r0 + p_r][:, vidx]
                    pred = forward_patch(model, torch.as_tensor(block, dtype=dtype))
                    num[r0 : r0 + p_r, vidx] += pred.double().numpy()
                    den[r0 : r0 + p_r, vidx] += 1.0
    finally:
        model.train(was_training)
    return PressureTensor(num / den[:, :, None], full.config_hash)


def oracle_deconvolve(full: PressureTensor, center, config: SystemConfig,
                      lam: float = 1e-4) -> PressureTensor:
    """Wiener-deconvolve every trace with the true element response at one
    known source position (no learning; each transducer gets its own filter).

    The filter is exact only for a source at `center`; on data containing
    other sources their kernel mismatch shows up as ringing, so use this on
    measurements of an isolated source when a clean reference is needed.
    """
    centers, ax_x, ax_y, ax_z = pose_arrays(config)
    rel = np.asarray(center, dtype=float) - centers
    loc = np.stack(
        [(rel * ax_x).sum(-1), (rel * ax_y).sum(-1), (rel * ax_z).sum(-1)], axis=-1
    )
    n_t = full.shape[-1]
    n_fft = fft_length(n_t)
    fgrid = FrequencyGrid(n_bins=n_fft // 2 + 1, df=1.0 / (n_fft * config.dt))
    h = sir_spectrum_batch(loc.reshape(-1, 3), config, fgrid).reshape(loc.shape[:2] + (-1,))
    w = h / (h * h + lam)
    spec = np.fft.rfft(full.data, n=n_fft, axis=-1)
    out = np.fft.irfft(spec * w, n=n_fft, axis=-1)[..., :n_t]
    return PressureTensor(out, full.config_hash)


def init_model(k: int = 127, patch: PatchSpec | None = None, seed: int = 0,
               config: SystemConfig | None = None,
               net_spec: SynthesisNetSpec | None = None, lam_init: float = 1e-2,
               dtype: torch.dtype = torch.float32) -> DeconvNetModel:
    """Seeded model with kernel positions on a jittered stratified grid.

    Locals span |x|, |y| <= 60 mm laterally and 25..145 mm in depth, the
    source region as seen from any transducer.
    """
    if k < 1:
        raise ValueError("need at least one kernel")
    if patch is None:
        patch = PatchSpec()
    if config is None:
        config = SystemConfig()
    rng = np.random.default_rng(seed)
    m = int(math.ceil(k ** (1.0 / 3.0)))
    cells = rng.permutation(m**3)[:k]
    ii, jj, ll = cells // (m * m), (cells // m) % m, cells % m
    u = rng.uniform(size=(3, k))
    x = -60.0 + (ii + u[0]) * (120.0 / m)
    y = -60.0 + (jj + u[1]) * (120.0 / m)
    z = 25.0 + (ll + u[2]) * (120.0 / m)

    torch.manual_seed(seed)
    kernels = [SirKernel((x[i], y[i], z[i]), lam_init) for i in range(k)]
    model = DeconvNetModel(kernels, patch, config, net_spec=net_spec)
    return model.to(dtype)


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    return (pred - target).abs().mean()


def extract_patch(data: np.ndarray, r0: int, v0: int, n_r: int, n_v: int) -> np.ndarray:
    """Slice an (element, view, time) patch, wrapping views cyclically."""
    vidx = np.arange(v0, v0 + n_v) % data.shape[1]
    return np.asarray(data[r0 : r0 + n_r][:, vidx])


def val_tiling(n_r: int, n_v: int, patch: PatchSpec):
    """Deterministic non-overlapping-ish tiling used for validation."""
    p_r, p_v = patch.n_r_patch, patch.n_v_patch
    r_starts = list(range(0, n_r - p_r + 1, p_r))
    if r_starts[-1] != n_r - p_r:
        r_starts.append(n_r - p_r)
    v_starts = list(range(0, n_v, p_v))
    return [(r0, v0) for r0 in r_starts for v0 in v_starts]


@dataclass
class Hyperparams:
    epochs: int = 100
    steps_per_epoch: int = 64
    batch_size: int = 2
    lr: float = 3e-4
    lr_factor: float = 0.5
    lr_patience: int = 2
    stop_patience: int = 5
    seed: int = 0


def _load_split(manifest: tensorio.Manifest, split: str):
    pairs = []
    for sid in manifest.ids(split):
        x, _ = tensorio.read_tensor(manifest.input_file(sid), mmap=True)
        y, _ = tensorio.read_tensor(manifest.target_file(sid), mmap=True)
        pairs.append((x, y))
    return pairs


def train(model: DeconvNetModel, manifest: tensorio.Manifest, hp: Hyperparams):
    """Optimize kernels and net jointly on random patches; returns (model, history).

    Adam on MAE with plateau halving and early stopping on the validation
    loss; the best-validation parameters are restored before returning.
    """
    train_pairs = _load_split(manifest, "train")
    val_pairs = _load_split(manifest, "val")
    if not train_pairs or not val_pairs:
        raise ValueError("manifest needs nonempty train and val splits")

    dtype = next(model.parameters()).dtype
    p_r, p_v = model.patch.n_r_patch, model.patch.n_v_patch
    n_r, n_v, _ = train_pairs[0][0].shape
    if p_r > n_r or p_v > n_v:
        raise ValueError("patch exceeds the training arrays")

    rng = np.random.default_rng(hp.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)
    tiles = val_tiling(n_r, n_v, model.patch)

    def validate() -> float:
        model.eval()
        total = 0.0
        count = 0
        with torch.no_grad():
            for x, y in val_pairs:
                for r0, v0 in tiles:
                    px = torch.as_tensor(extract_patch(x, r0, v0, p_r, p_v), dtype=dtype)
                    py = torch.as_tensor(extract_patch(y, r0, v0, p_r, p_v), dtype=dtype)
                    total += float(mae_loss(forward_patch(model, px), py))
                    count += 1
        return total / count

    history = []
    best_val = math.inf
    best_state = None
    stale = 0
    lr = hp.lr

    for epoch in range(1, hp.epochs + 1):
        model.train()
        train_total = 0.0
        for step in range(hp.steps_per_epoch):
            xs, ys = [], []
            for _ in range(hp.batch_size):
                x, y = train_pairs[rng.integers(len(train_pairs))]
                r0 = int(rng.integers(0, n_r - p_r + 1))
                v0 = int(rng.integers(0, n_v))
                xs.append(extract_patch(x, r0, v0, p_r, p_v))
                ys.append(extract_patch(y, r0, v0, p_r, p_v))
            bx = torch.as_tensor(np.stack(xs), dtype=dtype)
            by = torch.as_tensor(np.stack(ys), dtype=dtype)
            loss = mae_loss(forward_patch(model, bx), by)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} step {step}: {float(loss)}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            train_total += float(loss.detach())

        val = validate()
        history.append(
            {
                "epoch": epoch,
                "train_mae": train_total / hp.steps_per_epoch,
                "val_mae": val,
                "lr": lr,
            }
        )
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= hp.stop_patience:
                break
            if stale % hp.lr_patience == 0:
                lr *= hp.lr_factor
                for group in opt.param_groups:
                    group["lr"] = lr

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def save_checkpoint(model: DeconvNetModel, path) -> None:
    """Write all parameters plus the architecture header to one tensor file."""
    tensors = {}
    for name, value in model.state_dict().items():
        tensors[name] = value.detach().cpu().numpy().astype(np.float32)
    header = {
        "k": model.k,
        "patch": [model.patch.n_r_patch, model.patch.n_v_patch,
                  model.patch.stride_r, model.patch.stride_v],
        "net": {"widths": list(model.net_spec.widths),
                "kernel_size": list(model.net_spec.kernel_size)},
        "net_kind": "constant" if isinstance(model.net, ConstantLogitNet) else "synthesis",
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "config": {f: getattr(model.config, f) for f in model.config.__dataclass_fields__},
        "config_hash": model.config_hash,
    }
    tensorio.write_named_tensors(path, tensors, header)


def load_checkpoint(path) -> DeconvNetModel:
    tensors, header = tensorio.read_named_tensors(path)
    config = SystemConfig(**header["config"])
    pr, pv, sr, sv = header["patch"]
    patch = PatchSpec(pr, pv, sr, sv)
    spec = SynthesisNetSpec(tuple(header["net"]["widths"]),
                            tuple(header["net"]["kernel_size"]))
    k = header["k"]
    kernels = [SirKernel((0.0, 0.0, 1.0), 1e-2) for _ in range(k)]
    net = ConstantLogitNet() if header["net_kind"] == "constant" else None
    model = DeconvNetModel(kernels, patch, config, net_spec=spec, net=net)
    model = model.to(getattr(torch, header.get("dtype", "float32")))
    reference = model.state_dict()
    state = {}
    for name, arr in tensors.items():
        state[name] = torch.as_tensor(arr).to(reference[name].dtype)
    model.load_state_dict(state)
    return model
