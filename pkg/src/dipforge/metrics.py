"""Quality and efficiency accounting.

Quality metrics compare 8-bit quantized RGB images. Efficiency counters walk
the convolutions of a model at a fixed input size; one multiply-accumulate is
counted as one FLOP.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch
from scipy.signal import convolve2d
from torch import nn

INF_SENTINEL = "inf"


def quantize(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def _crop(x, border):
    return x[border:-border, border:-border] if border else x


def psnr(a, b, crop_border: int = 0) -> float:
    """PSNR in dB over all RGB pixels; ``inf`` for identical images."""
    qa, qb = quantize(a), quantize(b)
    _check_dims(qa, qb)
    qa, qb = _crop(qa, crop_border), _crop(qb, crop_border)
    mse = float(np.mean((qa - qb) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x, y, win, c1, c2):
    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    sxx = convolve2d(x * x, win, mode="valid") - mu_x ** 2
    syy = convolve2d(y * y, win, mode="valid") - mu_y ** 2
    sxy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         crop_border: int = 0) -> float:
    """Mean SSIM, computed per RGB channel and averaged."""
    qa, qb = quantize(a), quantize(b)
    _check_dims(qa, qb)
    qa, qb = _crop(qa, crop_border), _crop(qb, crop_border)
    if min(qa.shape[:2]) < window:
        raise ValueError(f"image {qa.shape[:2]} is smaller than the {window}x{window} window")
    if np.array_equal(qa, qb):
        return 1.0
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * 255) ** 2, (k2 * 255) ** 2
    if qa.ndim == 2:
        return _ssim_channel(qa, qb, win, c1, c2)
    return float(np.mean([_ssim_channel(qa[..., c], qb[..., c], win, c1, c2) for c in range(qa.shape[2])]))


# -------------------------------------------------------------- model counters

def count_params(model: nn.Module, exclude: Iterable[nn.Module] = ()) -> int:
    skip = {id(p) for m in exclude for p in m.parameters()}
    return sum(p.numel() for p in model.parameters() if id(p) not in skip)


def _input_channels(model: nn.Module) -> int:
    first = next((m for m in model.modules() if isinstance(m, nn.Conv2d)), None)
    return first.in_channels if first is not None else 3


def _conv_trace(model: nn.Module, input_hw):
    rows = []
    in_channels = _input_channels(model)

    def hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        rows.append((out.numel(), mod.in_channels // mod.groups * k))

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.Conv2d)]
    p = next(model.parameters())
    try:
        with torch.no_grad():
            model(torch.zeros(1, in_channels, *input_hw, dtype=p.dtype, device=p.device))
    finally:
        for h in handles:
            h.remove()
    return rows


def count_flops(model: nn.Module, input_hw=(256, 256)) -> int:
    """Multiply-accumulates of every convolution at ``input_hw``."""
    return sum(n_out * fan_in for n_out, fan_in in _conv_trace(model, input_hw))


def count_activations(model: nn.Module, input_hw=(256, 256)) -> int:
    """Total number of convolution output elements at ``input_hw``."""
    return sum(n_out for n_out, _ in _conv_trace(model, input_hw))


def measure_runtime(model: nn.Module, input_hw=(256, 256), reps: int = 20, warmup: int = 10,
                    device: Optional[str] = None) -> dict:
    p = next(model.parameters())
    dev = torch.device(device) if device else p.device
    model = model.to(dev).eval()
    x = torch.rand(1, 3, *input_hw, dtype=p.dtype, device=dev)
    sync = torch.cuda.synchronize if dev.type == "cuda" else (lambda: None)
    times = []
    with torch.no_grad():
        for _ in range(max(warmup, 10)):
            model(x)
        sync()
        for _ in range(max(reps, 1)):
            t0 = time.perf_counter()
            model(x)
            sync()
            times.append((time.perf_counter() - t0) * 1e3)
    return {
        "mean_ms": statistics.fmean(times),
        "median_ms": statistics.median(times),
        "std_ms": statistics.pstdev(times) if len(times) > 1 else 0.0,
        "reps": len(times),
        "device": str(dev),
    }


def estimate_peak_memory(model: nn.Module, input_hw=(256, 256)) -> float:
    """Peak live bytes (weights + activations, float32) over a forward pass, in MB.

    Simulates tensor lifetimes on the traced graph: a value is allocated when
    its node runs and freed right after its last consumer. This is an
    estimate, not an allocator measurement.
    """
    from torch.fx import symbolic_trace
    from torch.fx.passes.shape_prop import ShapeProp

    gm = symbolic_trace(model)
    p = next(model.parameters())
    ShapeProp(gm).propagate(torch.zeros(1, _input_channels(model), *input_hw, dtype=p.dtype, device=p.device))
    elem = 4  # single precision

    def nbytes(node):
        meta = node.meta.get("tensor_meta")
        if node.op == "get_attr" or meta is None or not hasattr(meta, "shape"):
            return 0
        return int(np.prod(meta.shape)) * elem

    nodes = list(gm.graph.nodes)
    last_use = {}
    for i, n in enumerate(nodes):
        for arg in n.all_input_nodes:
            last_use[arg] = i
    weights = sum(q.numel() for q in model.parameters()) * elem
    live, peak = 0, 0
    for i, n in enumerate(nodes):
        if n.op == "output":
            break
        live += nbytes(n)
        peak = max(peak, live)
        for arg in n.all_input_nodes:
            if last_use.get(arg) == i:
                live -= nbytes(arg)
        if n not in last_use:  # dead value
            live -= nbytes(n)
    return (peak + weights) / 2 ** 20


# --------------------------------------------------------------------- reports

TABLE_COLUMNS = ("psnr_db", "runtime_ms", "params_m", "gflops", "activations_m", "memory_mb")


@dataclass
class MetricsReport:
    name: str
    psnr_db: float
    ssim: float
    params_m: float
    gflops: float
    activations_m: float
    runtime_ms: float
    memory_mb: float
    protocol: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = INF_SENTINEL
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("psnr_db") == INF_SENTINEL:
            d["psnr_db"] = math.inf
        return cls(**d)


def efficiency_report(model: nn.Module, input_hw=(256, 256), reps: int = 20, device: Optional[str] = None,
                      exclude=()) -> dict:
    rt = measure_runtime(model, input_hw, reps=reps, device=device)
    return {
        "params_m": count_params(model, exclude) / 1e6,
        "gflops": count_flops(model, input_hw) / 1e9,
        "activations_m": count_activations(model, input_hw) / 1e6,
        "runtime_ms": rt["mean_ms"],
        "memory_mb": estimate_peak_memory(model, input_hw),
        "protocol": {"input_size": list(input_hw), "device": rt["device"], "repetitions": rt["reps"],
                     "runtime_median_ms": rt["median_ms"], "runtime_std_ms": rt["std_ms"]},
    }
