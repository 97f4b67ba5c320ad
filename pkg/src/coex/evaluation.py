"""Gate-routed blind denoising of full images, metrics, and analyses.

Inference follows the two-stage shape: a handful of deterministic
non-overlapping patches route the image through the gate (probabilities are
softmaxed per patch, averaged, argmaxed with smallest-index ties), then the
selected expert alone processes the whole image.  Outputs are clamped to
[0, 1] before metric computation; training never clamps.

PSNR uses the [0, 1] pixel convention, reporting +inf for identical images
(excluded from averages with a logged count).  SSIM is the standard
single-scale form: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
dynamic range 1.0, averaged over valid window positions.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .networks import ModelBundle, count_params, gate_logits
from .nn import ShapeMismatchError, softmax
from .noise import NoiseSpec, apply_noise
from .rng import Rng, derive_seed

ROUTING_PATCH_SIZE = 64
ROUTING_PATCH_COUNT = 5

# per-source level ladders used for assignment maps
DEFAULT_ASSIGN_LEVELS = {
    "awgn": [5.0, 10.0, 15.0, 25.0, 35.0, 50.0],
    "jpeg": [80, 60, 40, 20, 10, 5],
}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) on [0,1]-scaled pixels; +inf for identical images."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean(np.square(a.astype(np.float64) - b.astype(np.float64))))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    t = sliding_window_view(img, k.size, axis=1) @ k
    return sliding_window_view(t, k.size, axis=0) @ k


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale structural similarity over valid 11x11 window positions."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < _SSIM_KERNEL.size:
        raise ValueError(f"ssim needs images at least 11x11, got {a.shape}")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    k = _SSIM_KERNEL
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    var_x = _filter_valid(x * x, k) - mu_x * mu_x
    var_y = _filter_valid(y * y, k) - mu_y * mu_y
    cov = _filter_valid(x * y, k) - mu_x * mu_y
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

def routing_patch_plan(h: int, w: int, patch_size: int = ROUTING_PATCH_SIZE,
                       n_patches: int = ROUTING_PATCH_COUNT):
    """Deterministic disjoint routing patches: grid corners + center.

    The image is tiled by a centered grid of patch-size cells.  Cells are
    picked corners-first, then the center cell, then row-major until
    ``n_patches`` (or the grid is exhausted).  Images smaller than the patch
    size fall back to one center crop of side min(h, w).
    """
    s = min(patch_size, h, w)
    gh, gw = h // s, w // s
    oy, ox = (h - gh * s) // 2, (w - gw * s) // 2
    preferred = [(0, 0), (0, gw - 1), (gh - 1, 0), (gh - 1, gw - 1),
                 ((gh - 1) // 2, (gw - 1) // 2)]
    chosen = []
    for cell in preferred:
        if cell not in chosen:
            chosen.append(cell)
    for cy in range(gh):
        for cx in range(gw):
            if len(chosen) >= n_patches:
                break
            if (cy, cx) not in chosen:
                chosen.append((cy, cx))
    chosen = chosen[:n_patches]
    return [(oy + cy * s, ox + cx * s, s) for cy, cx in chosen]


def select_expert(gate, image: np.ndarray,
                  patch_size: int = ROUTING_PATCH_SIZE,
                  n_patches: int = ROUTING_PATCH_COUNT) -> int:
    """Route an image: average per-patch softmax probabilities, argmax.

    Ties resolve to the smallest index.
    """
    h, w = image.shape
    plan = routing_patch_plan(h, w, patch_size, n_patches)
    patches = np.stack([image[y:y + s, x:x + s] for y, x, s in plan])
    probs = softmax(gate_logits(gate, patches[:, None].astype(np.float32)))
    return int(np.argmax(probs.mean(axis=0)))


def denoise_blind(bundle: ModelBundle, image: np.ndarray):
    """Denoise a full image with the gate-selected expert; returns (out, idx).

    Exactly one expert runs a full-image forward pass.  Single-expert bundles
    skip the gate entirely.
    """
    if len(bundle.experts) > 1 and bundle.gate is not None:
        idx = select_expert(bundle.gate, image)
    else:
        idx = 0
    out = bundle.experts[idx].denoise(image[None, None].astype(np.float32))
    return np.clip(out[0, 0], 0.0, 1.0).astype(np.float32), idx


# ---------------------------------------------------------------------------
# grid evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    image_index: int
    source: str
    level: float
    selected_expert: int
    input_psnr: float
    psnr: float
    ssim: float | None


@dataclass
class SourceAggregate:
    source: str
    count: int
    finite_count: int        # +inf PSNR rows are excluded from the mean
    mean_psnr: float
    mean_ssim: float | None


@dataclass
class EvalReport:
    rows: list
    aggregates: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write("image_index,source,level,selected_expert,"
                    "input_psnr,psnr,ssim\n")
            for r in self.rows:
                lvl = int(r.level) if r.source == "jpeg" else repr(float(r.level))
                s = "" if r.ssim is None else repr(float(r.ssim))
                f.write(f"{r.image_index},{r.source},{lvl},{r.selected_expert},"
                        f"{repr(float(r.input_psnr))},{repr(float(r.psnr))},"
                        f"{s}\n")

    def summary_to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write("source,count,finite_count,mean_psnr,mean_ssim\n")
            for a in self.aggregates:
                ms = "" if a.mean_ssim is None else repr(float(a.mean_ssim))
                f.write(f"{a.source},{a.count},{a.finite_count},"
                        f"{repr(float(a.mean_psnr))},{ms}\n")


def _aggregate(rows) -> list:
    out = []
    for source in sorted({r.source for r in rows}):
        rs = [r for r in rows if r.source == source]
        finite = [r.psnr for r in rs if math.isfinite(r.psnr)]
        ssims = [r.ssim for r in rs if r.ssim is not None]
        out.append(SourceAggregate(
            source=source, count=len(rs), finite_count=len(finite),
            mean_psnr=float(np.mean(finite)) if finite else math.nan,
            mean_ssim=float(np.mean(ssims)) if ssims else None))
    return out


def evaluate_grid(bundle: ModelBundle, images, grid, seed: int,
                  threads: int = 1) -> EvalReport:
    """Synthesize each grid entry deterministically, denoise blind, score.

    Noise for row i comes from a stream derived from (seed, "eval", i), so
    parallel and serial evaluation produce identical reports.
    """
    for idx, _ in grid.entries:
        if idx >= len(images):
            raise IndexError(f"grid image index {idx} outside dataset "
                             f"of {len(images)} images")

    def one(args):
        row_i, (img_idx, spec) = args
        rng = Rng(derive_seed(seed, "eval", row_i))
        clean = images[img_idx]
        noisy = apply_noise(clean, spec, rng)
        out, sel = denoise_blind(bundle, noisy)
        s = ssim(out, clean) if min(clean.shape) >= 11 else None
        return EvalRow(image_index=img_idx, source=spec.source,
                       level=spec.level, selected_expert=sel,
                       input_psnr=psnr(np.clip(noisy, 0.0, 1.0), clean),
                       psnr=psnr(out, clean), ssim=s)

    work = list(enumerate(grid.entries))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, work))
    else:
        rows = [one(a) for a in work]
    return EvalReport(rows=rows, aggregates=_aggregate(rows))


# ---------------------------------------------------------------------------
# oracle vs routed assignment analysis
# ---------------------------------------------------------------------------

@dataclass
class AssignmentGrid:
    """Expert choice per (noise level, image): PSNR-oracle vs gate-routed."""
    sources: list
    levels: dict            # source -> list of levels (given order)
    oracle: dict            # source -> int array [n_levels, n_images]
    routed: dict
    oracle_psnr: dict       # source -> float array [n_levels, n_images]
    routed_psnr: dict
    agreement: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write("source,level,image_index,oracle_expert,routed_expert,"
                    "oracle_psnr,routed_psnr\n")
            for src in self.sources:
                for li, level in enumerate(self.levels[src]):
                    lvl = int(level) if src == "jpeg" else repr(float(level))
                    for ii in range(self.oracle[src].shape[1]):
                        f.write(f"{src},{lvl},{ii},"
                                f"{self.oracle[src][li, ii]},"
                                f"{self.routed[src][li, ii]},"
                                f"{repr(float(self.oracle_psnr[src][li, ii]))},"
                                f"{repr(float(self.routed_psnr[src][li, ii]))}\n")


def assignment_grid(bundle: ModelBundle, images, levels_by_source=None,
                    seed: int = 0) -> AssignmentGrid:
    """Run ALL experts per (level, image) cell; record argmax-PSNR (oracle)
    and the gate's choice (routed), plus their agreement rate."""
    if levels_by_source is None:
        levels_by_source = DEFAULT_ASSIGN_LEVELS
    if not images or not levels_by_source:
        raise ValueError("assignment grid needs images and levels")
    sources = sorted(levels_by_source)
    oracle, routed, opsnr, rpsnr = {}, {}, {}, {}
    agree = 0
    total = 0
    for src in sources:
        levels = list(levels_by_source[src])
        o = np.zeros((len(levels), len(images)), dtype=np.int64)
        r = np.zeros_like(o)
        op = np.zeros(o.shape, dtype=np.float64)
        rp = np.zeros_like(op)
        for li, level in enumerate(levels):
            for ii, clean in enumerate(images):
                rng = Rng(derive_seed(seed, "assign", src, li, ii))
                noisy = apply_noise(clean, NoiseSpec(src, level), rng)
                x = noisy[None, None].astype(np.float32)
                scores = [psnr(np.clip(e.denoise(x)[0, 0], 0.0, 1.0), clean)
                          for e in bundle.experts]
                o[li, ii] = int(np.argmax(scores))
                if len(bundle.experts) > 1 and bundle.gate is not None:
                    r[li, ii] = select_expert(bundle.gate, noisy)
                op[li, ii] = scores[o[li, ii]]
                rp[li, ii] = scores[r[li, ii]]
                agree += int(o[li, ii] == r[li, ii])
                total += 1
        oracle[src], routed[src] = o, r
        opsnr[src], rpsnr[src] = op, rp
    return AssignmentGrid(sources=sources, levels=dict(levels_by_source),
                          oracle=oracle, routed=routed, oracle_psnr=opsnr,
                          routed_psnr=rpsnr, agreement=agree / total)


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------

@dataclass
class ComplexityReport:
    params_expert: int
    params_gate: int
    params_total: int        # all experts + gate
    patch_area_ratio: float
    params_effective: float  # one expert + gate scaled by the area ratio

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write("params_expert,params_gate,params_total,"
                    "patch_area_ratio,params_effective\n")
            f.write(f"{self.params_expert},{self.params_gate},"
                    f"{self.params_total},{repr(self.patch_area_ratio)},"
                    f"{repr(self.params_effective)}\n")


def effective_complexity(bundle: ModelBundle, image_shape) -> ComplexityReport:
    """Parameters exercised per routed inference.

    The gate contributes in proportion to the area its routing patches
    sample: 5 * 64^2 / (H * W) for images that fit the standard plan.
    """
    h, w = image_shape
    pe = count_params(bundle.experts[0])
    pg = count_params(bundle.gate) if bundle.gate is not None else 0
    total = sum(count_params(e) for e in bundle.experts) + pg
    plan = routing_patch_plan(h, w)
    ratio = sum(s * s for _, _, s in plan) / float(h * w)
    return ComplexityReport(params_expert=pe, params_gate=pg,
                            params_total=total, patch_area_ratio=ratio,
                            params_effective=pe + pg * ratio)
