"""Noise synthesis, graded evaluation grids, image I/O, procedural images.

Two noise sources are modeled.  AWGN adds independent Gaussians with a
standard deviation quoted on the 0-255 intensity scale; the result is NOT
clamped to [0, 1] (clamping would make the noise non-Gaussian and
level-dependent).  JPEG noise applies grayscale baseline-JPEG luma
quantization: 8x8 orthonormal DCT, the standard luminance table scaled by
the conventional quality factor, round, dequantize, inverse DCT; the result
IS clamped, as a real decoder clamps.  Entropy coding is lossless and
therefore omitted; the artifact signal is identical and exactly
reproducible.

Images are 2-d float32 arrays in [0, 1], shape (H, W).  File I/O is 8-bit
binary PGM (P5); PNG works too when Pillow is importable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng, derive_seed

AWGN = "awgn"
JPEG = "jpeg"

AWGN_SIGMA_MAX = 55.0
JPEG_QUALITY_MIN = 5
JPEG_QUALITY_MAX = 100

DEFAULT_NOISE = "awgn=0..55+jpeg=5..100"


@dataclass(frozen=True)
class NoiseSpec:
    """A noise source plus its level; never shown to the trainer, only logged."""
    source: str
    level: float

    def __post_init__(self):
        if self.source == AWGN:
            if not 0.0 <= self.level <= AWGN_SIGMA_MAX:
                raise ValueError(f"awgn sigma {self.level} outside [0, 55]")
        elif self.source == JPEG:
            if self.level != int(self.level) or not (
                    JPEG_QUALITY_MIN <= self.level <= JPEG_QUALITY_MAX):
                raise ValueError(f"jpeg quality {self.level} outside 5..100")
        else:
            raise ValueError(f"unknown noise source {self.source!r}")

    def describe(self) -> str:
        lvl = int(self.level) if self.source == JPEG else self.level
        return f"{self.source}:{lvl}"


# ---------------------------------------------------------------------------
# AWGN
# ---------------------------------------------------------------------------

def add_awgn(image: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """Add Gaussian noise with std sigma/255; output is not clamped."""
    if sigma < 0:
        raise ValueError(f"awgn sigma must be >= 0, got {sigma}")
    z = rng.normal(image.size).reshape(image.shape)
    return (image + (sigma / 255.0) * z).astype(np.float32)


# ---------------------------------------------------------------------------
# JPEG quantization noise
# ---------------------------------------------------------------------------

# ITU T.81 Annex K.1 luminance quantization table
STD_LUMA_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the conventional quality factor.

    scale = 5000/q below 50, else 200 - 2q; entries floor((Q*scale + 50)/100)
    clamped to [1, 255].
    """
    q = int(quality)
    if not 1 <= q <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    table = np.floor((STD_LUMA_QUANT * scale + 50.0) / 100.0)
    return np.clip(table, 1, 255).astype(np.int64)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8).reshape(8, 1)
    n = np.arange(8).reshape(1, 8)
    d = np.cos((2 * n + 1) * k * math.pi / 16.0)
    d[0, :] *= math.sqrt(1.0 / 8.0)
    d[1:, :] *= math.sqrt(2.0 / 8.0)
    return d


_DCT = _dct_matrix()


def dct8x8(blocks: np.ndarray) -> np.ndarray:
    """Orthonormal 2-d DCT of trailing 8x8 axes (float64)."""
    return np.matmul(np.matmul(_DCT, blocks), _DCT.T)


def idct8x8(coefs: np.ndarray) -> np.ndarray:
    """Inverse of dct8x8."""
    return np.matmul(np.matmul(_DCT.T, coefs), _DCT)


def jpeg_degrade(image: np.ndarray, quality: int) -> np.ndarray:
    """Grayscale JPEG quantization round trip at the given quality.

    Per 8x8 block: level shift by -0.5, orthonormal DCT, quantize on the
    0-255 coefficient scale with ties to even, dequantize, inverse DCT,
    shift back, clamp to [0, 1].  Edge blocks of images whose sides are not
    multiples of 8 use replication padding, cropped after decode.
    """
    q = quant_table(quality).astype(np.float64)
    h, w = image.shape
    hp, wp = -(-h // 8) * 8, -(-w // 8) * 8
    padded = np.pad(image.astype(np.float64), ((0, hp - h), (0, wp - w)),
                    mode="edge")
    blocks = (padded - 0.5).reshape(hp // 8, 8, wp // 8, 8)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    coef = dct8x8(blocks) * 255.0
    coef = np.round(coef / q) * q / 255.0
    rec = idct8x8(coef) + 0.5
    rec = rec.reshape(hp // 8, wp // 8, 8, 8).transpose(0, 2, 1, 3)
    rec = rec.reshape(hp, wp)[:h, :w]
    return np.clip(rec, 0.0, 1.0).astype(np.float32)


def apply_noise(image: np.ndarray, spec: NoiseSpec, rng: Rng) -> np.ndarray:
    if spec.source == AWGN:
        return add_awgn(image, spec.level, rng)
    return jpeg_degrade(image, int(spec.level))


# ---------------------------------------------------------------------------
# noise sampling
# ---------------------------------------------------------------------------

def sample_noise_spec(rng: Rng) -> NoiseSpec:
    """Fair coin between sources, level uniform in the source's range."""
    if rng.uniform() < 0.5:
        return NoiseSpec(AWGN, rng.uniform(lo=0.0, hi=AWGN_SIGMA_MAX))
    return NoiseSpec(JPEG, rng.integers(JPEG_QUALITY_MIN, JPEG_QUALITY_MAX + 1))


class NoiseSampler:
    """Noise domain described by a compact text form.

    Components are joined with "+" and picked with equal probability; each is
    ``source=lo..hi`` (uniform range) or ``source=a,b,c`` (uniform choice).
    Examples: "awgn=0..55+jpeg=5..100" (the default), "awgn=5,50".
    """

    def __init__(self, descriptor: str = DEFAULT_NOISE):
        self.descriptor = descriptor
        self._parts = []
        for chunk in descriptor.split("+"):
            src, _, levels = chunk.partition("=")
            src = src.strip().lower()
            if src not in (AWGN, JPEG) or not levels:
                raise ValueError(f"bad noise descriptor component {chunk!r}")
            if ".." in levels:
                lo, hi = (float(v) for v in levels.split(".."))
                if not lo <= hi:
                    raise ValueError(f"bad noise range {chunk!r}")
                self._parts.append((src, "range", (lo, hi)))
            else:
                vals = tuple(float(v) for v in levels.split(","))
                self._parts.append((src, "choice", vals))
        # validate every reachable level eagerly
        for src, kind, arg in self._parts:
            probe = arg if kind == "choice" else arg
            for v in probe:
                NoiseSpec(src, round(v) if src == JPEG else v)

    def sample(self, rng: Rng) -> NoiseSpec:
        src, kind, arg = self._parts[rng.integers(0, len(self._parts))]
        if kind == "range":
            lo, hi = arg
            level = lo if hi == lo else rng.uniform(lo=lo, hi=hi)
        else:
            level = arg[rng.integers(0, len(arg))]
        if src == JPEG:
            level = int(round(level))
        return NoiseSpec(src, level)

    @property
    def sources(self):
        return sorted({src for src, _, _ in self._parts})


# ---------------------------------------------------------------------------
# graded evaluation grids
# ---------------------------------------------------------------------------

@dataclass
class EvalGrid:
    """Ordered (image index, noise spec) pairs for a graded test set."""
    entries: list

    def __len__(self):
        return len(self.entries)


def make_eval_grid(kind: str, n: int) -> EvalGrid:
    """Graded grid over n images: sigma_i = i*55/n, or q_i spanning [5, 100].

    For n = 68 the endpoints reproduce the reference grid: sigma_67 = 54.191
    and q ranging 5..100 inclusive.
    """
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    entries = []
    for i in range(n):
        if kind == AWGN:
            spec = NoiseSpec(AWGN, i * AWGN_SIGMA_MAX / n)
        elif kind == JPEG:
            span = max(n - 1, 1)
            spec = NoiseSpec(JPEG, round(JPEG_QUALITY_MIN
                                         + i * (JPEG_QUALITY_MAX - JPEG_QUALITY_MIN)
                                         / span))
        else:
            raise ValueError(f"unknown grid kind {kind!r}")
        entries.append((i, spec))
    return EvalGrid(entries)


def write_grid_csv(path, grid: EvalGrid) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("image_index,source,level\n")
        for idx, spec in grid.entries:
            lvl = int(spec.level) if spec.source == JPEG else repr(spec.level)
            f.write(f"{idx},{spec.source},{lvl}\n")


def read_grid_csv(path) -> EvalGrid:
    entries = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "image_index,source,level":
            raise ValueError(f"{path}: not an evaluation grid CSV")
        for line in f:
            if not line.strip():
                continue
            idx, src, lvl = line.strip().split(",")
            entries.append((int(idx), NoiseSpec(src, float(lvl))))
    return EvalGrid(entries)


# ---------------------------------------------------------------------------
# image I/O (PGM P5 required; PNG optional via Pillow)
# ---------------------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale file, rounding [0,1] floats to bytes."""
    data = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0),
                   0, 255).astype(np.uint8)
    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image
        Image.fromarray(data, mode="L").save(path)
        return
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (or PNG) as float32 pixels v/255."""
    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image
        img = Image.open(path)
        if img.mode != "L":
            img = img.convert("L")
        data = np.asarray(img, dtype=np.uint8)
        return (data.astype(np.float32)) / 255.0
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: unsupported bit depth (maxval {maxval})")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated PGM pixel data")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# procedural test images
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("gradient", "checker", "fractal", "mixed")


def _gradient(size, rng):
    h, w = size
    theta = rng.uniform(lo=0.0, hi=2.0 * math.pi)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = x * math.cos(theta) + y * math.sin(theta)
    lo, hi = ramp.min(), ramp.max()
    return (ramp - lo) / (hi - lo) if hi > lo else np.full(size, 0.5)


def _checker(size, rng):
    h, w = size
    cell = rng.integers(4, max(5, min(h, w) // 4 + 1))
    ox = rng.integers(0, cell)
    oy = rng.integers(0, cell)
    lo = rng.uniform(lo=0.0, hi=0.35)
    hi = rng.uniform(lo=0.65, hi=1.0)
    y, x = np.mgrid[0:h, 0:w]
    pattern = ((x + ox) // cell + (y + oy) // cell) % 2
    return np.where(pattern == 0, lo, hi)


def _fractal(size, rng, octaves=4, base=4, persistence=0.55):
    h, w = size
    out = np.zeros(size, dtype=np.float64)
    amp = 1.0
    for o in range(octaves):
        f = base * (2 ** o)
        lattice = rng.uniform((f + 1) * (f + 1)).reshape(f + 1, f + 1)
        uy = np.linspace(0.0, f, h, endpoint=False)
        ux = np.linspace(0.0, f, w, endpoint=False)
        iy = np.minimum(uy.astype(np.int64), f - 1)
        ix = np.minimum(ux.astype(np.int64), f - 1)
        ty = uy - iy
        tx = ux - ix
        ty = ty * ty * (3.0 - 2.0 * ty)  # smoothstep
        tx = tx * tx * (3.0 - 2.0 * tx)
        v00 = lattice[np.ix_(iy, ix)]
        v01 = lattice[np.ix_(iy, ix + 1)]
        v10 = lattice[np.ix_(iy + 1, ix)]
        v11 = lattice[np.ix_(iy + 1, ix + 1)]
        top = v00 + (v01 - v00) * tx[None, :]
        bot = v10 + (v11 - v10) * tx[None, :]
        out += amp * (top + (bot - top) * ty[:, None])
        amp *= persistence
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.full(size, 0.5)


def synth_image(kind: str, size, rng: Rng) -> np.ndarray:
    """Deterministic procedural grayscale image with spatial structure."""
    if isinstance(size, int):
        size = (size, size)
    if kind == "gradient":
        img = _gradient(size, rng)
    elif kind == "checker":
        img = _checker(size, rng)
    elif kind == "fractal":
        img = _fractal(size, rng)
    elif kind == "mixed":
        parts = np.stack([_gradient(size, rng), _checker(size, rng),
                          _fractal(size, rng)])
        wts = 0.25 + rng.uniform(3)
        mix = np.tensordot(wts / wts.sum(), parts, axes=1)
        lo, hi = mix.min(), mix.max()
        img = (mix - lo) / (hi - lo) if hi > lo else mix
    else:
        raise ValueError(f"unknown synthetic image kind {kind!r}; "
                         f"expected one of {SYNTH_KINDS}")
    return img.astype(np.float32)


def synth_dataset(count: int, size, seed: int, kind: str = "mixed") -> list:
    """Per-image streams derived from (seed, index) so order is irrelevant."""
    return [synth_image(kind, size, Rng(derive_seed(seed, "synth", i)))
            for i in range(count)]
