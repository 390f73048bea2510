"""Synthetic ambiguous-segmentation data and dataset file IO.

Each sample is a blurred, noisy image of a random ellipse plus several
rater masks that disagree in two ways: a rater may call the lesion
absent entirely (probability p_absent), and present calls perturb the
boundary by an integer dilation/erosion radius. This reproduces the
mask-presence and boundary-extent ambiguity the model is meant to learn.

Datasets live on disk as one directory per sample holding binary PGM
(P5) files: image.pgm plus mask_0.pgm .. mask_{R-1}.pgm with pixel
values in {0, 255}. Images are quantized to 8-bit levels at generation
time so a write/read round trip is bit-exact.
"""

import os
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage


@dataclass
class SynthParams:
    image_size: int = 32
    num_raters: int = 4
    p_absent: float = 0.25
    boundary_jitter: int = 1
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.num_raters < 2:
            raise ValueError(f"num_raters must be >= 2, got {self.num_raters}")
        if not 0.0 <= self.p_absent < 1.0:
            raise ValueError(f"p_absent must be in [0, 1), got {self.p_absent}")
        if not 0 <= self.boundary_jitter < self.image_size / 4:
            raise ValueError(
                f"boundary_jitter must be in [0, {self.image_size / 4}), "
                f"got {self.boundary_jitter}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(eq=False)
class AmbiguousSample:
    """One image with per-rater binary masks (and the generating ellipse)."""

    image: np.ndarray  # (H, W) float32 in [0, 1], 8-bit quantized
    masks: np.ndarray  # (R, H, W) uint8 in {0, 1}
    base_mask: Optional[np.ndarray] = None  # generation-time ellipse, diagnostic

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2-d, got shape {self.image.shape}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")
        if self.masks.ndim != 3 or self.masks.shape[1:] != self.image.shape:
            raise ValueError(f"masks shape {self.masks.shape} vs image {self.image.shape}")
        if self.masks.shape[0] < 2:
            raise ValueError("need at least 2 rater masks")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("masks must be binary")

    @property
    def num_raters(self) -> int:
        return self.masks.shape[0]


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(size * 0.35, size * 0.65, size=2)
    a = rng.uniform(size / 8, size / 4)
    b = rng.uniform(size / 8, size / 4)
    angle = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def _jittered(base: np.ndarray, radius: int) -> np.ndarray:
    if radius > 0:
        return ndimage.binary_dilation(base, iterations=radius).astype(np.uint8)
    if radius < 0:
        return ndimage.binary_erosion(base, iterations=-radius).astype(np.uint8)
    return base.copy()


def generate_sample(params: SynthParams, rng: np.random.Generator) -> AmbiguousSample:
    """Draw one ellipse image and its disagreeing rater masks."""
    size = params.image_size
    base = _ellipse_mask(size, rng)

    intensity = 0.25 + 0.5 * base.astype(np.float64)
    intensity = ndimage.gaussian_filter(intensity, sigma=1.0)
    if params.noise_sigma > 0:
        intensity = intensity + params.noise_sigma * rng.standard_normal((size, size))
    image = np.clip(intensity, 0.0, 1.0)
    image = (np.round(image * 255.0) / 255.0).astype(np.float32)

    masks = np.zeros((params.num_raters, size, size), dtype=np.uint8)
    for r in range(params.num_raters):
        if rng.random() < params.p_absent:
            continue  # this rater calls the lesion absent
        radius = int(rng.integers(-params.boundary_jitter, params.boundary_jitter + 1))
        masks[r] = _jittered(base, radius)
    if not masks.any():
        masks[0] = base  # keep at least one rater seeing the lesion
    return AmbiguousSample(image=image, masks=masks, base_mask=base)


def generate_dataset(params: SynthParams, n: int) -> list[AmbiguousSample]:
    """n samples from independent per-sample streams spawned off the seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    streams = np.random.SeedSequence(params.seed).spawn(n)
    return [generate_sample(params, np.random.default_rng(s)) for s in streams]


# -- PGM (P5) IO ----------------------------------------------------------------


def write_pgm(path, array: np.ndarray) -> None:
    """Write a 2-d uint8 array as a binary PGM with maxval 255."""
    a = np.asarray(array)
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ValueError(f"write_pgm expects a 2-d uint8 array, got {a.dtype}{a.shape}")
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        f.write(a.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (maxval 255) back into a 2-d uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval as whitespace/comment-separated
    # tokens, then exactly one whitespace byte before the pixel payload
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # the single whitespace byte after maxval
    if any(not re.fullmatch(rb"\d+", t) for t in tokens):
        raise ValueError(f"{path}: malformed PGM header tokens {tokens}")
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def _sample_dir(root, index: int) -> str:
    return os.path.join(root, f"{index:05d}")


def write_dataset(samples, root) -> None:
    """Lay out samples as NNNNN/image.pgm plus NNNNN/mask_r.pgm files."""
    os.makedirs(root, exist_ok=True)
    for i, s in enumerate(samples):
        d = _sample_dir(root, i)
        os.makedirs(d, exist_ok=True)
        write_pgm(os.path.join(d, "image.pgm"), np.round(s.image * 255.0).astype(np.uint8))
        for r in range(s.num_raters):
            write_pgm(os.path.join(d, f"mask_{r}.pgm"), s.masks[r] * np.uint8(255))


def read_dataset(root) -> list[AmbiguousSample]:
    """Exact inverse of write_dataset (base_mask is not persisted)."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = sorted(d for d in os.listdir(root) if re.fullmatch(r"\d{5}", d))
    if not dirs:
        raise ValueError(f"{root}: no NNNNN sample directories found")
    samples = []
    for d in dirs:
        sdir = os.path.join(root, d)
        image_path = os.path.join(sdir, "image.pgm")
        if not os.path.isfile(image_path):
            raise FileNotFoundError(f"{image_path} is missing")
        image = (read_pgm(image_path).astype(np.float32) / np.float32(255.0)).astype(np.float32)
        masks = []
        r = 0
        while os.path.isfile(os.path.join(sdir, f"mask_{r}.pgm")):
            m = read_pgm(os.path.join(sdir, f"mask_{r}.pgm"))
            bad = ~((m == 0) | (m == 255))
            if bad.any():
                raise ValueError(f"{sdir}/mask_{r}.pgm: mask pixels must be 0 or 255")
            masks.append((m // 255).astype(np.uint8))
            r += 1
        if r < 2:
            raise ValueError(f"{sdir}: found {r} rater masks, need at least 2")
        samples.append(AmbiguousSample(image=image, masks=np.stack(masks)))
    return samples
