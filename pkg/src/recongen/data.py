"""Synthetic textures, noise injection, augmentation and pair persistence."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

RECIPES = ("grf", "stripes", "checker", "gradient", "flat", "mixed", "patchwork")
_BASE = ("grf", "stripes", "checker", "gradient", "flat")
SPLITS = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian noise, ``sigma`` in [0, 1] intensity units.

    ``kind="heteroscedastic"`` uses a signal-dependent std ``sigma + slope * y``.
    """

    sigma: float
    kind: str = "gaussian"
    slope: float = 0.0

    def __post_init__(self):
        if self.sigma < 0 or self.slope < 0:
            raise ValueError("noise level must be non-negative")
        if self.kind not in ("gaussian", "heteroscedastic"):
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def from_255(cls, sigma255: float, **kw) -> "NoiseModel":
        return cls(sigma255 / 255.0, **kw)


def _grf(rng, size, channels, exponent=2.8):
    f = np.sqrt(np.fft.fftfreq(size)[:, None] ** 2 + np.fft.fftfreq(size)[None, :] ** 2)
    f[0, 0] = 1.0
    amp = f ** (-exponent / 2)
    amp[0, 0] = 0.0
    lum = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * amp))
    lum /= lum.std() + 1e-12
    img = np.empty((size, size, channels))
    tint = rng.uniform(0.6, 1.0, channels)
    for c in range(channels):
        chroma = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * amp))
        chroma /= chroma.std() + 1e-12
        img[..., c] = tint[c] * lum + 0.3 * chroma
    contrast = rng.uniform(0.08, 0.16)
    return rng.uniform(0.35, 0.65) + contrast * img / np.abs(img).max() * 2.5


def _stripes(rng, size, channels, freq=None):
    freq = rng.uniform(0.08, 0.25) if freq is None else freq
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    color = rng.uniform(0.1, 0.3, channels)
    return rng.uniform(0.35, 0.65) + wave[..., None] * color


def _checker(rng, size, channels):
    period = int(rng.integers(4, 17))
    yy, xx = np.mgrid[0:size, 0:size]
    off = rng.integers(0, period, 2)
    mask = (((yy + off[0]) // period + (xx + off[1]) // period) % 2).astype(np.float64)
    a, b = rng.uniform(0.15, 0.85, (2, channels))
    return a + mask[..., None] * (b - a)


def _gradient(rng, size, channels):
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    ramp = xx * np.cos(theta) + yy * np.sin(theta)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    a, b = rng.uniform(0.2, 0.8, (2, channels))
    return a + ramp[..., None] * (b - a)


def _flat(rng, size, channels):
    return np.broadcast_to(rng.uniform(0.1, 0.9, channels), (size, size, channels)).copy()


def _one(recipe, rng, size, channels, **kw):
    if recipe == "mixed":
        recipe = _BASE[int(rng.integers(len(_BASE)))]
    if recipe == "patchwork":
        top, bottom = slice(0, size // 2), slice(size // 2, None)
        img = np.empty((size, size, channels))
        for rows in (top, bottom):
            for cols in (top, bottom):
                img[rows, cols] = _one("mixed", rng, size, channels)[rows, cols]
        return img
    if recipe == "grf":
        return _grf(rng, size, channels, **kw)
    if recipe == "stripes":
        return _stripes(rng, size, channels, **kw)
    if recipe == "checker":
        return _checker(rng, size, channels)
    if recipe == "gradient":
        return _gradient(rng, size, channels)
    if recipe == "flat":
        return _flat(rng, size, channels)
    raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")


def generate_textures(n: int, size: int, recipe: str = "mixed", seed: int = 0,
                      channels: int = 3, **kw) -> list[np.ndarray]:
    """Deterministic procedural images in [0, 1].

    Image ``i`` depends only on ``(recipe, seed, i)``; extra keyword
    arguments go to the recipe (e.g. ``freq`` for ``"stripes"``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    root = np.random.SeedSequence(seed)
    out = []
    for child in root.spawn(n):
        rng = np.random.default_rng(child)
        out.append(np.clip(_one(recipe, rng, size, channels, **kw), 0.0, 1.0))
    return out


def quantize(y) -> np.ndarray:
    """Snap to the 8-bit grid so clean PNG storage is exact."""
    return np.round(np.clip(y, 0.0, 1.0) * 255.0) / 255.0


def add_noise(y, model: NoiseModel, seed) -> np.ndarray:
    """``y + sigma * eps``; the result is deliberately not clamped."""
    y = np.asarray(y, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(y.shape)
    if model.kind == "heteroscedastic":
        return y + (model.sigma + model.slope * y) * eps
    return y + model.sigma * eps


def _dihedral(img, k):
    img = np.rot90(img, k % 4, axes=(0, 1))
    if k >= 4:
        img = img[:, ::-1]
    return np.ascontiguousarray(img)


def augment(pair, rng, k: int | None = None):
    """Apply one of the 8 flip/rotation transforms to both images.

    ``k = 0`` is the identity; ``k`` is drawn from ``rng`` when omitted.
    """
    x, y = pair
    if x.shape[0] != x.shape[1]:
        raise ValueError(f"augment needs square patches, got {x.shape[:2]}")
    if k is None:
        k = int(rng.integers(8))
    return _dihedral(x, k), _dihedral(y, k)


def crop_patch(pair, size: int, rng):
    x, y = pair
    h, w = x.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    return x[r:r + size, c:c + size], y[r:r + size, c:c + size]


def sample_batch(xs, ys, batch_size: int, patch: int, seed: int, step: int, aug: bool = True):
    """Cropped, augmented training batch for one optimisation step.

    Sample ``j`` of step ``step`` draws from its own stream keyed by
    ``(seed, step, j)``.
    """
    bx, by = [], []
    for j in range(batch_size):
        rng = np.random.default_rng([seed, step, j])
        i = int(rng.integers(len(xs)))
        pair = crop_patch((xs[i], ys[i]), patch, rng)
        if aug:
            pair = augment(pair, rng)
        bx.append(pair[0])
        by.append(pair[1])
    return np.stack(bx), np.stack(by)


# --- persistence -------------------------------------------------------------

_MAGIC = "RGNF1"


def write_float_image(path, arr) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    header = f"{_MAGIC} {arr.shape[0]} {arr.shape[1]} {arr.shape[2]} <f4\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_float_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        line = fh.readline(64)
        parts = line.decode("ascii", errors="replace").split()
        if len(parts) != 5 or parts[0] != _MAGIC or parts[4] != "<f4":
            raise ValueError(f"{path}: corrupt float-image header")
        shape = tuple(int(p) for p in parts[1:4])
        data = fh.read()
    if len(data) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path}: payload does not match header shape {shape}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def write_png(path, y) -> None:
    q = np.round(np.clip(np.asarray(y, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(q[..., 0] if q.shape[-1] == 1 else q).save(path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def save_pair(clean_path, noisy_path, pair) -> None:
    x, y = pair
    write_png(clean_path, y)
    write_float_image(noisy_path, x)


def load_pair(clean_path, noisy_path, shape=None):
    for p in (clean_path, noisy_path):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    y = read_png(clean_path)
    x = read_float_image(noisy_path).astype(np.float64)
    if x.shape != y.shape:
        raise ValueError(f"noisy {x.shape} and clean {y.shape} disagree")
    if shape is not None and tuple(shape) != x.shape:
        raise ValueError(f"expected shape {tuple(shape)}, found {x.shape}")
    return x, y


@dataclass
class ManifestEntry:
    split: str
    clean: str
    noisy: str
    sigma: float
    seed: int
    shape: tuple


MANIFEST_FIELDS = ["split", "clean", "noisy", "sigma", "seed", "shape", "recipe"]


def generate_dataset(out_dir, n: int, size: int, recipe: str = "mixed", seed: int = 0,
                     noise: NoiseModel = NoiseModel(25 / 255), fractions=(0.8, 0.1, 0.1),
                     channels: int = 3) -> Path:
    """Write clean PNGs, noisy float images and ``manifest.tsv``.

    Noise seeds are drawn from one stream per split so that train, val and
    test realisations never share a seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ys = generate_textures(n, size, recipe, seed, channels)
    counts = np.floor(np.asarray(fractions) * n).astype(int)
    counts[0] = n - counts[1:].sum()
    splits = np.repeat(list(SPLITS), counts)
    rows = []
    per_split = {s: 0 for s in SPLITS}
    for i, (y, split) in enumerate(zip(ys, splits)):
        k = per_split[split]
        per_split[split] += 1
        nseed = int(np.random.SeedSequence([seed, SPLITS[split], k]).generate_state(1)[0])
        y = quantize(y)
        x = add_noise(y, noise, nseed)
        clean, noisy = f"{split}_{k:05d}_clean.png", f"{split}_{k:05d}_noisy.f32"
        save_pair(out / clean, out / noisy, (x, y))
        rows.append([split, clean, noisy, repr(noise.sigma), nseed, "x".join(map(str, y.shape)), recipe])
    with open(out / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return out / "manifest.tsv"


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            entries.append(ManifestEntry(row["split"], row["clean"], row["noisy"], float(row["sigma"]),
                                         int(row["seed"]), tuple(int(v) for v in row["shape"].split("x"))))
    return entries


def load_split(manifest, split: str | None = None):
    """Load every pair of ``split`` (all splits when ``None``) as stacked arrays."""
    manifest = Path(manifest)
    xs, ys = [], []
    for e in read_manifest(manifest):
        if split is not None and e.split != split:
            continue
        x, y = load_pair(manifest.parent / e.clean, manifest.parent / e.noisy, e.shape)
        xs.append(x)
        ys.append(y)
    if not xs:
        raise ValueError(f"no entries for split {split!r} in {manifest}")
    return np.stack(xs), np.stack(ys)


def toy_pairs(n: int, size: int, recipe: str = "mixed", seed: int = 0, sigma: float = 25 / 255,
              channels: int = 3, **kw):
    """In-memory ``(x, y)`` stacks; clean images are 8-bit quantised."""
    ys = np.stack([quantize(y) for y in generate_textures(n, size, recipe, seed, channels, **kw)])
    rng = np.random.default_rng([seed, 0xA11CE])
    xs = ys + sigma * rng.standard_normal(ys.shape)
    return xs, ys
