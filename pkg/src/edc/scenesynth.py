"""Synthetic paired-scene generation (labels / optical / SAR / clouds) and dataset IO.

All generators are pure functions of (seed, parameters): same arguments give
bit-identical arrays. Optical data is 4-band in [0,1], SAR is 1- or 2-pol in
[0,1], labels are uint8 class ids with 255 reserved for void.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

VOID_LABEL = 255
DEFAULT_TAU = 0.3
DEFAULT_OCTAVES = 3
# Whitish cloud color per optical band (slightly blue-tinted, like real haze).
CLOUD_COLOR = np.array([0.92, 0.94, 0.96, 0.90], dtype=np.float32)
# Class appearance is global, not per-scene: every scene renders class c with
# the same 4-band color, so models can generalize across scenes.
PALETTE_SEED = 9000


def class_palette(num_classes):
    """Fixed 4-band color per class id, shared by all scenes."""
    rng = np.random.default_rng(np.random.PCG64(PALETTE_SEED))
    return rng.uniform(0.15, 0.85, size=(num_classes, 4))


@dataclass
class CloudField:
    """Octave-summed gradient-noise opacity field rescaled to [0,1]."""

    values: np.ndarray  # H x W float32 in [0,1]
    octaves: int
    seed: int


@dataclass
class Sample:
    """One paired scene: cloudy/cloud-free optical, SAR, labels, cloud mask."""

    cloudy_opt: np.ndarray    # H x W x 4 float32 in [0,1]
    cloudfree_opt: np.ndarray  # H x W x 4 float32 in [0,1]
    sar: np.ndarray           # H x W x P float32 in [0,1], P in {1,2}
    labels: np.ndarray        # H x W uint8, 255 = void
    cloudmask: np.ndarray     # H x W uint8 in {0,1}
    id: str = field(default="")

    TENSOR_NAMES = ("cloudy_opt", "cloudfree_opt", "sar", "labels", "cloudmask")


def _fade(t):
    # Perlin's quintic easing: 6t^5 - 15t^4 + 10t^3
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def gradient_noise(height, width, cells, seed):
    """Single-octave 2-D gradient noise on a `cells x cells` lattice.

    The lattice spans the image, so lattice points fall at pixel coordinates
    (i*height/cells, j*width/cells); the noise is exactly zero there. Output
    is unscaled (roughly in [-0.9, 0.9]).
    """
    if height <= 0 or width <= 0:
        raise ValueError("dimensions must be positive")
    if cells < 1:
        raise ValueError("cells must be >= 1")
    rng = np.random.default_rng(np.random.PCG64(seed))
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells + 1, cells + 1))
    gx, gy = np.cos(angles), np.sin(angles)

    ys = np.arange(height, dtype=np.float64) * (cells / height)
    xs = np.arange(width, dtype=np.float64) * (cells / width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    y0 = np.minimum(y0, cells - 1)
    x0 = np.minimum(x0, cells - 1)
    fy = yy - y0
    fx = xx - x0

    def dot(iy, ix, dy, dx):
        return gy[y0 + iy, x0 + ix] * dy + gx[y0 + iy, x0 + ix] * dx

    n00 = dot(0, 0, fy, fx)
    n01 = dot(0, 1, fy, fx - 1.0)
    n10 = dot(1, 0, fy - 1.0, fx)
    n11 = dot(1, 1, fy - 1.0, fx - 1.0)

    uy, ux = _fade(fy), _fade(fx)
    nx0 = n00 + ux * (n01 - n00)
    nx1 = n10 + ux * (n11 - n10)
    return nx0 + uy * (nx1 - nx0)


def perlin_field(height, width, octaves, seed, base_cells=4, persistence=0.5):
    """Octave-summed gradient noise, affinely rescaled to [0,1]."""
    if height < 8 or width < 8:
        raise ValueError("height and width must be >= 8")
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    total = np.zeros((height, width), dtype=np.float64)
    amp = 1.0
    for o in range(octaves):
        cells = min(base_cells * (2 ** o), min(height, width) // 2)
        total += amp * gradient_noise(height, width, cells, seed + o)
        amp *= persistence
    lo, hi = total.min(), total.max()
    if hi > lo:
        total = (total - lo) / (hi - lo)
    else:
        total = np.zeros_like(total)
    return CloudField(values=total.astype(np.float32), octaves=octaves, seed=seed)


def _voronoi_labels(rng, size, num_classes):
    n_sites = 3 * num_classes
    sites = rng.integers(0, size, size=(n_sites, 2))
    classes = np.arange(n_sites) % num_classes
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    nearest = np.argmin(d2, axis=-1)
    labels = classes[nearest].astype(np.uint8)
    # Stamp one pixel per class so every id is guaranteed present.
    for c in range(num_classes):
        labels[sites[c, 0], sites[c, 1]] = c
    return labels


def synth_scene(seed, size, num_classes, sar_pols, tau=DEFAULT_TAU,
                octaves=DEFAULT_OCTAVES, cloud_gain=1.0):
    """Generate one paired scene.

    Labels come from a seeded Voronoi partition; cloud-free optical is a
    per-class 4-band palette plus low-amplitude texture; SAR is a per-class
    monotone mapping with multiplicative speckle; cloudy optical blends the
    cloud-free image toward a cloud color with Perlin opacity `c`, and the
    cloud mask is (c >= tau). `cloud_gain > 1` thickens clouds (opacity is
    clipped back to [0,1]).
    """
    if size < 32:
        raise ValueError("size must be >= 32")
    if not (2 <= num_classes <= 16):
        raise ValueError("num_classes must be in [2, 16]")
    if sar_pols not in (1, 2):
        raise ValueError("sar_pols must be 1 or 2")
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must lie in (0, 1)")

    rng = np.random.default_rng(np.random.PCG64(seed))
    labels = _voronoi_labels(rng, size, num_classes)

    palette = class_palette(num_classes)
    base = palette[labels]  # H x W x 4
    texture = np.zeros((size, size, 4))
    for b in range(4):
        texture[..., b] = 0.05 * (
            gradient_noise(size, size, max(size // 8, 2), seed + 1000 + b))
    cloudfree = np.clip(base + texture, 0.0, 1.0).astype(np.float32)

    # SAR: monotone map of the palette (class brightness order preserved,
    # evenly spaced so speckle cannot collapse neighboring classes),
    # degraded by multiplicative gamma speckle.
    order = np.argsort(np.argsort(palette.mean(axis=1)))
    sar_base = 0.25 + 0.55 * order / max(num_classes - 1, 1)
    sar = np.empty((size, size, sar_pols), dtype=np.float32)
    looks = 4.0
    for p in range(sar_pols):
        speckle = rng.gamma(looks, 1.0 / looks, size=(size, size))
        chan = sar_base[labels] * (0.8 + 0.2 * p) * speckle
        sar[..., p] = np.clip(chan, 0.0, 1.0)

    c = perlin_field(size, size, octaves, seed + 7).values.astype(np.float64)
    if cloud_gain != 1.0:
        c = np.clip(c * cloud_gain, 0.0, 1.0)
    cloudy = ((1.0 - c[..., None]) * cloudfree
              + c[..., None] * CLOUD_COLOR[None, None, :])
    cloudy = cloudy.astype(np.float32)
    zero = c == 0.0
    cloudy[zero] = cloudfree[zero]  # exact identity at zero opacity
    cloudmask = (c >= tau).astype(np.uint8)

    return Sample(cloudy_opt=cloudy, cloudfree_opt=cloudfree, sar=sar,
                  labels=labels, cloudmask=cloudmask, id=f"scene_{seed:016d}")


# ---------------------------------------------------------------------------
# On-disk dataset format: manifest.json + one raw little-endian blob per
# tensor (float32 for images, uint8 for labels/cloudmask; C order).

FORMAT_VERSION = 1

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class DatasetError(Exception):
    pass


def _tensor_dtype(name):
    return "uint8" if name in ("labels", "cloudmask") else "float32"


def write_dataset(samples, out_dir):
    """Write samples to `out_dir`; round-trip with read_dataset is bit-exact."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for idx, s in enumerate(samples):
        sid = s.id or f"sample_{idx:05d}"
        entry = {"id": sid}
        for name in Sample.TENSOR_NAMES:
            arr = getattr(s, name)
            dtype = _tensor_dtype(name)
            fname = f"{sid}_{name}.bin"
            np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tofile(
                os.path.join(out_dir, fname))
            entry[name] = {"file": fname, "shape": list(arr.shape),
                           "dtype": dtype}
        entries.append(entry)
    manifest = {"version": FORMAT_VERSION, "samples": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def read_dataset(in_dir):
    """Load a dataset directory written by write_dataset."""
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {path}: {e}")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')!r}")

    samples = []
    for entry in manifest["samples"]:
        tensors = {}
        for name in Sample.TENSOR_NAMES:
            if name not in entry:
                raise DatasetError(f"sample {entry.get('id')}: missing tensor entry '{name}'")
            meta = entry[name]
            blob = os.path.join(in_dir, meta["file"])
            if not os.path.exists(blob):
                raise DatasetError(f"missing tensor blob for '{name}': {blob}")
            dtype = _DTYPES[meta["dtype"]]
            shape = tuple(meta["shape"])
            expected = int(np.prod(shape)) * dtype.itemsize
            actual = os.path.getsize(blob)
            if actual != expected:
                raise DatasetError(
                    f"blob length mismatch for '{name}' ({blob}): "
                    f"expected {expected} bytes, got {actual}")
            tensors[name] = np.fromfile(blob, dtype=dtype).reshape(shape)
        samples.append(Sample(id=entry["id"], **tensors))
    return samples
