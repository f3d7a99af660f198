"""Signals as coordinate/feature sets: file formats, coordinate grids, patches.

Features are stored normalized to [0, 1] with shape ``feature_shape +
(channels,)``. Coordinates are generated on demand: euclidean grids span a
symmetric range per axis (``[-1, 1]``, or ``[-5, 5]`` for audio), sphere grids
use unit 3-vectors.

Supported files:

* binary netpbm, P5 (gray) and P6 (RGB), maxval <= 255
* RIFF WAV, PCM16 mono
* grid files: 24-byte header ``b"CGRD"``, u8 rank, u8 channels, four
  little-endian u32 axis sizes (unused ones zero), two reserved bytes, then
  little-endian float64 values in row-major order, channels last
"""
from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

MODALITIES = ("image", "audio", "grid2d_sphere", "volume")
GRID_MAGIC = b"CGRD"
GRID_HEADER = struct.Struct("<4sBB4I2x")
assert GRID_HEADER.size == 24


class FormatError(ValueError):
    pass


@dataclass
class Signal:
    modality: str
    features: np.ndarray
    raw_range: tuple[float, float] = (0.0, 1.0)
    sample_rate: int | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim < 2:
            raise ValueError("features need at least one spatial axis and a channel axis")

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.features.shape[:-1]

    @property
    def channels(self) -> int:
        return self.features.shape[-1]

    @property
    def num_points(self) -> int:
        return int(np.prod(self.feature_shape))

    def coords(self) -> np.ndarray:
        return coords_for(self.modality, self.feature_shape)

    def denormalized(self) -> np.ndarray:
        lo, hi = self.raw_range
        return self.features * (hi - lo) + lo

    def with_features(self, features) -> "Signal":
        return replace(self, features=np.asarray(features, dtype=np.float64))


@dataclass
class Patch:
    """One tile of a signal, flattened to coordinate and feature rows."""

    coords: np.ndarray
    values: np.ndarray
    shape: tuple[int, ...]
    origin: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("empty patch")
        if len(self.coords) != len(self.values):
            raise ValueError("coords and values disagree on the number of points")


@dataclass(frozen=True)
class CoordinateSpec:
    kind: str
    counts: tuple[int, ...]
    bound: float = 1.0

    def __post_init__(self):
        if self.kind not in ("euclidean_grid", "spherical"):
            raise ValueError(f"unknown coordinate kind {self.kind!r}")
        if not self.counts or any(c < 1 for c in self.counts):
            raise ValueError("sample counts must be positive")
        if self.kind == "spherical" and len(self.counts) != 2:
            raise ValueError("spherical grids have two axes (lat, lon)")
        if not self.bound > 0:
            raise ValueError("bound must be positive")


@dataclass
class PatchLayout:
    patch_shape: tuple[int, ...]
    grid: tuple[int, ...]
    padding: tuple[int, ...]
    feature_shape: tuple[int, ...]
    channels: int
    modality: str = "image"
    raw_range: tuple[float, float] = (0.0, 1.0)
    sample_rate: int | None = field(default=None)

    @property
    def count(self) -> int:
        return int(np.prod(self.grid))


def coord_bound(modality: str) -> float:
    return 5.0 if modality == "audio" else 1.0


def coord_dim(modality: str, rank: int) -> int:
    return 3 if modality == "grid2d_sphere" else rank


# ---------------------------------------------------------------- coordinates

def make_coords(grid: CoordinateSpec) -> np.ndarray:
    """Row-major enumeration of grid points, one row per point."""
    if grid.kind == "spherical":
        return spherical_coords(*grid.counts)
    axes = [_axis(n, grid.bound) for n in grid.counts]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _axis(n: int, r: float) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.linspace(-r, r, n)


def sphere_angles(lat_count: int, lon_count: int):
    lat = _axis(lat_count, np.pi / 2)
    lon = 2.0 * np.pi * np.arange(lon_count) / lon_count
    return lat, lon


def spherical_coords(lat_count: int, lon_count: int, lat_slice=slice(None), lon_slice=slice(None)) -> np.ndarray:
    """(cos lat cos lon, cos lat sin lon, sin lat) per grid cell, row-major."""
    if lat_count < 1 or lon_count < 1:
        raise ValueError("counts must be positive")
    lat, lon = sphere_angles(lat_count, lon_count)
    lat, lon = np.meshgrid(lat[lat_slice], lon[lon_slice], indexing="ij")
    lat, lon = lat.ravel(), lon.ravel()
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def coords_for(modality: str, shape, origin=None, full_shape=None) -> np.ndarray:
    """Coordinates for a tile of ``shape``.

    Euclidean tiles get their own grid spanning the full normalized range.
    Sphere tiles keep the true position of their cells on the globe.
    """
    shape = tuple(shape)
    if modality == "grid2d_sphere":
        full = tuple(full_shape or shape)
        origin = tuple(origin or (0, 0))
        sl = [slice(o, o + n) for o, n in zip(origin, shape)]
        return spherical_coords(full[0], full[1], sl[0], sl[1])
    return make_coords(CoordinateSpec("euclidean_grid", shape, coord_bound(modality)))


# ---------------------------------------------------------------- patches

def _check_patch_shape(signal: Signal, patch_shape) -> tuple[int, ...]:
    patch_shape = tuple(int(p) for p in patch_shape)
    if len(patch_shape) != len(signal.feature_shape) or any(p < 1 for p in patch_shape):
        raise ValueError(f"patch shape {patch_shape} does not fit feature shape {signal.feature_shape}")
    return patch_shape


def random_patch(signal: Signal, patch_shape, rng: np.random.Generator) -> Patch:
    """A uniformly random axis-aligned crop."""
    patch_shape = _check_patch_shape(signal, patch_shape)
    if any(p > n for p, n in zip(patch_shape, signal.feature_shape)):
        raise ValueError(f"patch {patch_shape} larger than signal {signal.feature_shape}")
    origin = tuple(int(rng.integers(0, n - p + 1)) for p, n in zip(patch_shape, signal.feature_shape))
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    values = signal.features[sl].reshape(-1, signal.channels)
    coords = coords_for(signal.modality, patch_shape, origin, signal.feature_shape)
    return Patch(coords, values, patch_shape, origin)


def partition(signal: Signal, patch_shape) -> tuple[list[Patch], PatchLayout]:
    """Non-overlapping tiling in row-major patch order.

    Axes that do not divide evenly are padded at the end by repeating the
    edge value.
    """
    patch_shape = _check_patch_shape(signal, patch_shape)
    grid = tuple(-(-n // p) for n, p in zip(signal.feature_shape, patch_shape))
    padding = tuple(g * p - n for g, p, n in zip(grid, patch_shape, signal.feature_shape))
    feats = signal.features
    if any(padding):
        feats = np.pad(feats, [(0, q) for q in padding] + [(0, 0)], mode="edge")
    padded_shape = feats.shape[:-1]
    patches = []
    for idx in product(*(range(g) for g in grid)):
        origin = tuple(i * p for i, p in zip(idx, patch_shape))
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
        coords = coords_for(signal.modality, patch_shape, origin, padded_shape)
        if signal.modality == "grid2d_sphere" and any(padding):
            coords = _sphere_coords_clamped(signal.feature_shape, origin, patch_shape)
        patches.append(Patch(coords, feats[sl].reshape(-1, signal.channels), patch_shape, origin))
    layout = PatchLayout(patch_shape, grid, padding, signal.feature_shape, signal.channels,
                         signal.modality, signal.raw_range, signal.sample_rate)
    return patches, layout


def _sphere_coords_clamped(shape, origin, patch_shape):
    # Padded sphere cells reuse the coordinates of the replicated edge cell.
    lat, lon = sphere_angles(*shape)
    li = np.minimum(np.arange(origin[0], origin[0] + patch_shape[0]), shape[0] - 1)
    lj = np.minimum(np.arange(origin[1], origin[1] + patch_shape[1]), shape[1] - 1)
    la, lo = np.meshgrid(lat[li], lon[lj], indexing="ij")
    la, lo = la.ravel(), lo.ravel()
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def reassemble(patches, layout: PatchLayout) -> Signal:
    """Stitch tiles back together and crop the padding."""
    if len(patches) != layout.count:
        raise ValueError(f"expected {layout.count} patches, got {len(patches)}")
    padded = tuple(g * p for g, p in zip(layout.grid, layout.patch_shape))
    out = np.empty(padded + (layout.channels,))
    n = int(np.prod(layout.patch_shape))
    for idx, patch in zip(product(*(range(g) for g in layout.grid)), patches):
        values = patch.values if isinstance(patch, Patch) else np.asarray(patch)
        if values.shape != (n, layout.channels):
            raise ValueError(f"patch values have shape {values.shape}, expected {(n, layout.channels)}")
        sl = tuple(slice(i * p, (i + 1) * p) for i, p in zip(idx, layout.patch_shape))
        out[sl] = values.reshape(layout.patch_shape + (layout.channels,))
    crop = tuple(slice(0, s) for s in layout.feature_shape)
    return Signal(layout.modality, out[crop], layout.raw_range, layout.sample_rate)


# ---------------------------------------------------------------- files

def normalize(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def load(path, modality: str | None = None) -> Signal:
    """Read a file into a normalized Signal."""
    path = os.fspath(path)
    if modality is None:
        modality = _guess_modality(path)
    if modality == "image":
        return read_pnm(path)
    if modality == "audio":
        return read_wav(path)
    if modality in ("grid2d_sphere", "volume"):
        return read_grid(path, modality)
    raise FormatError(f"unsupported modality {modality!r}")


def save(signal: Signal, path) -> None:
    """Write a Signal back in its source format, denormalized."""
    path = os.fspath(path)
    if signal.modality == "image":
        write_pnm(signal, path)
    elif signal.modality == "audio":
        write_wav(signal, path)
    else:
        write_grid(signal, path)


def _guess_modality(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return "image"
    if ext == ".wav":
        return "audio"
    if ext in (".grd", ".grid", ".cgrd"):
        with open(path, "rb") as f:
            head = f.read(GRID_HEADER.size)
        if len(head) == GRID_HEADER.size and head[:4] == GRID_MAGIC:
            return "volume" if head[4] == 3 else "grid2d_sphere"
    raise FormatError(f"cannot infer modality of {path!r}")


def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` header integers; returns them and the data offset."""
    tokens, pos, n = [], 2, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("corrupt netpbm header")
        tokens.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError("corrupt netpbm header")
    return tokens, pos + 1


def read_pnm(path) -> Signal:
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm type {magic!r} (only binary P5/P6)")
    (width, height, maxval), offset = _pnm_tokens(data, 3)
    if width < 1 or height < 1 or not 0 < maxval <= 255:
        raise FormatError(f"corrupt netpbm header: {width}x{height}, maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    if len(data) - offset < size:
        raise FormatError("truncated netpbm data")
    raw = np.frombuffer(data, np.uint8, size, offset).reshape(height, width, channels)
    return Signal("image", normalize(raw.astype(np.float64), 0.0, float(maxval)), (0.0, float(maxval)))


def write_pnm(signal: Signal, path) -> None:
    if len(signal.feature_shape) != 2 or signal.channels not in (1, 3):
        raise FormatError("netpbm needs a 2-d image with 1 or 3 channels")
    lo, hi = signal.raw_range
    maxval = int(round(hi))
    raw = np.clip(np.rint(signal.denormalized()), 0, maxval).astype(np.uint8)
    h, w = signal.feature_shape
    magic = b"P5" if signal.channels == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        f.write(raw.tobytes())


PCM16_RANGE = (-32768.0, 32767.0)


def read_wav(path) -> Signal:
    try:
        with wave.open(os.fspath(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise FormatError("only mono PCM16 WAV is supported")
            rate, frames = w.getframerate(), w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"corrupt WAV: {exc}") from None
    raw = np.frombuffer(frames, "<i2").astype(np.float64)
    if raw.size == 0:
        raise FormatError("WAV has no samples")
    return Signal("audio", normalize(raw, *PCM16_RANGE)[:, None], PCM16_RANGE, rate)


def write_wav(signal: Signal, path) -> None:
    if len(signal.feature_shape) != 1 or signal.channels != 1:
        raise FormatError("WAV output needs a mono 1-d signal")
    raw = np.clip(np.rint(signal.denormalized()[:, 0]), *PCM16_RANGE).astype("<i2")
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate or 16000)
        w.writeframes(raw.tobytes())


def read_grid(path, modality: str = "grid2d_sphere") -> Signal:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < GRID_HEADER.size:
        raise FormatError("truncated grid header")
    magic, rank, channels, *sizes = GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad grid magic {magic!r}")
    if not 1 <= rank <= 4 or channels < 1 or any(s < 1 for s in sizes[:rank]):
        raise FormatError(f"corrupt grid header: rank {rank}, channels {channels}, sizes {sizes}")
    shape = tuple(sizes[:rank]) + (channels,)
    count = int(np.prod(shape))
    if len(data) - GRID_HEADER.size != 8 * count:
        raise FormatError(f"grid payload has {len(data) - GRID_HEADER.size} bytes, expected {8 * count}")
    raw = np.frombuffer(data, "<f8", count, GRID_HEADER.size).reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(raw)):
        raise FormatError("grid contains NaN or infinite values")
    lo, hi = float(raw.min()), float(raw.max())
    return Signal(modality, normalize(raw, lo, hi), (lo, hi))


def write_grid(signal: Signal, path) -> None:
    write_grid_array(signal.denormalized(), path)


def write_grid_array(values: np.ndarray, path) -> None:
    """Write raw values (spatial axes then a channel axis) as a grid file."""
    values = np.asarray(values, dtype="<f8")
    spatial = values.shape[:-1]
    if not 1 <= len(spatial) <= 4:
        raise FormatError("grid rank must be 1..4")
    sizes = list(spatial) + [0] * (4 - len(spatial))
    with open(path, "wb") as f:
        f.write(GRID_HEADER.pack(GRID_MAGIC, len(spatial), values.shape[-1], *sizes))
        f.write(np.ascontiguousarray(values).tobytes())
