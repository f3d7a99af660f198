"""Procedural datasets for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .signalio import Signal, normalize, sphere_angles


def sinusoid_texture(rng: np.random.Generator, size=(16, 16), components: int = 3,
                     max_freq: float = 3.0) -> Signal:
    """Sum of random 2-d sinusoids, stored as an 8-bit grayscale image.

    Frequencies are uniform in [-max_freq, max_freq] cycles per image on each
    axis, phases uniform, amplitudes in [0.5, 1].
    """
    h, w = size
    y, x = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros(size)
    for _ in range(components):
        fy, fx = rng.uniform(-max_freq, max_freq, 2)
        amp = rng.uniform(0.5, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        field += amp * np.sin(2 * np.pi * (fy * y + fx * x) + phase)
    pixels = np.rint(255 * normalize(field, field.min(), field.max()))
    return Signal("image", (pixels / 255.0)[..., None], (0.0, 255.0))


def textures(n: int, seed: int, size=(16, 16)) -> list[Signal]:
    rng = np.random.default_rng(seed)
    return [sinusoid_texture(rng, size) for _ in range(n)]


def sphere_field(rng: np.random.Generator, lat_count: int = 46, lon_count: int = 90,
                 max_degree: int = 4) -> Signal:
    """Band-limited random field on the sphere, in kelvin-like units.

    Built from low-order real spherical-harmonic-like terms
    ``cos(lat)^|m| * P(sin lat) * cos(m lon + phase)``, with a
    pole-to-equator gradient added so it resembles a temperature map.
    """
    lat, lon = sphere_angles(lat_count, lon_count)
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    field = 250.0 + 40.0 * np.cos(lat) ** 2
    for degree in range(1, max_degree + 1):
        for m in range(0, degree + 1):
            coef = rng.normal(0, 8.0 / degree)
            phase = rng.uniform(0, 2 * np.pi)
            radial = np.cos(lat) ** m * np.sin(lat) ** (degree - m)
            field += coef * radial * np.cos(m * lon + phase)
    lo, hi = float(field.min()), float(field.max())
    return Signal("grid2d_sphere", normalize(field, lo, hi)[..., None], (lo, hi))


def sphere_fields(n: int, seed: int, lat_count: int = 46, lon_count: int = 90) -> list[Signal]:
    rng = np.random.default_rng(seed)
    return [sphere_field(rng, lat_count, lon_count) for _ in range(n)]
