"""Shift-modulated sine networks.

A base network of ``depth`` sine layers and a final linear layer is shared by
every datapoint. A datapoint is described by a short latent vector that a
linear map turns into per-layer shifts (or scales) of the pre-activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Var

MODULATION_KINDS = ("shift", "scale", "scale_and_shift", "none")


@dataclass(frozen=True)
class SirenConfig:
    in_dim: int
    out_dim: int
    depth: int
    width: int
    latent_dim: int
    omega0: float = 50.0
    modulation_kind: str = "shift"

    def __post_init__(self):
        if self.modulation_kind not in MODULATION_KINDS:
            raise ValueError(f"modulation_kind must be one of {MODULATION_KINDS}, got {self.modulation_kind!r}")
        for name in ("in_dim", "out_dim", "depth", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        if (self.latent_dim == 0) != (self.modulation_kind == "none"):
            raise ValueError("latent_dim is 0 exactly when modulation_kind is 'none'")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")

    @property
    def has_shift(self) -> bool:
        return self.modulation_kind in ("shift", "scale_and_shift")

    @property
    def has_scale(self) -> bool:
        return self.modulation_kind in ("scale", "scale_and_shift")

    @property
    def modulation_rows(self) -> int:
        """Rows of the latent map: one block of depth*width per modulated quantity."""
        return self.depth * self.width * (int(self.has_shift) + int(self.has_scale))


def param_names(cfg: SirenConfig) -> list[str]:
    """Fixed parameter order, also the serialization order."""
    names = []
    for l in range(cfg.depth):
        names += [f"W{l}", f"b{l}"]
    names += ["W_out", "b_out"]
    if cfg.has_shift:
        names += [f"shift{l}" for l in range(cfg.depth)]
    if cfg.has_scale:
        names += [f"scale{l}" for l in range(cfg.depth)]
    return names


@dataclass
class BaseParams:
    """Shared network parameters.

    The latent map is stored as one (width x latent_dim) block per layer and
    quantity (``shift{l}``, ``scale{l}``); :attr:`latent_map` stacks them into
    the full matrix, shift blocks first.
    """

    config: SirenConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        cfg = self.config
        expected = {}
        for l in range(cfg.depth):
            expected[f"W{l}"] = (cfg.width, cfg.in_dim if l == 0 else cfg.width)
            expected[f"b{l}"] = (cfg.width,)
        expected["W_out"] = (cfg.out_dim, cfg.width)
        expected["b_out"] = (cfg.out_dim,)
        for name in param_names(cfg)[len(expected):]:
            expected[name] = (cfg.width, cfg.latent_dim)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def latent_map(self) -> np.ndarray:
        cfg = self.config
        names = [n for n in param_names(cfg) if n.startswith(("shift", "scale"))]
        if not names:
            return np.zeros((0, 0))
        return np.concatenate([self.params[n] for n in names], axis=0)

    def weights(self) -> list[np.ndarray]:
        return [v for k, v in self.items() if k.startswith("W")]

    def biases(self) -> list[np.ndarray]:
        return [v for k, v in self.items() if k.startswith("b")]

    def items(self):
        return [(n, self.params[n]) for n in param_names(self.config)]

    def replace(self, params: dict[str, np.ndarray]) -> "BaseParams":
        return BaseParams(self.config, {k: np.asarray(params[k], dtype=np.float64) for k in param_names(self.config)})

    def copy(self) -> "BaseParams":
        return self.replace({k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True)
class Modulations:
    latent: np.ndarray

    def __len__(self):
        return len(self.latent)


def init_params(cfg: SirenConfig, rng: np.random.Generator) -> BaseParams:
    """Sine-network initialization.

    First layer uniform in +-1/in_dim, later layers (output included) in
    +-sqrt(6/width)/omega0, biases drawn like their layer's weights. The
    output bias starts at 0.5, the middle of the normalized feature range.
    The latent map is uniform in +-1/sqrt(latent_dim); at exactly zero it
    would receive no gradient through the inner loop.
    """
    p = {}
    hidden = np.sqrt(6.0 / cfg.width) / cfg.omega0
    for l in range(cfg.depth):
        fan_in = cfg.in_dim if l == 0 else cfg.width
        bound = 1.0 / cfg.in_dim if l == 0 else hidden
        p[f"W{l}"] = rng.uniform(-bound, bound, (cfg.width, fan_in))
        p[f"b{l}"] = rng.uniform(-bound, bound, cfg.width)
    p["W_out"] = rng.uniform(-hidden, hidden, (cfg.out_dim, cfg.width))
    p["b_out"] = np.full(cfg.out_dim, 0.5)
    if cfg.latent_dim:
        bound = 1.0 / np.sqrt(cfg.latent_dim)
        for name in param_names(cfg):
            if name.startswith(("shift", "scale")):
                p[name] = rng.uniform(-bound, bound, (cfg.width, cfg.latent_dim))
    return BaseParams(cfg, p)


# ---------------------------------------------------------------- layers

def _var(x) -> Var:
    return x if isinstance(x, Var) else dc.constant(x)


def _value(x) -> np.ndarray:
    with dc.no_grad():
        return x.value


def _check_len(op, vec, n):
    if vec.shape[-1] != n:
        raise dc.ShapeError(f"{op}: expected length {n}, got shape {vec.shape}")


def siren_layer(h, W, b, omega0: float):
    """sin(omega0 * (W h + b)) for a vector h or rows of a matrix h."""
    h, W, b = _var(h), _var(W), _var(b)
    _check_len("siren_layer", h, W.shape[-1])
    _check_len("siren_layer", b, W.shape[0])
    pre = dc.add(dc.matmul(h, dc.transpose(W)), b)
    return dc.sin(dc.scale(pre, omega0))


def film(h, gamma, beta):
    h, gamma, beta = _var(h), _var(gamma), _var(beta)
    if not (h.shape == gamma.shape == beta.shape):
        raise dc.ShapeError(f"film: shapes differ: h {h.shape}, gamma {gamma.shape}, beta {beta.shape}")
    return dc.add(dc.mul(gamma, h), beta)


def modulated_layer(h, W, b, beta_shift, omega0: float, gamma_scale=None):
    """sin(omega0 * (gamma * (W h + b) + beta)).

    ``gamma_scale`` is the already-offset scale (1 + raw); either modulation
    may be None. Batched shifts of shape (B, width) apply to h of shape
    (B, n, in).
    """
    h, W, b = _var(h), _var(W), _var(b)
    _check_len("modulated_layer", h, W.shape[-1])
    _check_len("modulated_layer", b, W.shape[0])
    pre = dc.add(dc.matmul(h, dc.transpose(W)), b)
    if gamma_scale is not None:
        gamma_scale = _var(gamma_scale)
        _check_len("modulated_layer", gamma_scale, W.shape[0])
        pre = dc.mul(pre, _per_row(gamma_scale, pre))
    if beta_shift is not None:
        beta_shift = _var(beta_shift)
        _check_len("modulated_layer", beta_shift, W.shape[0])
        pre = dc.add(pre, _per_row(beta_shift, pre))
    return dc.sin(dc.scale(pre, omega0))


def _per_row(mod: Var, pre: Var) -> Var:
    # A batch of modulations (B, width) against activations (B, n, width).
    if mod.ndim == 2 and pre.ndim == 3:
        return dc.reshape(mod, (mod.shape[0], 1, mod.shape[1]))
    return mod


def latent_to_mods(phi, theta: BaseParams | dict, cfg: SirenConfig | None = None):
    """Map latents to per-layer modulations.

    Returns ``(shifts, scales)``: lists of ``depth`` vectors (or batches of
    vectors), either list None when that modulation is not used. Scales are
    returned as 1 + raw so a zero latent is neutral.
    """
    params, cfg = _unpack(theta, cfg)
    phi = _var(phi.latent if isinstance(phi, Modulations) else phi)
    if phi.shape[-1] != cfg.latent_dim:
        raise dc.ShapeError(f"latent_to_mods: latent length {phi.shape[-1]} != latent_dim {cfg.latent_dim}")
    shifts = scales = None
    if cfg.has_shift:
        shifts = [dc.matmul(phi, dc.transpose(params[f"shift{l}"])) for l in range(cfg.depth)]
    if cfg.has_scale:
        scales = [dc.add_const(dc.matmul(phi, dc.transpose(params[f"scale{l}"])), 1.0) for l in range(cfg.depth)]
    return shifts, scales


def _unpack(theta, cfg):
    if isinstance(theta, BaseParams):
        return {k: _var(v) for k, v in theta.params.items()}, theta.config
    if cfg is None:
        raise ValueError("config required when passing a raw parameter dict")
    return {k: _var(v) for k, v in theta.items()}, cfg


def forward_graph(params: dict, cfg: SirenConfig, phi, coords) -> Var:
    """Network output as a graph node.

    ``coords`` is (n, in_dim) with ``phi`` (latent_dim,), or batched as
    (B, n, in_dim) with ``phi`` (B, latent_dim). ``phi`` is ignored when the
    config has no modulations.
    """
    coords = _var(coords)
    if coords.shape[-1] != cfg.in_dim:
        raise dc.ShapeError(f"forward: coords have {coords.shape[-1]} columns, in_dim is {cfg.in_dim}")
    if cfg.modulation_kind == "none":
        shifts = scales = None
    else:
        shifts, scales = latent_to_mods(phi, params, cfg)
    h = coords
    for l in range(cfg.depth):
        h = modulated_layer(h, params[f"W{l}"], params[f"b{l}"],
                            None if shifts is None else shifts[l], cfg.omega0,
                            None if scales is None else scales[l])
    return dc.add(dc.matmul(h, dc.transpose(params["W_out"])), params["b_out"])


def forward(theta: BaseParams, phi, coords) -> np.ndarray:
    """Evaluate the modulated network at every coordinate row."""
    if isinstance(phi, Modulations):
        phi = phi.latent
    with dc.no_grad():
        params, cfg = _unpack(theta, None)
        if phi is None:
            if cfg.latent_dim:
                raise ValueError("modulated config requires latents")
            phi = np.zeros(0)
        return forward_graph(params, cfg, np.asarray(phi, dtype=np.float64),
                             np.asarray(coords, dtype=np.float64)).value


def zero_modulations(cfg: SirenConfig, batch: Sequence[int] = ()) -> np.ndarray:
    return np.zeros(tuple(batch) + (cfg.latent_dim,))
