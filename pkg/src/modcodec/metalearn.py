"""Fitting latents to patches and meta-learning the shared network.

The inner loop fits latents with a few plain gradient steps while the
network is frozen. The outer loop updates the network with Adam using the
exact gradient of the post-adaptation loss, differentiating through every
inner step.

Batches are processed as stacked arrays: coordinates (B, n, in_dim),
targets (B, n, channels), latents (B, latent_dim). Because each latent only
affects its own patch, the gradient of the summed loss with respect to the
stacked latents is the per-patch gradient.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .inr import BaseParams, Modulations, SirenConfig, forward, forward_graph, init_params, param_names
from .signalio import Patch, Signal, partition, random_patch, reassemble

log = logging.getLogger(__name__)


class AdaptationError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at inner step {step}")
        self.step = step


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class InnerConfig:
    steps: int = 3
    lr: float = 1e-2

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")


@dataclass(frozen=True)
class OuterConfig:
    lr: float = 3e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainState:
    theta: BaseParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def create(cls, theta: BaseParams, seed: int = 0) -> "TrainState":
        zeros = {k: np.zeros_like(v) for k, v in theta.params.items()}
        return cls(theta, zeros, {k: z.copy() for k, z in zeros.items()}, 0, np.random.default_rng(seed))


# ---------------------------------------------------------------- losses

def _stack(patches: Sequence[Patch]):
    shapes = {p.values.shape for p in patches}
    if len(shapes) != 1:
        raise ValueError(f"patches in a batch must share a shape, got {shapes}")
    return np.stack([p.coords for p in patches]), np.stack([p.values for p in patches])


def batch_loss_graph(params, cfg: SirenConfig, phi, coords, targets) -> dc.Var:
    """Sum over the batch of per-patch mean squared error."""
    pred = forward_graph(params, cfg, phi, coords)
    resid = dc.add(pred, dc.constant(-targets))
    return dc.scale(dc.mean_squares(resid), float(targets.shape[0]))


def loss(theta: BaseParams, phi, d: Patch) -> float:
    """Mean over coordinates and channels of the squared error."""
    if isinstance(phi, Modulations):
        phi = phi.latent
    if len(d.values) == 0:
        raise ValueError("empty patch")
    pred = forward(theta, phi, d.coords)
    return float(np.mean((pred - d.values) ** 2))


def _leaves(theta: BaseParams, trainable: bool) -> dict[str, dc.Var]:
    make = dc.leaf if trainable else dc.constant
    return {k: make(v) for k, v in theta.params.items()}


def _inner_loop(params, cfg, coords, targets, inner: InnerConfig, create_graph: bool):
    phi = dc.leaf(np.zeros((coords.shape[0], cfg.latent_dim)))
    for step in range(inner.steps):
        with dc.grad_enabled():
            l = batch_loss_graph(params, cfg, phi, coords, targets)
        value = float(l.value)
        if not math.isfinite(value):
            raise AdaptationError(step, value)
        (g,) = dc.grad(l, [phi], create_graph=create_graph)
        if create_graph:
            with dc.grad_enabled():
                phi = dc.add(phi, dc.scale(g, -inner.lr))
        else:
            phi = dc.leaf(phi.value - inner.lr * g.value)
    return phi


def inner_adapt_batch(theta: BaseParams, coords: np.ndarray, targets: np.ndarray,
                      inner: InnerConfig) -> np.ndarray:
    """Latents (B, latent_dim) after ``inner.steps`` descent steps from zero."""
    cfg = theta.config
    if cfg.latent_dim == 0:
        return np.zeros((coords.shape[0], 0))
    params = _leaves(theta, trainable=False)
    phi = _inner_loop(params, cfg, coords, targets, inner, create_graph=False)
    return phi.value.copy()


def inner_adapt(theta: BaseParams, d: Patch | Sequence[Patch], cfg: InnerConfig) -> Modulations | list[Modulations]:
    """Fit latents to one patch (or each of a list of patches)."""
    single = isinstance(d, Patch)
    patches = [d] if single else list(d)
    coords, targets = _stack(patches)
    phis = inner_adapt_batch(theta, coords, targets, cfg)
    mods = [Modulations(p) for p in phis]
    return mods[0] if single else mods


def outer_gradient(theta: BaseParams, batch: Sequence[Patch], inner: InnerConfig):
    """Summed post-adaptation loss and its exact gradient with respect to theta."""
    if not batch:
        raise ValueError("empty batch")
    cfg = theta.config
    coords, targets = _stack(batch)
    params = _leaves(theta, trainable=True)
    if cfg.latent_dim:
        phi = _inner_loop(params, cfg, coords, targets, inner, create_graph=True)
    else:
        phi = dc.constant(np.zeros((len(batch), 0)))
    with dc.grad_enabled():
        total = batch_loss_graph(params, cfg, phi, coords, targets)
    names = param_names(cfg)
    grads = dc.grad(total, [params[k] for k in names])
    return float(total.value), {k: g.value for k, g in zip(names, grads)}


def adam_update(state: TrainState, grads: dict, outer: OuterConfig) -> TrainState:
    b1, b2 = outer.adam_beta1, outer.adam_beta2
    t = state.step + 1
    new_theta, new_m, new_v = {}, {}, {}
    for k, p in state.theta.params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_theta[k] = p - outer.lr * mhat / (np.sqrt(vhat) + outer.adam_eps)
        new_m[k], new_v[k] = m, v
    return TrainState(state.theta.replace(new_theta), new_m, new_v, t, state.rng)


def outer_step(state: TrainState, batch: Sequence[Patch], inner: InnerConfig,
               outer: OuterConfig) -> tuple[TrainState, float]:
    """One Adam update of theta; returns the new state and the batch loss.

    Raises NonFiniteGradient (leaving ``state`` untouched) when the loss or
    gradient is not finite.
    """
    try:
        total, grads = outer_gradient(state.theta, batch, inner)
    except AdaptationError as exc:
        raise NonFiniteGradient(str(exc)) from exc
    if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteGradient(f"non-finite outer gradient (loss {total})")
    return adam_update(state, grads, outer), total


# ---------------------------------------------------------------- evaluation

def mse_to_psnr(mse: float) -> float:
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def fit_signal(theta: BaseParams, signal: Signal, inner: InnerConfig, patch_shape=None):
    """Partition, fit latents per patch; returns (patches, layout, latents)."""
    patch_shape = patch_shape or signal.feature_shape
    patches, layout = partition(signal, patch_shape)
    coords, targets = _stack(patches)
    return patches, layout, inner_adapt_batch(theta, coords, targets, inner)


def render(theta: BaseParams, patches: Sequence[Patch], layout, latents) -> Signal:
    """Decode latents patch by patch and stitch; features clamped to [0, 1]."""
    coords = np.stack([p.coords for p in patches])
    with dc.no_grad():
        params = {k: dc.constant(v) for k, v in theta.params.items()}
        out = forward_graph(params, theta.config, np.asarray(latents, dtype=np.float64), coords).value
    sig = reassemble(list(out), layout)
    return sig.with_features(np.clip(sig.features, 0.0, 1.0))


def reconstruction_psnr(theta, signal, inner, patch_shape=None) -> float:
    patches, layout, latents = fit_signal(theta, signal, inner, patch_shape)
    rec = render(theta, patches, layout, latents)
    return mse_to_psnr(float(np.mean((rec.features - signal.features) ** 2)))


def mean_psnr(theta, signals, inner, patch_shape=None) -> float:
    return float(np.mean([reconstruction_psnr(theta, s, inner, patch_shape) for s in signals]))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    theta: BaseParams
    history: list[dict]
    state: TrainState
    skipped: int = 0


def train(dataset: Sequence[Signal], model: SirenConfig, inner: InnerConfig = InnerConfig(),
          outer: OuterConfig = OuterConfig(), patch_shape=None, val_set: Sequence[Signal] = (),
          metric_log: str | os.PathLike | None = None, theta: BaseParams | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Meta-learn the shared network on random patches of ``dataset``.

    Each epoch visits the dataset once in shuffled mini-batches; one random
    patch is drawn per signal. After every epoch, the validation PSNR with
    three inner steps is logged. ``outer.max_steps`` caps the number of
    outer updates. Updates with a non-finite gradient are skipped.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(outer.seed)
    if theta is None:
        theta = init_params(model, rng)
    state = TrainState(theta, {k: np.zeros_like(v) for k, v in theta.params.items()},
                       {k: np.zeros_like(v) for k, v in theta.params.items()}, 0, rng)
    patch_shape = tuple(patch_shape or dataset[0].feature_shape)
    val_inner = InnerConfig(3, inner.lr)
    # spheres are evaluated whole, as the encoder does
    val_patch = None if dataset[0].modality == "grid2d_sphere" else patch_shape
    history, skipped = [], 0
    writer = None
    fh = None
    if metric_log is not None:
        fh = open(metric_log, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "outer_step", "train_loss", "val_psnr_db"])
    try:
        for epoch in range(outer.epochs):
            if outer.max_steps is not None and state.step + skipped >= outer.max_steps:
                break
            order = rng.permutation(len(dataset))
            losses = []
            for start in range(0, len(order), outer.batch_size):
                if outer.max_steps is not None and state.step + skipped >= outer.max_steps:
                    break
                batch = [random_patch(dataset[i], patch_shape, rng) for i in order[start:start + outer.batch_size]]
                try:
                    state, total = outer_step(state, batch, inner, outer)
                except NonFiniteGradient as exc:
                    skipped += 1
                    log.warning("epoch %d step %d: skipped update (%s)", epoch, state.step, exc)
                    continue
                losses.append(total / len(batch))
            row = {
                "epoch": epoch,
                "outer_step": state.step,
                "train_loss": float(np.mean(losses)) if losses else math.nan,
                "val_psnr_db": mean_psnr(state.theta, val_set, val_inner, val_patch) if val_set else math.nan,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], row["outer_step"], repr(row["train_loss"]),
                                 repr(min(row["val_psnr_db"], 100.0))])
                fh.flush()
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(state.theta, history, state, skipped)


# ---------------------------------------------------------------- per-datum baseline

def fit_coin(d: Signal | Patch, arch: SirenConfig, steps: int, lr: float = 2e-4, seed: int = 0,
             target_psnr: float | None = None) -> BaseParams:
    """Fit a whole unmodulated network to one datapoint with Adam.

    With ``target_psnr`` the fit stops as soon as the reconstruction reaches
    that PSNR.
    """
    if arch.latent_dim != 0:
        raise ValueError("the per-datum baseline uses an unmodulated network (latent_dim 0)")
    patch = d if isinstance(d, Patch) else Patch(d.coords(), d.features.reshape(-1, d.channels), d.feature_shape)
    theta = init_params(arch, np.random.default_rng(seed))
    state = TrainState.create(theta, seed)
    outer = OuterConfig(lr=lr)
    coords, targets = patch.coords[None], patch.values[None]
    names = param_names(arch)
    for step in range(steps):
        params = _leaves(state.theta, trainable=True)
        with dc.grad_enabled():
            l = batch_loss_graph(params, arch, dc.constant(np.zeros((1, 0))), coords, targets)
        value = float(l.value)
        if not math.isfinite(value):
            raise AdaptationError(step, value)
        if target_psnr is not None and mse_to_psnr(value) >= target_psnr:
            break
        grads = dc.grad(l, [params[k] for k in names])
        state = adam_update(state, {k: g.value for k, g in zip(names, grads)}, outer)
    return state.theta
