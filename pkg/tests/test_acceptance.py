"""Desk-scale acceptance experiments, one test per criterion A1-A10.

Trained base networks are cached under ``.acceptance_cache`` (override with
``MODCODEC_ACCEPTANCE_CACHE``), keyed by a hash of everything that affects
training, so a rerun repeats only the evaluation. Training is deterministic,
so a cached network is bit-identical to a fresh one.
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from modcodec import cli, codec
from modcodec import diffcore as dc
from modcodec.inr import BaseParams, SirenConfig, init_params
from modcodec.metalearn import (InnerConfig, OuterConfig, fit_coin, inner_adapt, loss, mean_psnr, mse_to_psnr,
                                outer_gradient, train)
from modcodec.quantent import FrequencyModel, ac_decode, ac_encode, coin_weight_quantize, quantize
from modcodec.signalio import Patch, Signal, partition, reassemble
from modcodec.synthetic import sphere_fields, textures

pytestmark = pytest.mark.acceptance

CACHE = Path(os.environ.get("MODCODEC_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))
CACHE_FORMAT = 1

PATCH = (16, 16)
INNER3 = InnerConfig(3, 1e-2)
TEXTURE_CFG = SirenConfig(2, 1, 5, 64, 32, 50.0, "shift")
TEXTURE_OUTER = OuterConfig(lr=3e-6, batch_size=4, epochs=10**6, max_steps=20_000, seed=0)
BITS = 5

SPHERE_SHAPE = (46, 90)
SPHERE_CFG = SirenConfig(3, 1, 4, 32, 16, 30.0, "shift")
SPHERE_PATCH = (23, 30)
SPHERE_OUTER = OuterConfig(lr=3e-6, batch_size=4, epochs=10**6, max_steps=2000, seed=0)


# ---------------------------------------------------------------- data and cached models

@functools.cache
def texture_train():
    return textures(512, seed=1)


@functools.cache
def texture_val():
    return textures(64, seed=2)


@functools.cache
def sphere_train():
    return sphere_fields(64, seed=1)


@functools.cache
def sphere_val():
    return sphere_fields(16, seed=2)


def cached_train(tag, data_fn, cfg: SirenConfig, inner: InnerConfig, outer: OuterConfig, patch) -> BaseParams:
    ident = repr((CACHE_FORMAT, tag, cfg, inner, outer, patch))
    key = hashlib.sha256(ident.encode()).hexdigest()[:16]
    path = CACHE / f"{tag}-{key}.npz"
    if path.exists():
        with np.load(path) as z:
            return BaseParams(cfg, {k: z[k] for k in z.files})
    CACHE.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    res = train(data_fn(), cfg, inner, outer, patch)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **res.theta.params)
    os.replace(tmp, path)
    (CACHE / f"{tag}-{key}.json").write_text(json.dumps(
        {"config": ident, "seconds": round(time.perf_counter() - start, 1), "steps": res.state.step,
         "skipped": res.skipped}))
    return res.theta


def texture_model(kind="shift") -> BaseParams:
    cfg = SirenConfig(**{**TEXTURE_CFG.__dict__, "modulation_kind": kind})
    return cached_train(f"texture-{kind}", texture_train, cfg, INNER3, TEXTURE_OUTER, PATCH)


def sphere_model() -> BaseParams:
    return cached_train("sphere", sphere_train, SPHERE_CFG, INNER3, SPHERE_OUTER, SPHERE_PATCH)


@functools.cache
def texture_checkpoint() -> codec.ModelCheckpoint:
    return codec.build_checkpoint(texture_model(), texture_train(), INNER3, BITS, "image", PATCH)


@functools.cache
def texture_encodings():
    cp = texture_checkpoint()
    return [codec.encode(s, cp, INNER3) for s in texture_val()]


# ---------------------------------------------------------------- A1

def test_a1_meta_learning_gain(verdict):
    val = texture_val()
    untrained = init_params(TEXTURE_CFG, np.random.default_rng(TEXTURE_OUTER.seed))
    before = mean_psnr(untrained, val, INNER3, PATCH)
    after = mean_psnr(texture_model(), val, INNER3, PATCH)
    ok = verdict("A1", after - before >= 3.0,
                 f"3-step PSNR {after:.2f} dB trained vs {before:.2f} dB untrained, gain {after - before:.2f} dB "
                 f"(need >= 3)")
    assert ok


# ---------------------------------------------------------------- A2

COIN_CFG = SirenConfig(2, 1, 3, 16, 0, 30.0, "none")


def test_a2_quantization_robustness_vs_per_signal_networks(verdict):
    signals = texture_val()[:16]
    encs = texture_encodings()[:16]
    pp_full = np.array([e.stats["psnr_full"] for e in encs])
    pp_q = np.array([e.stats["psnr"] for e in encs])
    coin_full, coin_q = [], []
    for s, target in zip(signals, pp_full):
        patch = Patch(s.coords(), s.features.reshape(-1, 1), s.feature_shape)
        theta = fit_coin(s, COIN_CFG, steps=20_000, lr=1e-3, seed=0, target_psnr=float(target))
        coin_full.append(mse_to_psnr(loss(theta, None, patch)))
        coin_q.append(mse_to_psnr(loss(coin_weight_quantize(theta, BITS), None, patch)))
    coin_full, coin_q = np.array(coin_full), np.array(coin_q)
    gap = np.abs(coin_full - pp_full)
    drop_pp, drop_coin = float(np.mean(pp_full - pp_q)), float(np.mean(coin_full - coin_q))
    ok = verdict("A2", bool(gap.max() <= 1.0 and drop_pp < drop_coin),
                 f"mean drop at b={BITS}: modulations {drop_pp:.2f} dB, per-signal network {drop_coin:.2f} dB; "
                 f"full-precision match within {gap.max():.2f} dB (need <= 1)")
    assert ok


# ---------------------------------------------------------------- A3

def test_a3_five_bit_drop(verdict):
    encs = texture_encodings()
    full = np.mean([e.stats["psnr_full"] for e in encs])
    quant = np.mean([e.stats["psnr"] for e in encs])
    ok = verdict("A3", full - quant <= 2.0,
                 f"PSNR {full:.2f} dB full precision vs {quant:.2f} dB at b={BITS}, drop {full - quant:.2f} dB "
                 f"(need <= 2)")
    assert ok


# ---------------------------------------------------------------- A4

def test_a4_entropy_coding_benefit(verdict):
    cp = texture_checkpoint()
    encs = texture_encodings()
    coded = sum(len(e.payload) for e in encs)
    raw = sum(-(-e.patch_count * e.latent_dim * e.bits // 8) for e in encs)
    lossless = True
    for s, e in zip(texture_val(), encs):
        _, layout, latents = codec.fit_signal(cp.theta, s, INNER3, PATCH)
        symbols = quantize(latents, cp.quantizer)
        lossless &= np.array_equal(ac_decode(e.payload, symbols.size, cp.freq), symbols.ravel())
        direct = codec._render_symbols(cp.theta, cp.quantizer, symbols, layout, s.modality)
        lossless &= codec.decode(e, cp).features.tobytes() == direct.features.tobytes()
    saving = 100.0 * (1 - coded / raw)
    # every stream ends with a fixed 4-byte flush; this shows what the symbols themselves cost
    body = 100.0 * (1 - (coded - 4 * len(encs)) / raw)
    per_object = np.mean([len(e.payload) < -(-e.patch_count * e.latent_dim * e.bits // 8) for e in encs])
    ok = verdict("A4", bool(coded < raw and lossless),
                 f"coded {coded} B vs raw-packed {raw} B ({saving:+.1f}% saving), lossless={lossless}, "
                 f"smaller for {100 * per_object:.0f}% of objects, {body:+.1f}% excluding the 4-byte flush")
    assert ok


# ---------------------------------------------------------------- A5

def test_a5_modulation_ablation(verdict):
    thetas = {kind: texture_model(kind) for kind in cli.ABLATION_KINDS}
    rows = {r["modulation"]: r["val_psnr_db"] for r in cli.ablation_rows(thetas, texture_val(), INNER3, PATCH)}
    shift, scale, both = rows["shift"], rows["scale"], rows["scale_and_shift"]
    ok = verdict("A5", shift >= scale and abs(shift - both) <= 1.0,
                 f"shift {shift:.2f} dB, scale {scale:.2f} dB, scale_and_shift {both:.2f} dB")
    assert ok


# ---------------------------------------------------------------- A6

def test_a6_more_inner_steps(verdict):
    theta, val = texture_model(), texture_val()
    p = {s: mean_psnr(theta, val, InnerConfig(s, 1e-2), PATCH) for s in (3, 10, 50)}
    ok = verdict("A6", p[10] > p[3] and abs(p[50] - p[10]) <= 0.2,
                 f"S=3 {p[3]:.2f} dB, S=10 {p[10]:.2f} dB, S=50 {p[50]:.2f} dB")
    assert ok


# ---------------------------------------------------------------- A7

def _central(f, x, h):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def _net(W1, b1, W2, x):
    return dc.mean_squares(dc.add(dc.matmul(W2, dc.sin(dc.add(dc.matmul(W1, x), b1))), x))


def _siren(W0, b0, W1, M, phi, coords, target):
    h = dc.sin(dc.scale(dc.add(dc.add(dc.matmul(coords, dc.transpose(W0)), b0), dc.matmul(M, phi)), 3.0))
    return dc.mean_squares(dc.add(dc.matmul(h, dc.transpose(W1)), dc.constant(-target.value)))


def _seed_errors(seed):
    r = np.random.default_rng(seed)
    errs = []
    leaves = {"W1": r.uniform(-2, 2, (4, 4)), "b1": r.uniform(-2, 2, 4), "W2": r.uniform(-2, 2, (4, 4)),
              "x": r.uniform(-2, 2, 4)}
    for wrt in leaves:
        fd = _central(lambda v: float(dc.evaluate(_net, {**leaves, wrt: v})), leaves[wrt], 1e-6)
        errs.append(_rel(dc.gradient(_net, leaves, wrt), fd))
    sl = {"W0": r.uniform(-1, 1, (4, 2)), "b0": r.uniform(-1, 1, 4), "W1": r.uniform(-1, 1, (1, 4)),
          "M": r.uniform(-1, 1, (4, 3)), "phi": r.uniform(-1, 1, 3), "coords": r.uniform(-1, 1, (5, 2)),
          "target": r.uniform(0, 1, (5, 1))}
    probe = r.normal(size=3)
    reduce = lambda g: dc.sum_to(dc.mul(g, dc.constant(probe)), ())
    for outer in ("W0", "M"):
        gg = dc.gradient_of_gradient(_siren, sl, "phi", outer, reduce)
        fd = _central(lambda v: float(dc.gradient(_siren, {**sl, outer: v}, "phi") @ probe), sl[outer], 1e-6)
        errs.append(_rel(gg, fd))
    theta = init_params(SirenConfig(2, 1, 2, 3, 2, 30.0, "shift"), r)
    coords = r.uniform(-1, 1, (6, 2))
    patch = Patch(coords, r.uniform(0, 1, (6, 1)), (6,))
    for steps in (1, 2, 3):
        inner = InnerConfig(steps, 1e-2)
        _, grads = outer_gradient(theta, [patch], inner)
        for name, value in theta.params.items():
            def composite(v, name=name):
                t = theta.replace({**theta.params, name: v})
                return loss(t, inner_adapt(t, patch, inner), patch)
            errs.append(_rel(grads[name], _central(composite, value, 1e-6)))
    return errs


def test_a7_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = max(max(_seed_errors(seed)) for seed in range(100))
    elapsed = time.perf_counter() - start
    ok = verdict("A7", worst < 1e-5 and elapsed <= 120,
                 f"worst relative error {worst:.2e} over 100 seeds in {elapsed:.0f} s (need < 1e-5, <= 120 s)")
    assert ok


# ---------------------------------------------------------------- A8

def test_a8_lossless_coder(verdict):
    r = np.random.default_rng(8)
    failures = 0
    for _ in range(10_000):
        bits = int(r.integers(1, 9))
        fm = FrequencyModel(tuple(int(c) for c in r.integers(1, 200, 1 << bits)))
        symbols = r.integers(0, 1 << bits, int(r.integers(0, 48)))
        failures += not np.array_equal(ac_decode(ac_encode(symbols, fm), len(symbols), fm), symbols)
    gaps = []
    for bits in (2, 5, 8):
        fm = FrequencyModel(tuple(int(c) for c in r.integers(1, 200, 1 << bits)))
        symbols = r.choice(1 << bits, 10_000, p=fm.probabilities())
        gaps.append(abs(8 * len(ac_encode(symbols, fm)) - fm.cross_entropy_bits(symbols)) / len(symbols))
    ok = verdict("A8", failures == 0 and max(gaps) < 0.1,
                 f"{failures} roundtrip failures in 10^4; cross-entropy gap {max(gaps):.4f} bits/symbol (need < 0.1)")
    assert ok


# ---------------------------------------------------------------- A9

def test_a9_determinism_and_accounting(verdict):
    cp = texture_checkpoint()
    r = np.random.default_rng(9)
    signals = list(texture_val()[:4]) + [Signal("image", r.random((40, 36, 1)))]
    problems = []
    for s in signals:
        a, b = codec.encode(s, cp, INNER3), codec.encode(s, cp, INNER3)
        if a.to_bytes() != b.to_bytes():
            problems.append("non-deterministic encode")
        rec = codec.decode_bytes(a.to_bytes(), cp)
        if codec.psnr(codec.mse(rec.features, s.features)) != a.stats["psnr"]:
            problems.append("decode PSNR differs")
        if a.stats["bpp"] != 8 * len(a.payload) / codec.pixel_count(s):
            problems.append("bpp accounting")
    for _ in range(100):
        rank = int(r.integers(1, 4))
        shape = tuple(int(n) for n in r.integers(1, 13, rank))
        patch = tuple(int(r.integers(1, n + 3)) for n in shape)
        sig = Signal("volume" if rank == 3 else "image", r.random(shape + (int(r.integers(1, 4)),)))
        patches, layout = partition(sig, patch)
        if reassemble(patches, layout).features.tobytes() != sig.features.tobytes():
            problems.append(f"partition roundtrip {shape} / {patch}")
    ok = verdict("A9", not problems, "all checks exact" if not problems else "; ".join(sorted(set(problems))))
    assert ok


# ---------------------------------------------------------------- A10

def test_a10_sphere_gain(verdict):
    val = sphere_val()
    untrained = init_params(SPHERE_CFG, np.random.default_rng(SPHERE_OUTER.seed))
    trained = sphere_model()
    before = mean_psnr(untrained, val, INNER3)
    after = mean_psnr(trained, val, INNER3)
    cp = codec.build_checkpoint(trained, sphere_train(), INNER3, BITS, "grid2d_sphere", SPHERE_PATCH)
    obj = codec.encode(val[0], cp, INNER3)
    rec = codec.decode_bytes(obj.to_bytes(), cp)
    roundtrip = rec.feature_shape == SPHERE_SHAPE and codec.psnr(codec.mse(rec.features, val[0].features)) == obj.stats["psnr"]
    ok = verdict("A10", after - before >= 3.0 and roundtrip,
                 f"whole-globe 3-step PSNR {after:.2f} dB trained vs {before:.2f} dB untrained, "
                 f"gain {after - before:.2f} dB (need >= 3); codec roundtrip ok={roundtrip}")
    assert ok
