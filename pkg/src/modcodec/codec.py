"""Compressed containers, model checkpoints and rate/distortion metrics.

Only latent symbols are transmitted; the receiver holds the checkpoint.

Container layout (little-endian)::

    b"CPP+"  u8 version  u8 modality  u8 rank
    u32 feature_shape[rank]  u32 channels  u32 patch_shape[rank]
    u32 patch_count  u32 latent_dim  u8 bits
    f64 raw_min  f64 raw_max  u32 sample_rate (0 = none)
    f64 mean[latent_dim]  f64 std[latent_dim]
    32-byte model hash  u32 payload_length  u32 payload_crc32
    payload

Checkpoint layout (little-endian)::

    b"CPPM"  u8 version
    u32 in_dim, out_dim, depth, width, latent_dim  f64 omega0  u8 modulation_kind
    u8 modality  u8 rank  u32 patch_shape[rank]
    f64 parameters in fixed layer order (latent map as one stacked matrix)
    u8 bits  f64 k  f64 mean[latent_dim]  f64 std[latent_dim]
    u32 symbol counts[2**bits]
    32-byte SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .inr import MODULATION_KINDS, BaseParams, SirenConfig, param_names
from .metalearn import InnerConfig, fit_signal, mse_to_psnr, render
from .quantent import (FrequencyModel, QuantizerParams, ac_decode, ac_encode, build_freq, calibrate, dequantize,
                       quantize)
from .signalio import MODALITIES, PatchLayout, Signal, coord_dim, partition

CONTAINER_MAGIC = b"CPP+"
CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b"CPPM"
CHECKPOINT_VERSION = 1
PSNR_CAP = 100.0


class CodecError(ValueError):
    pass


class ChecksumError(CodecError):
    pass


class ModelMismatch(CodecError):
    pass


class VersionError(CodecError):
    pass


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def array(self, a, dtype="<f8"):
        self.buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def raw(self, b):
        self.buf.write(b)

    def getvalue(self):
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CodecError("truncated data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, count, dtype="<f8"):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dt).astype(np.float64 if dt.kind == "f" else np.int64)


# ---------------------------------------------------------------- checkpoint

@dataclass
class ModelCheckpoint:
    """Everything the encoder and decoder share."""

    theta: BaseParams
    quantizer: QuantizerParams
    freq: FrequencyModel
    modality: str = "image"
    patch_shape: tuple[int, ...] = (16, 16)

    @property
    def config(self) -> SirenConfig:
        return self.theta.config

    def body(self) -> bytes:
        cfg = self.config
        w = _Writer()
        w.raw(CHECKPOINT_MAGIC)
        w.pack("B", CHECKPOINT_VERSION)
        w.pack("5IdB", cfg.in_dim, cfg.out_dim, cfg.depth, cfg.width, cfg.latent_dim, cfg.omega0,
               MODULATION_KINDS.index(cfg.modulation_kind))
        w.pack("BB", MODALITIES.index(self.modality), len(self.patch_shape))
        w.pack(f"{len(self.patch_shape)}I", *self.patch_shape)
        for name in _serial_names(cfg):
            w.array(self.theta.params[name] if name != "M" else self.theta.latent_map)
        qp = self.quantizer
        w.pack("Bd", qp.bits, qp.k)
        w.array(qp.mean)
        w.array(qp.std)
        w.array(self.freq.counts, "<u4")
        return w.getvalue()

    def to_bytes(self) -> bytes:
        body = self.body()
        return body + hashlib.sha256(body).digest()

    @property
    def hash(self) -> bytes:
        return hashlib.sha256(self.body()).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < 5 + 32 or data[:4] != CHECKPOINT_MAGIC:
            raise CodecError("not a checkpoint")
        if data[4] != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {data[4]}")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("corrupt checkpoint: hash mismatch")
        r = _Reader(body)
        r.take(5)
        in_dim, out_dim, depth, width, latent, omega0, kind = r.unpack("5IdB")
        cfg = SirenConfig(in_dim, out_dim, depth, width, latent, omega0, MODULATION_KINDS[kind])
        modality, rank = r.unpack("BB")
        patch_shape = r.unpack(f"{rank}I")
        shapes = _param_shapes(cfg)
        params = {}
        for name in _serial_names(cfg):
            shape = shapes[name]
            params[name] = r.array(int(np.prod(shape))).reshape(shape)
        if "M" in params:
            blocks = np.split(params.pop("M"), params_blocks(cfg), axis=0) if cfg.latent_dim else []
            names = [n for n in param_names(cfg) if n.startswith(("shift", "scale"))]
            params.update(dict(zip(names, blocks)))
        bits, k = r.unpack("Bd")
        mean, std = r.array(latent), r.array(latent)
        counts = r.array(1 << bits, "<u4")
        if r.pos != len(body):
            raise CodecError("trailing bytes in checkpoint")
        return cls(BaseParams(cfg, params), QuantizerParams(bits, mean, std, k),
                   FrequencyModel(tuple(int(c) for c in counts)), MODALITIES[modality], tuple(patch_shape))


def params_blocks(cfg: SirenConfig) -> int:
    return cfg.modulation_rows // cfg.width


def _serial_names(cfg: SirenConfig) -> list[str]:
    names = [n for n in param_names(cfg) if not n.startswith(("shift", "scale"))]
    return names + (["M"] if cfg.latent_dim else [])


def _param_shapes(cfg: SirenConfig) -> dict:
    shapes = {}
    for l in range(cfg.depth):
        shapes[f"W{l}"] = (cfg.width, cfg.in_dim if l == 0 else cfg.width)
        shapes[f"b{l}"] = (cfg.width,)
    shapes["W_out"] = (cfg.out_dim, cfg.width)
    shapes["b_out"] = (cfg.out_dim,)
    shapes["M"] = (cfg.modulation_rows, cfg.latent_dim)
    return shapes


def save_checkpoint(cp: ModelCheckpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(cp.to_bytes())


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        return ModelCheckpoint.from_bytes(f.read())


def fit_corpus(theta: BaseParams, signals, inner: InnerConfig, modality: str, patch_shape) -> np.ndarray:
    """Latents of every patch of every signal, split the way the encoder splits them."""
    rows = []
    for s in signals:
        shape = s.feature_shape if modality == "grid2d_sphere" else patch_shape
        rows.append(fit_signal(theta, s, inner, shape)[2])
    return np.concatenate(rows)


def build_checkpoint(theta: BaseParams, signals, inner: InnerConfig, bits: int, modality: str,
                     patch_shape, latents: np.ndarray | None = None) -> ModelCheckpoint:
    """Calibrate quantizer and symbol frequencies on ``signals`` and bundle them with ``theta``."""
    if latents is None:
        latents = fit_corpus(theta, signals, inner, modality, patch_shape)
    qp = calibrate(latents, bits)
    fm = build_freq(quantize(latents, qp).ravel(), bits)
    return ModelCheckpoint(theta, qp, fm, modality, tuple(patch_shape))


# ---------------------------------------------------------------- container

@dataclass
class CompressedObject:
    modality: str
    feature_shape: tuple[int, ...]
    channels: int
    patch_shape: tuple[int, ...]
    patch_count: int
    latent_dim: int
    bits: int
    mean: np.ndarray
    std: np.ndarray
    model_hash: bytes
    payload: bytes
    raw_range: tuple[float, float] = (0.0, 1.0)
    sample_rate: int | None = None
    version: int = CONTAINER_VERSION
    # Encoder-side report, not serialized.
    stats: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.payload) & 0xFFFFFFFF

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        rank = len(self.feature_shape)
        w = _Writer()
        w.raw(CONTAINER_MAGIC)
        w.pack("BBB", self.version, MODALITIES.index(self.modality), rank)
        w.pack(f"{rank}I", *self.feature_shape)
        w.pack("I", self.channels)
        w.pack(f"{rank}I", *self.patch_shape)
        w.pack("IIB", self.patch_count, self.latent_dim, self.bits)
        w.pack("ddI", self.raw_range[0], self.raw_range[1], self.sample_rate or 0)
        w.array(self.mean)
        w.array(self.std)
        if len(self.model_hash) != 32:
            raise CodecError("model hash must be 32 bytes")
        w.raw(self.model_hash)
        w.pack("II", len(self.payload), self.checksum)
        w.raw(self.payload)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedObject":
        r = _Reader(data)
        if r.take(4) != CONTAINER_MAGIC:
            raise CodecError("not a compressed object")
        version, modality, rank = r.unpack("BBB")
        if version != CONTAINER_VERSION:
            raise VersionError(f"unsupported container version {version}")
        if modality >= len(MODALITIES):
            raise CodecError(f"unknown modality code {modality}")
        feature_shape = r.unpack(f"{rank}I")
        (channels,) = r.unpack("I")
        patch_shape = r.unpack(f"{rank}I")
        patch_count, latent_dim, bits = r.unpack("IIB")
        lo, hi, rate = r.unpack("ddI")
        mean, std = r.array(latent_dim), r.array(latent_dim)
        model_hash = r.take(32)
        length, crc = r.unpack("II")
        payload = r.take(length)
        if r.pos != len(data):
            raise CodecError("trailing bytes after payload")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError("payload checksum mismatch")
        return cls(MODALITIES[modality], tuple(feature_shape), channels, tuple(patch_shape), patch_count,
                   latent_dim, bits, mean, std, model_hash, payload, (lo, hi), rate or None, version)


# ---------------------------------------------------------------- encode / decode

def _check_compatible(signal: Signal, cp: ModelCheckpoint):
    cfg = cp.config
    if signal.modality != cp.modality:
        raise CodecError(f"checkpoint is for {cp.modality} data, signal is {signal.modality}")
    if len(signal.feature_shape) != len(cp.patch_shape):
        raise CodecError(f"signal rank {len(signal.feature_shape)} does not match patch rank {len(cp.patch_shape)}")
    if coord_dim(signal.modality, len(signal.feature_shape)) != cfg.in_dim:
        raise CodecError(f"network expects {cfg.in_dim}-d coordinates")
    if signal.channels != cfg.out_dim:
        raise CodecError(f"network outputs {cfg.out_dim} channels, signal has {signal.channels}")


def patch_shape_for(signal: Signal, cp: ModelCheckpoint):
    # A sphere is encoded whole; other signals use the checkpoint's patch size.
    if signal.modality == "grid2d_sphere":
        return signal.feature_shape
    return cp.patch_shape


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def encode(signal: Signal, checkpoint: ModelCheckpoint, inner: InnerConfig = InnerConfig(10)) -> CompressedObject:
    """Fit, quantize and entropy-code the latents of every patch.

    ``obj.stats`` reports the PSNR of the quantized reconstruction (what
    the decoder will produce), the full-precision PSNR and the rate.
    """
    _check_compatible(signal, checkpoint)
    patches, layout, latents = fit_signal(checkpoint.theta, signal, inner, patch_shape_for(signal, checkpoint))
    return encode_latents(signal, checkpoint, patches, layout, latents)


def encode_latents(signal: Signal, checkpoint: ModelCheckpoint, patches, layout: PatchLayout,
                   latents: np.ndarray) -> CompressedObject:
    """Container for already fitted latents; lets several bit widths share one fit."""
    theta, qp = checkpoint.theta, checkpoint.quantizer
    symbols = quantize(latents, qp)
    payload = ac_encode(symbols.ravel(), checkpoint.freq)
    obj = CompressedObject(signal.modality, signal.feature_shape, signal.channels, layout.patch_shape,
                           layout.count, theta.config.latent_dim, qp.bits, qp.mean, qp.std,
                           checkpoint.hash, payload, signal.raw_range, signal.sample_rate)
    rec = _render_symbols(theta, qp, symbols, layout, signal.modality)
    full = render(theta, patches, layout, latents)
    obj.stats = {
        "psnr": psnr(mse(rec.features, signal.features)),
        "psnr_full": psnr(mse(full.features, signal.features)),
        **rate(obj, signal),
        "raw_bits": int(symbols.size * qp.bits),
    }
    return obj


def _render_symbols(theta, qp, symbols, layout: PatchLayout, modality):
    # Shared by encode and decode so both produce identical reconstructions.
    latents = dequantize(symbols, qp)
    template = Signal(modality, np.zeros(layout.feature_shape + (layout.channels,)),
                      layout.raw_range, layout.sample_rate)
    patches, _ = partition(template, layout.patch_shape)
    return render(theta, patches, layout, latents)


def decode(obj: CompressedObject, checkpoint: ModelCheckpoint) -> Signal:
    if obj.version != CONTAINER_VERSION:
        raise VersionError(f"unsupported container version {obj.version}")
    if obj.model_hash != checkpoint.hash:
        raise ModelMismatch("wrong base network: model hash does not match checkpoint")
    qp = QuantizerParams(obj.bits, obj.mean, obj.std, checkpoint.quantizer.k)
    symbols = ac_decode(obj.payload, obj.patch_count * obj.latent_dim, checkpoint.freq)
    symbols = symbols.reshape(obj.patch_count, obj.latent_dim)
    grid = tuple(-(-n // p) for n, p in zip(obj.feature_shape, obj.patch_shape))
    padding = tuple(g * p - n for g, p, n in zip(grid, obj.patch_shape, obj.feature_shape))
    layout = PatchLayout(obj.patch_shape, grid, padding, obj.feature_shape, obj.channels,
                         obj.modality, obj.raw_range, obj.sample_rate)
    if layout.count != obj.patch_count:
        raise CodecError("patch count does not match shapes")
    return _render_symbols(checkpoint.theta, qp, symbols, layout, obj.modality)


def decode_bytes(data: bytes, checkpoint: ModelCheckpoint) -> Signal:
    return decode(CompressedObject.from_bytes(data), checkpoint)


# ---------------------------------------------------------------- metrics

def psnr(mse_value: float) -> float:
    """-10 log10(mse) in dB; zero error gives +inf."""
    if mse_value < 0 or math.isnan(mse_value):
        raise ValueError(f"mse must be non-negative, got {mse_value}")
    return mse_to_psnr(mse_value)


def psnr_for_csv(value: float) -> float:
    return min(value, PSNR_CAP)


def pixel_count(signal_or_obj) -> int:
    """Denominator for bits-per-pixel: H*W for images, every value otherwise."""
    shape = signal_or_obj.feature_shape
    n = int(np.prod(shape))
    return n if signal_or_obj.modality == "image" else n * signal_or_obj.channels


def rate(obj: CompressedObject, signal: Signal | None = None, bits: int | None = None) -> dict:
    """Rate of the payload only; ``kbps`` is added for audio."""
    ref = signal if signal is not None else obj
    bits = obj.payload_bits if bits is None else bits
    out = {"bits": bits, "bpp": bits / pixel_count(ref)}
    out["bpp_all_channels"] = bits / (int(np.prod(ref.feature_shape)) * ref.channels)
    if ref.modality == "audio":
        sr = ref.sample_rate or 16000
        duration = ref.feature_shape[0] / sr
        out["kbps"] = bits / duration / 1000.0
    return out
