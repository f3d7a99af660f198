"""
Compressing a signal to a few bytes
===================================

After meta-training, a checkpoint bundles the base network with quantizer
statistics and a symbol-frequency table. Encoding a signal fits its latents,
quantizes them and range-codes the symbols; only those bytes are sent.
"""

# %%
import numpy as np

from modcodec import codec
from modcodec.inr import SirenConfig
from modcodec.metalearn import InnerConfig, OuterConfig, train
from modcodec.synthetic import sinusoid_texture

rng = np.random.default_rng(1)
train_set = [sinusoid_texture(rng, (12, 12), components=3, max_freq=1.0) for _ in range(64)]
cfg = SirenConfig(2, 1, depth=3, width=24, latent_dim=8, omega0=30.0)
inner = InnerConfig(3, 1e-2)
theta = train(train_set, cfg, inner, OuterConfig(lr=3e-4, batch_size=8, epochs=60, seed=0)).theta

# %%
# Calibrate per-dimension clipping ranges and symbol frequencies on the
# training set, at 5 bits per latent value.
cp = codec.build_checkpoint(theta, train_set, inner, bits=5, modality="image", patch_shape=(12, 12))

# %%
# Encode one unseen texture. The container header carries shapes and
# statistics; the rate counts only the payload.
image = sinusoid_texture(np.random.default_rng(7), (24, 24), components=3, max_freq=2.0)
obj = codec.encode(image, cp, InnerConfig(10, 1e-2))
blob = obj.to_bytes()
print(f"{obj.patch_count} patches, payload {len(obj.payload)} bytes, container {len(blob)} bytes")
print(f"PSNR {obj.stats['psnr']:.2f} dB (full precision {obj.stats['psnr_full']:.2f} dB), "
      f"{obj.stats['bpp']:.3f} bpp")

# %%
# Decoding needs the same checkpoint; the reconstruction matches the one the
# encoder measured, bit for bit.
rec = codec.decode_bytes(blob, cp)
print("decoder PSNR", codec.psnr(codec.mse(rec.features, image.features)))

# %%
# Fewer bits: smaller payload, lower quality.
latents = codec.fit_corpus(theta, train_set, inner, "image", (12, 12))
for bits in (3, 4, 5, 6, 8):
    cpb = codec.build_checkpoint(theta, train_set, inner, bits, "image", (12, 12), latents=latents)
    o = codec.encode(image, cpb, InnerConfig(10, 1e-2))
    print(f"b={bits}: {o.stats['bpp']:.3f} bpp, {o.stats['psnr']:.2f} dB")
