"""Compress signals as quantized latent modulations of a shared sine network."""
from .codec import (CompressedObject, ModelCheckpoint, decode, encode, load_checkpoint, psnr, rate,
                    save_checkpoint)
from .inr import BaseParams, Modulations, SirenConfig, forward, init_params
from .metalearn import InnerConfig, OuterConfig, fit_coin, inner_adapt, outer_step, train
from .quantent import (FrequencyModel, QuantizerParams, ac_decode, ac_encode, build_freq, calibrate,
                       dequantize, quantize)
from .signalio import Signal, load, partition, reassemble, save

__version__ = "0.1.0"
