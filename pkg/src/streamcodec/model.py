"""Codec assembly (encoder / projector / quantizer / decoder) and checkpoints.

The checkpoint is a plain .npz container: one little-endian array per
parameter or buffer, keyed by its state-dict name, plus a ``__meta__``
JSON blob holding the full config echo, its hash, a key -> (shape, dtype)
manifest, and caller metadata. Deployable codec checkpoints never include
discriminator weights.
"""

import io
import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .audio import Waveform
from .config import (
    ExperimentConfig,
    config_echo_dict,
    config_from_dict,
    config_hash,
)
from .encoder import Encoder
from .errors import CompatibilityError
from .generator import Decoder
from .layers import init_conv_weights, length_stable_kernels
from .quantizer import CodeNormalizer, Projector, QuantizeResult, ResidualVectorQuantizer

Tensor = torch.Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class LatentSequence:
    """Continuous code vectors at the downsampled frame rate."""

    vectors: np.ndarray  # [num_frames, code_dim]
    frame_rate: float

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("latent sequence contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ModelOutput:
    x_hat: Tensor
    codes: Tensor
    vq_loss: Tensor
    quantized: Tensor


class CodecModel(nn.Module):
    """End-to-end codec; all forward passes are causal and deterministic."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.sample_rate = config.sample_rate
        self.hop = config.hop
        self.encoder = Encoder(config.encoder)
        self.projector = Projector(self.encoder.out_channels, config.quantizer.code_dim)
        self.quantizer = ResidualVectorQuantizer(config.quantizer)
        self.decoder = Decoder(config.decoder, config.quantizer.code_dim)
        self.normalizer = CodeNormalizer(config.quantizer.code_dim)
        init_conv_weights(self)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def latents(self, x: Tensor) -> Tensor:
        """(B, 1, T) waveform -> (B, code_dim, ceil(T / hop)) projected latents."""
        return self.projector(self.encoder(x))

    def quantize(self, z: Tensor) -> QuantizeResult:
        return self.quantizer.quantize(z)

    def decode_latents(self, zq: Tensor) -> Tensor:
        """Quantized latents -> waveform; normalizes first in vocoder mode."""
        if self.normalizer.enabled:
            zq = self.normalizer.normalize(zq)
        return self.decoder(zq)

    def forward(self, x: Tensor, detach_codes: bool = False) -> ModelOutput:
        """Full autoencoding pass.

        detach_codes inserts the stage-2 stop-gradient barrier: the decoder
        (and everything after it) receives no gradient path into the
        encoder, projector, or codebook.
        """
        z = self.latents(x)
        result = self.quantizer.quantize(z)
        zq = result.quantized
        if detach_codes:
            zq = zq.detach()
        x_hat = self.decode_latents(zq)
        return ModelOutput(
            x_hat=x_hat, codes=result.codes, vq_loss=result.vq_loss, quantized=result.quantized
        )

    # -- numpy-facing inference API (length-stable kernels, no grad) --

    def encode(self, wave: Waveform) -> Tuple[np.ndarray, LatentSequence]:
        """Waveform -> (code indices [F, num_books], quantized latents)."""
        if wave.sample_rate != self.sample_rate:
            raise CompatibilityError(
                f"waveform rate {wave.sample_rate} != model rate {self.sample_rate}"
            )
        if len(wave) < 1:
            raise ValueError("empty waveform")
        with torch.no_grad(), length_stable_kernels():
            x = torch.from_numpy(wave.samples).view(1, 1, -1)
            z = self.latents(x)
            result = self.quantizer.quantize(z)
        codes = result.codes.squeeze(0).numpy().astype(np.int64)
        latents = LatentSequence(
            result.quantized.squeeze(0).transpose(0, 1).numpy(), self.frame_rate
        )
        return codes, latents

    def decode(self, codes: np.ndarray) -> Waveform:
        """Code indices [F, num_books] -> reconstructed waveform."""
        codes = np.asarray(codes)
        if codes.ndim != 2:
            raise ValueError("codes must be [frames, num_books]")
        with torch.no_grad(), length_stable_kernels():
            idx = torch.from_numpy(codes.astype(np.int64)).unsqueeze(0)
            zq = self.quantizer.dequantize(idx)
            x_hat = self.decode_latents(zq)
        return Waveform(x_hat.squeeze().numpy(), self.sample_rate)

    def reconstruct(self, wave: Waveform) -> Waveform:
        codes, _ = self.encode(wave)
        return self.decode(codes)


def state_hash(module: nn.Module, prefix: str = "") -> str:
    """sha256 over the named parameters/buffers (sorted); freeze contract probe."""
    import hashlib

    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        if prefix and not key.startswith(prefix):
            continue
        h.update(key.encode())
        h.update(state[key].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _to_le_array(t: Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.dtype == np.float32:
        return arr.astype("<f4")
    if arr.dtype == np.float64:
        return arr.astype("<f8")
    if arr.dtype == np.int64:
        return arr.astype("<i8")
    if arr.dtype == np.uint8:
        return arr
    return arr.astype(arr.dtype.newbyteorder("<"))


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus a JSON meta blob as an npz container.

    Entries are stored uncompressed with fixed timestamps in sorted key
    order, so identical content produces byte-identical files.
    """
    import zipfile
    from numpy.lib import format as npy_format

    manifest = {
        key: {"shape": list(arr.shape), "dtype": arr.dtype.str}
        for key, arr in sorted(arrays.items())
    }
    meta = dict(meta)
    meta["manifest"] = manifest
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED, allowZip64=True) as zf:
        for key in sorted(payload):
            buf = io.BytesIO()
            npy_format.write_array(
                buf, np.asanyarray(payload[key]), allow_pickle=False
            )
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {key: data[key] for key in data.files if key != "__meta__"}
    return arrays, meta


def save_checkpoint(
    path,
    model: CodecModel,
    extra: Optional[dict] = None,
) -> None:
    """Write a deployable codec checkpoint (no discriminators, no optimizer)."""
    arrays = {key: _to_le_array(t) for key, t in model.state_dict().items()}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "codec",
        "config": config_echo_dict(model.config),
        "config_hash": config_hash(model.config),
        "extra": extra or {},
    }
    save_arrays(path, arrays, meta)


@dataclass
class LoadedCheckpoint:
    model: CodecModel
    config: ExperimentConfig
    config_hash: str
    extra: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    arrays, meta = load_arrays(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CompatibilityError(
            f"unsupported checkpoint format version {meta.get('format_version')}"
        )
    if meta.get("kind") != "codec":
        raise CompatibilityError(f"not a codec checkpoint: kind={meta.get('kind')!r}")
    config = config_from_dict(meta["config"])
    model = CodecModel(config)
    state = {key: torch.from_numpy(arr.copy()) for key, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return LoadedCheckpoint(
        model=model,
        config=config,
        config_hash=meta["config_hash"],
        extra=meta.get("extra", {}),
    )
