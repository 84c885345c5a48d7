"""streamcodec: a trainable, streamable neural audio codec toolkit."""

from .audio import (
    MelConfig,
    Waveform,
    load_wav,
    mel_spectrogram,
    power_spectrogram,
    resample,
    save_wav,
)
from .bitstream import (
    BitstreamHeader,
    bitrate,
    pack_frames,
    pack_payload,
    unpack_frames,
    unpack_payload,
)
from .config import ExperimentConfig, config_hash, load_config, preset, save_config
from .model import CodecModel, LatentSequence, load_checkpoint, save_checkpoint
from .stream import (
    StreamingDecoder,
    StreamingEncoder,
    bench_latency,
    stream_decode,
    stream_encode,
)

__version__ = "0.1.0"

__all__ = [
    "BitstreamHeader",
    "CodecModel",
    "ExperimentConfig",
    "LatentSequence",
    "MelConfig",
    "StreamingDecoder",
    "StreamingEncoder",
    "Waveform",
    "bench_latency",
    "bitrate",
    "config_hash",
    "load_checkpoint",
    "load_config",
    "load_wav",
    "mel_spectrogram",
    "pack_frames",
    "pack_payload",
    "power_spectrogram",
    "preset",
    "resample",
    "save_checkpoint",
    "save_config",
    "save_wav",
    "stream_decode",
    "stream_encode",
    "unpack_frames",
    "unpack_payload",
    "__version__",
]
