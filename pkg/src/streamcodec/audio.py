"""Audio containers, WAV file I/O, and log-mel spectrogram extraction."""

import functools
import wave as _wave
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from scipy.signal import resample_poly


class AudioFormatError(ValueError):
    """Raised for unreadable, non-PCM, or empty WAV payloads."""


@dataclass
class Waveform:
    """Mono audio signal with its sample rate.

    Samples are float32 amplitudes; clipping to [-1, 1] is applied on save,
    not on construction (model outputs may transiently exceed the range).
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    """Parameters of the log-mel extraction used by losses and metrics."""

    fft_size: int = 2048
    hop_length: int = 300
    win_length: int = 1200
    num_mels: int = 80
    fmin: float = 0.0
    fmax: float = 24000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise ValueError("win_length must not exceed fft_size")
        if self.hop_length > self.fft_size:
            raise ValueError("hop_length must not exceed fft_size")
        if not (0 <= self.fmin < self.fmax):
            raise ValueError("need 0 <= fmin < fmax")
        if self.num_mels < 1:
            raise ValueError("num_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def validate_rate(self, sample_rate: int) -> None:
        if self.fmax > sample_rate / 2:
            raise ValueError(
                f"fmax {self.fmax} exceeds Nyquist of {sample_rate} Hz audio"
            )


def _int_scale(bit_depth: int) -> float:
    return float(2 ** (bit_depth - 1))


def load_wav(path: Union[str, Path], target_rate: Optional[int] = None) -> Waveform:
    """Load a PCM WAV file as a mono Waveform, optionally resampling.

    Multichannel files are averaged to mono. Only 16- and 24-bit PCM
    payloads are accepted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with _wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            rate = f.getframerate()
            n_frames = f.getnframes()
            raw = f.readframes(n_frames)
    except (_wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if n_frames == 0:
        raise AudioFormatError(f"{path}: zero-length audio")
    if sampwidth == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float32)
        data /= _int_scale(16)
    elif sampwidth == 3:
        as_bytes = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        # sign-extend little-endian 24-bit into int32
        as_int = (
            as_bytes[:, 0].astype(np.int32)
            | (as_bytes[:, 1].astype(np.int32) << 8)
            | (as_bytes[:, 2].astype(np.int32) << 16)
        )
        as_int = np.where(as_int >= 1 << 23, as_int - (1 << 24), as_int)
        data = as_int.astype(np.float32) / _int_scale(24)
    else:
        raise AudioFormatError(
            f"{path}: unsupported sample width {8 * sampwidth} bits (need 16 or 24)"
        )
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    wave = Waveform(data, rate)
    if target_rate is not None and target_rate != rate:
        wave = resample(wave, target_rate)
    return wave


def save_wav(wave: Waveform, path, bit_depth: int = 16) -> None:
    """Write a Waveform as little-endian PCM WAV, clipping to [-1, 1].

    ``path`` may be a filesystem path or a writable binary file object.
    Round trip through ``load_wav`` agrees with the original within one
    quantization step of the chosen bit depth.
    """
    if bit_depth not in (16, 24):
        raise ValueError(f"bit_depth must be 16 or 24, got {bit_depth}")
    if len(wave) == 0:
        raise ValueError("refusing to save an empty waveform")
    scale = _int_scale(bit_depth)
    clipped = np.clip(wave.samples, -1.0, 1.0)
    quantized = np.clip(np.round(clipped * scale), -scale, scale - 1).astype(np.int32)
    if bit_depth == 16:
        payload = quantized.astype("<i2").tobytes()
    else:
        u = quantized.astype(np.int64) & 0xFFFFFF
        as_bytes = np.empty((len(u), 3), dtype=np.uint8)
        as_bytes[:, 0] = u & 0xFF
        as_bytes[:, 1] = (u >> 8) & 0xFF
        as_bytes[:, 2] = (u >> 16) & 0xFF
        payload = as_bytes.tobytes()
    sink = path if hasattr(path, "write") else str(path)
    with _wave.open(sink, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(bit_depth // 8)
        f.setframerate(wave.sample_rate)
        f.writeframes(payload)


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase (windowed-sinc) resampling."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == wave.sample_rate:
        return wave
    out = resample_poly(wave.samples.astype(np.float64), target_rate, wave.sample_rate)
    return Waveform(out.astype(np.float32), target_rate)


def mel_filterbank(
    sample_rate: int, fft_size: int, num_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    """Triangular mel filterbank [num_mels, fft_size // 2 + 1], peak 1."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    bank = np.zeros((num_mels, n_bins), dtype=np.float64)
    for m in range(num_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return bank.astype(np.float32)


def mel_filter_centers(
    sample_rate: int, fft_size: int, num_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel filters."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    return edges[1:-1]


def reflect_pad_indices(length: int, pad_left: int, pad_right: int) -> np.ndarray:
    """Index map implementing reflection padding without edge repetition.

    Supports pads wider than the signal (repeated reflection), which
    torch's built-in pad does not.
    """
    idx = np.arange(-pad_left, length + pad_right, dtype=np.int64)
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * (length - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= length, period - idx, idx)


class LogMelSpectrogram(torch.nn.Module):
    """Differentiable log-mel extraction with ceil(length / hop) frames.

    Frames are centered mid-hop via reflection padding, so concatenating
    hop-aligned signals concatenates their frames away from the seam.
    """

    def __init__(self, cfg: MelConfig, sample_rate: int):
        super().__init__()
        cfg.validate_rate(sample_rate)
        self.cfg = cfg
        self.sample_rate = sample_rate
        window = torch.hann_window(cfg.win_length, periodic=True, dtype=torch.float32)
        self.register_buffer("window", window)
        bank = torch.from_numpy(
            mel_filterbank(sample_rate, cfg.fft_size, cfg.num_mels, cfg.fmin, cfg.fmax)
        )
        self.register_buffer("mel_bank", bank)

    def num_frames(self, length: int) -> int:
        return -(-length // self.cfg.hop_length)

    def power(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, T) -> (B, bins, num_frames) power spectrogram, no floor."""
        if x.dim() != 2:
            raise ValueError(f"expected (B, T) input, got shape {tuple(x.shape)}")
        cfg = self.cfg
        length = x.shape[-1]
        if length < 1:
            raise ValueError("input too short for spectral extraction")
        n_frames = self.num_frames(length)
        padded_len = (n_frames - 1) * cfg.hop_length + cfg.fft_size
        pad_left = max((cfg.fft_size - cfg.hop_length) // 2, 0)
        pad_right = padded_len - length - pad_left
        idx = torch.from_numpy(reflect_pad_indices(length, pad_left, pad_right))
        x = x.index_select(-1, idx.to(x.device))
        spec = torch.stft(
            x,
            n_fft=cfg.fft_size,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            window=self.window,
            center=False,
            onesided=True,
            return_complex=True,
        )
        return spec.real.pow(2) + spec.imag.pow(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, T) waveform -> (B, num_frames, num_mels) log-mel energies."""
        mel = torch.matmul(self.mel_bank, self.power(x))
        return torch.log(torch.clamp(mel, min=self.cfg.log_floor)).transpose(1, 2)


@functools.lru_cache(maxsize=8)
def _cached_extractor(cfg: MelConfig, sample_rate: int) -> LogMelSpectrogram:
    return LogMelSpectrogram(cfg, sample_rate)


def mel_spectrogram(wave: Waveform, cfg: MelConfig) -> np.ndarray:
    """Log-mel matrix [ceil(len / hop) frames, num_mels] of a waveform."""
    if len(wave) < cfg.hop_length:
        raise ValueError("waveform shorter than one hop")
    extractor = _cached_extractor(cfg, wave.sample_rate)
    with torch.no_grad():
        x = torch.from_numpy(wave.samples).unsqueeze(0)
        out = extractor(x)
    return out.squeeze(0).numpy()


def power_spectrogram(wave: Waveform, cfg: MelConfig) -> np.ndarray:
    """Power spectrogram [frames, fft_size // 2 + 1], same framing as the mel."""
    if len(wave) < cfg.hop_length:
        raise ValueError("waveform shorter than one hop")
    extractor = _cached_extractor(cfg, wave.sample_rate)
    with torch.no_grad():
        x = torch.from_numpy(wave.samples).unsqueeze(0)
        out = extractor.power(x)
    return out.squeeze(0).transpose(0, 1).numpy()


def default_mel_config(sample_rate: int) -> MelConfig:
    """Rate-adapted analysis defaults (fmax at Nyquist, hop 300)."""
    return MelConfig(
        fft_size=2048,
        hop_length=300,
        win_length=1200,
        num_mels=80,
        fmin=0.0,
        fmax=sample_rate / 2.0,
        log_floor=1e-5,
    )
