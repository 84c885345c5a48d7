"""Objective evaluation: pitch tracking, F0/voicing errors, MCD, and LSD.

The pitch tracker is a normalized-autocorrelation tracker with a peak
threshold voicing decision; mel cepstra come from a DCT of log-mel
spectra. Absolute MCD values are therefore not comparable to toolchains
built on other feature extractors, but orderings between codecs remain
meaningful.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .audio import MelConfig, Waveform, default_mel_config, mel_spectrogram, power_spectrogram

MCD_SCALE = (10.0 / math.log(10.0)) * math.sqrt(2.0)

F0_FRAME_MS = 25.0
F0_HOP_MS = 5.0


@dataclass
class F0TrackerConfig:
    fmin: float = 50.0
    fmax: float = 500.0
    voicing_threshold: float = 0.3  # normalized autocorrelation peak
    energy_floor: float = 1e-4  # RMS below this is unvoiced outright


def _frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if len(x) < frame:
        raise ValueError("utterance shorter than one analysis frame")
    n = 1 + (len(x) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def track_f0(
    wave: Waveform, cfg: Optional[F0TrackerConfig] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-frame pitch and voicing flags (25 ms frames, 5 ms hop).

    Returns (f0_hz, voiced); f0 is 0 for unvoiced frames.
    """
    cfg = cfg or F0TrackerConfig()
    sr = wave.sample_rate
    frame = int(round(F0_FRAME_MS * sr / 1000.0))
    hop = int(round(F0_HOP_MS * sr / 1000.0))
    frames = _frame_signal(wave.samples.astype(np.float64), frame, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)

    lag_min = max(int(sr / cfg.fmax), 2)
    lag_max = min(int(sr / cfg.fmin), frame - 2)
    if lag_min >= lag_max:
        raise ValueError("frame too short for the configured pitch range")

    nfft = 1 << int(np.ceil(np.log2(2 * frame)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, n=nfft, axis=1)[:, :frame]

    r0 = acf[:, 0]
    rms = np.sqrt(r0 / frame)
    silent = rms < cfg.energy_floor
    norm = np.where(r0 > 0, r0, 1.0)
    nacf = acf / norm[:, None]

    search = nacf[:, lag_min : lag_max + 1]
    peak_rel = search.argmax(axis=1)
    peak = peak_rel + lag_min
    peak_val = search[np.arange(len(peak)), peak_rel]
    voiced = (peak_val >= cfg.voicing_threshold) & ~silent

    # parabolic interpolation for sub-sample lag precision
    prev_v = nacf[np.arange(len(peak)), peak - 1]
    next_v = nacf[np.arange(len(peak)), np.minimum(peak + 1, frame - 1)]
    denom = prev_v - 2.0 * peak_val + next_v
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    delta = np.where(np.abs(denom) > 1e-12, 0.5 * (prev_v - next_v) / safe, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    f0 = np.where(voiced, sr / (peak + delta), 0.0)
    return f0.astype(np.float64), voiced


def f0_metrics(
    ref: Waveform, test: Waveform, cfg: Optional[F0TrackerConfig] = None
) -> Tuple[float, float]:
    """(F0 RMSE in Hz over mutually voiced frames, U/V disagreement in %)."""
    f0_r, v_r = track_f0(ref, cfg)
    f0_t, v_t = track_f0(test, cfg)
    if abs(len(f0_r) - len(f0_t)) > max(1, int(F0_FRAME_MS / F0_HOP_MS)):
        raise ValueError(
            f"duration mismatch: {len(f0_r)} vs {len(f0_t)} pitch frames"
        )
    n = min(len(f0_r), len(f0_t))
    f0_r, v_r, f0_t, v_t = f0_r[:n], v_r[:n], f0_t[:n], v_t[:n]
    both = v_r & v_t
    rmse = float(np.sqrt(np.mean((f0_r[both] - f0_t[both]) ** 2))) if both.any() else 0.0
    uv = float(np.mean(v_r != v_t) * 100.0)
    return rmse, uv


def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are coefficients."""
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (t + 0.5) * k / n)
    mat[0] *= 1.0 / np.sqrt(2.0)
    return mat


def mcd_from_mcep(ref_mcep: np.ndarray, test_mcep: np.ndarray, order: int = 24) -> float:
    """Mean over frames of (10/ln10) * sqrt(2) * ||delta mcep||, c0 excluded."""
    diff = ref_mcep[:, 1 : order + 1] - test_mcep[:, 1 : order + 1]
    return float(MCD_SCALE * np.mean(np.linalg.norm(diff, axis=1)))


def mcd(
    ref: Waveform,
    test: Waveform,
    mel_cfg: Optional[MelConfig] = None,
    order: int = 24,
    speech_gate_db: Optional[float] = -50.0,
) -> float:
    """Mel-cepstral distortion (dB) over frame-aligned analysis.

    Frames are included only when both signals carry speech energy (mean
    mel power above ``speech_gate_db``); silence frames otherwise dominate
    the statistic with log-floor noise. Pass None to score every frame.
    The gate is symmetric, so mcd(a, b) == mcd(b, a).
    """
    if ref.sample_rate != test.sample_rate:
        raise ValueError("sample rate mismatch")
    mel_cfg = mel_cfg or default_mel_config(ref.sample_rate)
    if mel_cfg.num_mels <= order:
        raise ValueError(f"need more than {order} mel bands for order-{order} MCD")
    logmel_ref = mel_spectrogram(ref, mel_cfg)
    logmel_test = mel_spectrogram(test, mel_cfg)
    if abs(logmel_ref.shape[0] - logmel_test.shape[0]) > 1:
        raise ValueError(
            f"length mismatch: {logmel_ref.shape[0]} vs {logmel_test.shape[0]} frames"
        )
    n = min(logmel_ref.shape[0], logmel_test.shape[0])
    logmel_ref, logmel_test = logmel_ref[:n], logmel_test[:n]
    if speech_gate_db is not None:
        gate = math.log(10.0) * speech_gate_db / 10.0
        keep = (logmel_ref.mean(axis=1) > gate) & (logmel_test.mean(axis=1) > gate)
        if keep.any():
            logmel_ref, logmel_test = logmel_ref[keep], logmel_test[keep]
    basis = _dct_matrix(mel_cfg.num_mels).T
    return mcd_from_mcep(logmel_ref @ basis, logmel_test @ basis, order)


def lsd(
    ref: Waveform,
    test: Waveform,
    mel_cfg: Optional[MelConfig] = None,
    power_floor: float = 1e-10,
) -> float:
    """Log-spectral distortion (dB): RMS over bins of log10 power differences,
    averaged over frames; floors applied before the log."""
    if ref.sample_rate != test.sample_rate:
        raise ValueError("sample rate mismatch")
    mel_cfg = mel_cfg or default_mel_config(ref.sample_rate)
    p_ref = power_spectrogram(ref, mel_cfg)
    p_test = power_spectrogram(test, mel_cfg)
    if abs(p_ref.shape[0] - p_test.shape[0]) > 1:
        raise ValueError(f"length mismatch: {p_ref.shape[0]} vs {p_test.shape[0]} frames")
    n = min(p_ref.shape[0], p_test.shape[0])
    log_ref = np.log10(np.maximum(p_ref[:n], power_floor))
    log_test = np.log10(np.maximum(p_test[:n], power_floor))
    return float(np.mean(np.sqrt(np.mean((log_ref - log_test) ** 2, axis=1))))


@dataclass
class MetricReport:
    """Corpus-level means of the four objective metrics."""

    f0_rmse: float
    uv_error: float
    mcd: float
    lsd: float
    utterance_count: int
    dnsmos: Optional[float] = None  # reserved for externally computed scores
    per_utterance: List[Dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "f0_rmse_hz": round(self.f0_rmse, 4),
            "uv_error_percent": round(self.uv_error, 4),
            "mcd_db": round(self.mcd, 4),
            "lsd_db": round(self.lsd, 4),
            "utterance_count": self.utterance_count,
            "dnsmos": self.dnsmos,
            "per_utterance": self.per_utterance,
        }


REPORT_SCHEMA = {
    "f0_rmse_hz": float,
    "uv_error_percent": float,
    "mcd_db": float,
    "lsd_db": float,
    "utterance_count": int,
    "dnsmos": (float, type(None)),
    "per_utterance": list,
}


def validate_report(data: dict) -> None:
    """Check a JSON report against REPORT_SCHEMA; raises ValueError."""
    for key, types in REPORT_SCHEMA.items():
        if key not in data:
            raise ValueError(f"report missing key {key!r}")
        expect = types if isinstance(types, tuple) else (types,)
        value = data[key]
        if float in expect and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expect):
            raise ValueError(f"report key {key!r} has type {type(value).__name__}")
    extra = set(data) - set(REPORT_SCHEMA) - {"config_hash", "checkpoint"}
    if extra:
        raise ValueError(f"report has unknown keys {sorted(extra)}")
    for i, row in enumerate(data["per_utterance"]):
        if not isinstance(row, dict) or "utterance" not in row:
            raise ValueError(f"per_utterance[{i}] malformed")


def evaluate_pair(
    ref: Waveform, test: Waveform, mel_cfg: Optional[MelConfig] = None
) -> Dict[str, float]:
    rmse, uv = f0_metrics(ref, test)
    return {
        "f0_rmse_hz": rmse,
        "uv_error_percent": uv,
        "mcd_db": mcd(ref, test, mel_cfg),
        "lsd_db": lsd(ref, test, mel_cfg),
    }


def evaluate_corpus(
    pairs,  # iterable of (name, ref Waveform, test Waveform)
    mel_cfg: Optional[MelConfig] = None,
) -> MetricReport:
    rows = []
    for name, ref, test in pairs:
        scores = evaluate_pair(ref, test, mel_cfg)
        rows.append({"utterance": name, **{k: round(v, 4) for k, v in scores.items()}})
    if not rows:
        raise ValueError("empty corpus")
    mean = lambda key: float(np.mean([r[key] for r in rows]))
    return MetricReport(
        f0_rmse=mean("f0_rmse_hz"),
        uv_error=mean("uv_error_percent"),
        mcd=mean("mcd_db"),
        lsd=mean("lsd_db"),
        utterance_count=len(rows),
        per_utterance=rows,
    )
