"""Shared fixtures: small configs and deterministic synthetic speech corpora."""

import numpy as np
import pytest
import torch
from scipy.signal import lfilter

from streamcodec.audio import MelConfig, Waveform, save_wav
from streamcodec.config import (
    DecoderConfig,
    DiscriminatorConfig,
    EncoderConfig,
    ExperimentConfig,
    QuantizerConfig,
    TrainSchedule,
)


def _resonator(freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    return [1.0 - r], [1.0, -2 * r * np.cos(theta), r * r]


def synth_utterance(rng: np.random.Generator, sr: int = 24000, seconds: float = 10.0) -> np.ndarray:
    """Speech-like test signal: pitched pulses through formant resonators,
    alternating with filtered noise and pauses at a syllable-ish rate."""
    n = int(sr * seconds)
    t = np.arange(n) / sr
    base = rng.uniform(100, 220)
    f0 = base * (1 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.8, 2.5) * t + rng.uniform(0, 6)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    pulses = np.zeros(n)
    pulses[np.diff(np.floor(phase / (2 * np.pi)), prepend=0.0) > 0] = 1.0
    voiced = np.zeros(n)
    for fmt, bw in (
        (rng.uniform(300, 800), 80),
        (rng.uniform(1000, 2000), 120),
        (rng.uniform(2400, 3200), 200),
    ):
        b, a = _resonator(fmt, bw, sr)
        voiced += lfilter(b, a, pulses) * rng.uniform(0.5, 1.0)
    b, a = _resonator(rng.uniform(3000, 6000), 2000, sr)
    unvoiced = lfilter(b, a, rng.normal(0, 1.0, n))
    gate_v = np.zeros(n)
    gate_u = np.zeros(n)
    i = 0
    seg = int(sr * 0.18)
    while i < n:
        kind = rng.choice(["v", "v", "u", "p"])
        dur = int(seg * rng.uniform(0.7, 1.6))
        sl = slice(i, min(i + dur, n))
        if kind == "v":
            gate_v[sl] = 1.0
        elif kind == "u":
            gate_u[sl] = 1.0
        i += dur
    win = np.hanning(int(sr * 0.02) * 2 + 1)
    win /= win.sum()
    sig = voiced * np.convolve(gate_v, win, mode="same")
    sig += 0.3 * unvoiced * np.convolve(gate_u, win, mode="same")
    sig = sig / (np.sqrt(np.mean(sig**2)) + 1e-9) * 0.15
    return np.clip(sig, -0.95, 0.95).astype(np.float32)


def write_corpus(directory, num_utterances, seconds, sr=24000, seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(num_utterances):
        wave = Waveform(synth_utterance(rng, sr, seconds), sr)
        save_wav(wave, directory / f"utt{i:03d}.wav")
    return directory


def tiny_experiment_config() -> ExperimentConfig:
    """Hop-30 config small enough for sub-second forward passes."""
    return ExperimentConfig(
        seed=42,
        sample_rate=24_000,
        mel=MelConfig(
            fft_size=256, hop_length=60, win_length=120, num_mels=32, fmin=0.0, fmax=12_000.0
        ),
        encoder=EncoderConfig(
            downsample_factors=(2, 3, 5), base_channels=4, num_blocks_per_stage=1
        ),
        quantizer=QuantizerConfig(num_books=2, book_size=16, code_dim=8),
        decoder=DecoderConfig(
            variant="sym",
            channels=32,
            upsample_factors=(5, 3, 2),
            num_blocks_per_stage=1,
            min_channels=4,
        ),
        discriminators=DiscriminatorConfig(
            periods=(2, 3),
            mpd_channels=4,
            mpd_max_channels=16,
            msd_scales=2,
            msd_channels=4,
            msd_max_channels=16,
            stftd_fft_size=128,
            stftd_hop=32,
            stftd_channels=4,
        ),
        schedule=TrainSchedule(
            stage1_iters=4,
            stage2_iters=3,
            batch_size=2,
            segment_length=600,
            save_every=1000,
        ),
    )


@pytest.fixture
def tiny_config():
    return tiny_experiment_config()


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(tiny_config.seed)
    from streamcodec.model import CodecModel

    model = CodecModel(tiny_config)
    model.eval()
    return model


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Six 4-second utterances at 24 kHz for trainer-level tests."""
    return write_corpus(tmp_path_factory.mktemp("toy-corpus"), 6, 4.0, seed=100)


@pytest.fixture(scope="session")
def speech_corpus_10min(tmp_path_factory):
    """The desk-scale training corpus: 60 x 10 s = 10 minutes at 24 kHz."""
    return write_corpus(tmp_path_factory.mktemp("speech-10min"), 60, 10.0, seed=300)


@pytest.fixture(scope="session")
def speech_heldout(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("speech-heldout"), 6, 6.0, seed=400)
