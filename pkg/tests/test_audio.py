"""Waveform I/O, resampling, and log-mel extraction contracts."""

import wave as wave_module

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from streamcodec.audio import (
    AudioFormatError,
    LogMelSpectrogram,
    MelConfig,
    Waveform,
    load_wav,
    mel_filter_centers,
    mel_spectrogram,
    reflect_pad_indices,
    resample,
    save_wav,
)


def sine(freq, sr, seconds=1.0, amp=0.5):
    t = np.arange(int(sr * seconds)) / sr
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), sr)


class TestWavIO:
    @pytest.mark.parametrize("bit_depth,bound", [(16, 2**-15), (24, 2**-23)])
    def test_roundtrip_quantization_bound(self, tmp_path, bit_depth, bound):
        rng = np.random.default_rng(0)
        wave = Waveform(rng.uniform(-1, 1, 4801).astype(np.float32), 48000)
        path = tmp_path / "x.wav"
        save_wav(wave, path, bit_depth=bit_depth)
        back = load_wav(path)
        assert back.sample_rate == 48000
        assert len(back) == len(wave)
        assert np.abs(back.samples - wave.samples).max() <= bound

    def test_out_of_range_clipped_on_save(self, tmp_path):
        wave = Waveform(np.array([1.5, -1.5, 0.25], dtype=np.float32), 8000)
        path = tmp_path / "c.wav"
        save_wav(wave, path)
        back = load_wav(path)
        assert back.samples[0] == pytest.approx(1.0, abs=2**-15)
        assert back.samples[1] == pytest.approx(-1.0, abs=2**-15)

    def test_all_zero_roundtrip(self, tmp_path):
        wave = Waveform(np.zeros(100, dtype=np.float32), 16000)
        path = tmp_path / "z.wav"
        save_wav(wave, path)
        assert np.all(load_wav(path).samples == 0.0)

    def test_stereo_averaged_to_mono(self, tmp_path):
        data = (np.sin(np.arange(400) * 0.1) * 0.4).astype(np.float32)
        interleaved = np.repeat(np.round(data * 32768).astype("<i2"), 2)
        path = tmp_path / "st.wav"
        with wave_module.open(str(path), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(24000)
            f.writeframes(interleaved.tobytes())
        mono = load_wav(path)
        assert len(mono) == 400
        assert np.abs(mono.samples - np.round(data * 32768) / 32768).max() < 1e-6

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "nope.wav")

    def test_non_wav_payload(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"this is not audio at all" * 4)
        with pytest.raises(AudioFormatError):
            load_wav(path)

    def test_zero_length_audio(self, tmp_path):
        path = tmp_path / "empty.wav"
        with wave_module.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(8000)
            f.writeframes(b"")
        with pytest.raises(AudioFormatError):
            load_wav(path)

    def test_int16_edge_values_survive(self, tmp_path):
        rng = np.random.default_rng(3)
        values = np.concatenate(
            [
                [-(2**15), -(2**15) + 1, -1, 0, 1, 2**15 - 2, 2**15 - 1],
                rng.integers(-(2**15), 2**15, 40),
            ]
        )
        wave = Waveform((values / 32768.0).astype(np.float32), 8000)
        path = tmp_path / "edge.wav"
        save_wav(wave, path)
        back = load_wav(path)
        assert np.abs(back.samples - values / 32768.0).max() <= 2**-16


class TestResample:
    def test_identity_rate(self):
        wave = sine(440, 48000)
        assert resample(wave, 48000) is wave

    def test_length_contract(self, tmp_path):
        wave = sine(440, 48000, seconds=1.0)
        path = tmp_path / "t.wav"
        save_wav(wave, path)
        down = load_wav(path, target_rate=24000)
        assert down.sample_rate == 24000
        assert len(down) == 24000

    def test_tone_frequency_preserved(self):
        # independent oracle: FFT peak of the resampled tone
        wave = sine(1000, 48000, seconds=1.0)
        down = resample(wave, 24000)
        spectrum = np.abs(np.fft.rfft(down.samples * np.hanning(len(down))))
        peak_hz = np.argmax(spectrum) * 24000 / len(down)
        assert abs(peak_hz - 1000) < 2.0
        interior = slice(1000, -1000)
        expected = sine(1000, 24000).samples[interior]
        assert np.abs(down.samples[interior] - expected).max() < 1e-3


class TestMelSpectrogram:
    CFG48 = MelConfig()

    def test_silence_hits_log_floor(self):
        wave = Waveform(np.zeros(48000, dtype=np.float32), 48000)
        mel = mel_spectrogram(wave, self.CFG48)
        assert np.allclose(mel, np.log(self.CFG48.log_floor))

    def test_frame_count_is_ceil(self):
        for length in (300, 301, 48000, 48001, 1199):
            wave = Waveform(np.random.default_rng(1).normal(0, 0.1, length).astype(np.float32), 48000)
            mel = mel_spectrogram(wave, self.CFG48)
            assert mel.shape == (-(-length // 300), 80)

    def test_tone_argmax_matches_nearest_filter_center(self):
        # oracle: analytic filter centers
        centers = mel_filter_centers(48000, 2048, 80, 0.0, 24000.0)
        expected_bin = int(np.argmin(np.abs(centers - 440.0)))
        mel = mel_spectrogram(sine(440, 48000), self.CFG48)
        interior = mel[2:-2]
        assert np.all(interior.argmax(axis=1) == expected_bin)

    def test_concatenation_locality(self):
        # windowing locality: frames away from the seam match the pieces
        rng = np.random.default_rng(2)
        w1 = Waveform(rng.normal(0, 0.2, 6000).astype(np.float32), 48000)
        w2 = Waveform(rng.normal(0, 0.2, 6000).astype(np.float32), 48000)
        joined = Waveform(np.concatenate([w1.samples, w2.samples]), 48000)
        m1 = mel_spectrogram(w1, self.CFG48)
        m2 = mel_spectrogram(w2, self.CFG48)
        mj = mel_spectrogram(joined, self.CFG48)
        pad_frames = -(-(2048 // 2) // 300) + 1
        np.testing.assert_allclose(mj[: 20 - pad_frames], m1[: 20 - pad_frames], atol=1e-4)
        np.testing.assert_allclose(mj[20 + pad_frames :], m2[pad_frames :], atol=1e-4)

    def test_deterministic(self):
        wave = sine(440, 48000)
        a = mel_spectrogram(wave, self.CFG48)
        b = mel_spectrogram(wave, self.CFG48)
        assert np.array_equal(a, b)

    @given(st.floats(min_value=0.2, max_value=4.0))
    @settings(max_examples=20, deadline=None)
    def test_amplitude_scaling_shifts_log_cells(self, alpha):
        wave = sine(500, 24000, seconds=0.25, amp=0.2)
        cfg = MelConfig(fft_size=512, hop_length=120, win_length=240, num_mels=40, fmax=12000.0)
        base = mel_spectrogram(wave, cfg)
        scaled = mel_spectrogram(Waveform(wave.samples * alpha, 24000), cfg)
        floor = np.log(cfg.log_floor) + 1e-6
        active = (base > floor) & (scaled > floor)
        np.testing.assert_allclose(
            scaled[active] - base[active], 2.0 * np.log(alpha), atol=1e-4
        )

    def test_finite_output_for_extreme_input(self):
        wave = Waveform(np.full(2400, 1.0, dtype=np.float32), 24000)
        cfg = MelConfig(fft_size=512, hop_length=120, win_length=240, num_mels=40, fmax=12000.0)
        assert np.all(np.isfinite(mel_spectrogram(wave, cfg)))

    def test_rate_mismatch_rejected(self):
        with pytest.raises(ValueError):
            LogMelSpectrogram(self.CFG48, 24000)  # fmax 24k above Nyquist

    def test_short_input_rejected(self):
        with pytest.raises(ValueError):
            mel_spectrogram(Waveform(np.zeros(10, dtype=np.float32), 48000), self.CFG48)


class TestReflectPad:
    def test_matches_numpy_for_small_pads(self):
        x = np.arange(10.0)
        idx = reflect_pad_indices(10, 3, 4)
        np.testing.assert_array_equal(x[idx], np.pad(x, (3, 4), mode="reflect"))

    def test_supports_pads_wider_than_signal(self):
        x = np.arange(4.0)
        idx = reflect_pad_indices(4, 9, 11)
        np.testing.assert_array_equal(x[idx], np.pad(x, (9, 11), mode="reflect"))

    def test_differentiable_path(self):
        x = torch.arange(6.0, requires_grad=True)
        idx = torch.from_numpy(reflect_pad_indices(6, 2, 2))
        y = x.index_select(0, idx).sum()
        y.backward()
        assert x.grad is not None
