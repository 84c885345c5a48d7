"""Chunked streaming: batch equivalence, state contracts, latency bench shape."""

import json

import numpy as np
import pytest
import torch

from streamcodec.audio import Waveform
from streamcodec.generator import MRFBlock
from streamcodec.layers import CausalConv1d
from streamcodec.stream import (
    StreamingDecoder,
    StreamingEncoder,
    bench_latency,
    stream_decode,
    stream_encode,
)

HOP = 30  # tiny config


@pytest.fixture
def utterance():
    rng = np.random.default_rng(12)
    return Waveform(np.clip(rng.normal(0, 0.25, 2400), -1, 1).astype(np.float32), 24000)


class TestStreamingEncoder:
    def test_chunked_codes_equal_batch(self, tiny_model, utterance):
        batch_codes, _ = tiny_model.encode(utterance)
        for chunk in (HOP, 2 * HOP, 7 * HOP, 41, 17):
            codes = stream_encode(tiny_model, utterance, chunk)
            assert np.array_equal(codes, batch_codes), f"chunk={chunk}"

    def test_random_mixed_chunking(self, tiny_model, utterance):
        batch_codes, _ = tiny_model.encode(utterance)
        rng = np.random.default_rng(0)
        for _ in range(5):
            session = StreamingEncoder(tiny_model)
            parts = []
            pos = 0
            while pos < len(utterance):
                step = int(rng.integers(1, 200))
                parts.append(session.process(utterance.samples[pos : pos + step]))
                pos += step
            parts.append(session.flush())
            assert np.array_equal(np.concatenate(parts), batch_codes)

    def test_sub_hop_chunk_carries_remainder(self, tiny_model):
        session = StreamingEncoder(tiny_model)
        out = session.process(np.zeros(HOP - 1, dtype=np.float32))
        assert out.shape == (0, 2)
        assert len(session.state.remainder) == HOP - 1
        out = session.process(np.zeros(1, dtype=np.float32))
        assert out.shape == (1, 2)
        assert len(session.state.remainder) == 0

    def test_reset_isolates_utterances(self, tiny_model, utterance):
        session = StreamingEncoder(tiny_model)
        session.process(np.random.default_rng(5).normal(0, 0.3, 900).astype(np.float32))
        session.reset()
        fresh = session.process(utterance.samples[:900])
        expected = StreamingEncoder(tiny_model).process(utterance.samples[:900])
        assert np.array_equal(fresh, expected)

    def test_appending_audio_never_changes_emitted_frames(self, tiny_model, utterance):
        session = StreamingEncoder(tiny_model)
        first = session.process(utterance.samples[:600])
        session.process(np.random.default_rng(9).normal(0, 0.5, 600).astype(np.float32))
        again = StreamingEncoder(tiny_model).process(utterance.samples[:600])
        assert np.array_equal(first, again)


class TestStreamingDecoder:
    def test_chunked_decode_close_to_batch(self, tiny_model, utterance):
        codes, _ = tiny_model.encode(utterance)
        batch = tiny_model.decode(codes)
        for frames in (1, 2, 5, 16):
            out = stream_decode(tiny_model, codes, frames)
            assert out.shape == batch.samples.shape
            assert np.abs(out - batch.samples).max() <= 1e-4

    def test_zero_frames_is_a_noop(self, tiny_model):
        session = StreamingDecoder(tiny_model)
        before = [s.clone() for s in session.state.layer_states]
        out = session.process(np.zeros((0, 2), dtype=np.int64))
        assert out.shape == (0,)
        for a, b in zip(before, session.state.layer_states):
            assert torch.equal(a, b)

    def test_fresh_vs_warm_state_differs_only_in_receptive_span(self, tiny_model):
        rng = np.random.default_rng(3)
        codes = rng.integers(0, 16, (40, 2))
        warm = StreamingDecoder(tiny_model)
        warm.process(rng.integers(0, 16, (20, 2)))
        warm_out = warm.process(codes)
        fresh_out = StreamingDecoder(tiny_model).process(codes)
        span = decoder_state_span_samples(tiny_model.decoder)
        assert span < 40 * HOP
        tail_diff = np.abs(warm_out[span:] - fresh_out[span:]).max()
        head_diff = np.abs(warm_out[:span] - fresh_out[:span]).max()
        assert tail_diff == 0.0
        assert head_diff > 0.0  # the warm history really does reach the head


def decoder_state_span_samples(decoder) -> int:
    """Receptive-span oracle from layer specs: the output prefix (samples)
    that can depend on pre-chunk history."""

    def conv_span(prefix, conv: CausalConv1d):
        k = conv.conv.kernel_size[0]
        d = conv.conv.dilation[0]
        s = conv.conv.stride[0]
        return -(-(prefix + (k - 1) * d) // s)

    span = 0
    span = conv_span(span, decoder.input_conv)
    for up, block in zip(decoder.ups, decoder.blocks):
        span = span * up.stride + (up.kernel_size - up.stride)
        if isinstance(block, MRFBlock):
            branches = block.branches if block.branches is not None else [block.grouped]
            worst = 0
            for branch in branches:
                b_span = span
                for conv in branch.convs:
                    b_span = conv_span(b_span, conv)
                worst = max(worst, b_span)
            span = worst
        else:
            for unit in block:
                span = conv_span(span, unit.conv1)
                span = conv_span(span, unit.conv2)
    span = conv_span(span, decoder.output_conv)
    return span


class TestBench:
    def _utterances(self, n, seconds=0.8):
        rng = np.random.default_rng(17)
        return [
            Waveform(rng.normal(0, 0.2, int(24000 * seconds)).astype(np.float32), 24000)
            for _ in range(n)
        ]

    def test_report_shape_and_verdicts(self, tiny_model):
        with pytest.warns(UserWarning, match="< 50"):
            report = bench_latency(
                tiny_model,
                {"sym": tiny_model},
                self._utterances(7),
                window_ms=(12.5, 25.0, 50.0, 100.0),
                warmup=2,
            )
        enc_rows = [r for r in report.records if r.role == "encoder"]
        dec_rows = [r for r in report.records if r.role == "decoder"]
        assert len(enc_rows) == 4 and len(dec_rows) == 4
        assert len(report.verdicts) == 4
        for r in report.records:
            assert r.mean_ms >= 0 and r.std_ms >= 0
        for v in report.verdicts:
            assert v.streamable == (v.max_mean_ms < v.window_ms)

    def test_single_utterance_reports_std(self, tiny_model):
        with pytest.warns(UserWarning):
            report = bench_latency(
                tiny_model, {"sym": tiny_model}, self._utterances(1), window_ms=(25.0,), warmup=0
            )
        assert report.num_utterances == 1

    def test_json_and_text_agree(self, tiny_model):
        with pytest.warns(UserWarning):
            report = bench_latency(
                tiny_model, {"sym": tiny_model}, self._utterances(4), window_ms=(25.0, 50.0), warmup=1
            )
        payload = json.loads(report.to_json())
        text = report.to_text()
        for rec in payload["records"]:
            assert f"{rec['mean_ms']:.3f}" in text

    def test_timing_stability_across_runs(self, tiny_model):
        # two benchmarks of the same model agree within 3 standard deviations
        utts = self._utterances(6, seconds=0.5)
        means = []
        stds = []
        for _ in range(2):
            with pytest.warns(UserWarning):
                report = bench_latency(
                    tiny_model, {"sym": tiny_model}, utts, window_ms=(25.0,), warmup=2
                )
            rec = next(r for r in report.records if r.role == "decoder")
            means.append(rec.mean_ms)
            stds.append(rec.std_ms)
        spread = 3.0 * max(max(stds), 0.2)
        assert abs(means[0] - means[1]) <= spread
