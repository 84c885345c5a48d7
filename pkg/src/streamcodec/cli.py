"""Command-line entry point: train / encode / decode / bench / eval / extract-codes.

Exit codes are stable for scripting: 0 success, 2 invalid config,
3 missing prerequisite, 4 incompatible artifacts, 5 corrupt bitstream.
The STREAMCODEC_HOME environment variable, when set, anchors relative
output directories.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bitstream as bs
from .audio import Waveform, load_wav, save_wav
from .config import ExperimentConfig, load_config
from .errors import (
    BitstreamError,
    CompatibilityError,
    ConfigError,
    MissingPrerequisiteError,
    TrainingDivergedError,
)
from .metrics import evaluate_corpus
from .model import LoadedCheckpoint, load_checkpoint
from .stream import StreamingDecoder, StreamingEncoder, bench_latency
from . import trainer


def _resolve_output_root(config: ExperimentConfig) -> None:
    home = os.environ.get("STREAMCODEC_HOME")
    if home and config.paths.output_dir and not Path(config.paths.output_dir).is_absolute():
        config.paths.output_dir = str(Path(home) / config.paths.output_dir)


def _load_ckpt(path) -> LoadedCheckpoint:
    if not Path(path).exists():
        raise MissingPrerequisiteError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _header_for(loaded: LoadedCheckpoint) -> bs.BitstreamHeader:
    q = loaded.config.quantizer
    return bs.BitstreamHeader(
        sample_rate=loaded.model.sample_rate,
        hop=loaded.model.hop,
        num_books=q.num_books,
        bits_per_code=q.bits_per_code,
        variant=loaded.config.decoder.variant,
        codes_normalized=loaded.model.normalizer.enabled,
        config_hash_prefix=bytes.fromhex(loaded.config_hash[:16]),
    )


def _read_input(path) -> bytes:
    if str(path) == "-":
        return sys.stdin.buffer.read()
    p = Path(path)
    if not p.exists():
        raise MissingPrerequisiteError(f"input not found: {p}")
    return p.read_bytes()


def _write_output(path, data: bytes) -> None:
    if str(path) == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        Path(path).write_bytes(data)


def cmd_train(args) -> int:
    config = load_config(args.config)
    _resolve_output_root(config)
    out = Path(config.paths.output_dir or ".")
    stage = args.stage
    if stage in ("1", "all"):
        result = trainer.train_stage1(config, progress=args.progress, resume=args.resume)
        print(f"stage1 checkpoint: {result.checkpoint}")
    if stage in ("2", "all"):
        ckpt = args.stage1_ckpt or (out / "stage1.npz")
        result = trainer.train_stage2(
            config, ckpt, progress=args.progress, resume=args.resume
        )
        print(f"stage2 checkpoint: {result.checkpoint}")
    if stage == "vocoder":
        base = args.base_ckpt or (out / "stage2.npz")
        codes = args.codes or (out / "codes.npz")
        if not Path(codes).exists():
            raise MissingPrerequisiteError(
                f"code dataset not found: {codes} (run extract-codes first)"
            )
        result = trainer.train_vocoder(config, codes, base, progress=args.progress)
        print(f"vocoder checkpoint: {result.checkpoint}")
    return 0


def cmd_encode(args) -> int:
    loaded = _load_ckpt(args.checkpoint)
    model = loaded.model
    header = _header_for(loaded)
    wave = load_wav(args.input, target_rate=model.sample_rate)
    if args.chunk_ms is not None:
        chunk = max(int(round(args.chunk_ms * model.sample_rate / 1000.0)), 1)
        session = StreamingEncoder(model)
        parts = [
            session.process(wave.samples[i : i + chunk])
            for i in range(0, len(wave), chunk)
        ]
        parts.append(session.flush())
        codes = np.concatenate(parts, axis=0)
    else:
        codes, _ = model.encode(wave)
    _write_output(args.output, bs.pack_frames(codes, header))
    if str(args.output) != "-":
        rate = bs.bitrate(header)
        print(f"{codes.shape[0]} frames, {rate} bps -> {args.output}")
    return 0


def _check_header(header: bs.BitstreamHeader, loaded: LoadedCheckpoint, force: bool) -> None:
    expected = _header_for(loaded)
    problems = []
    for field in ("sample_rate", "hop", "num_books", "bits_per_code", "variant", "codes_normalized"):
        have, want = getattr(header, field), getattr(expected, field)
        if have != want:
            problems.append(f"{field}: bitstream={have} checkpoint={want}")
    if header.config_hash_prefix != expected.config_hash_prefix:
        problems.append("config hash mismatch")
    if problems and not force:
        raise CompatibilityError(
            "bitstream/checkpoint mismatch (--force to override): " + "; ".join(problems)
        )


def cmd_decode(args) -> int:
    loaded = _load_ckpt(args.checkpoint)
    model = loaded.model
    header, codes = bs.unpack_frames(_read_input(args.input))
    _check_header(header, loaded, args.force)
    if args.chunk_ms is not None:
        frames = max(int(round(args.chunk_ms * model.sample_rate / 1000.0)) // model.hop, 1)
        session = StreamingDecoder(model)
        parts = [
            session.process(codes[i : i + frames]) for i in range(0, codes.shape[0], frames)
        ]
        samples = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
        wave = Waveform(samples, model.sample_rate)
    else:
        wave = model.decode(codes)
    if str(args.output) == "-":
        import io as _io

        buf = _io.BytesIO()
        save_wav(wave, buf, bit_depth=args.bit_depth)
        sys.stdout.buffer.write(buf.getvalue())
        sys.stdout.buffer.flush()
    else:
        save_wav(wave, args.output, bit_depth=args.bit_depth)
        print(f"{codes.shape[0]} frames -> {len(wave)} samples -> {args.output}")
    return 0


def _corpus_waveforms(corpus_dir, sample_rate, limit=None):
    paths = sorted(Path(corpus_dir).glob("**/*.wav"))
    if not paths:
        raise MissingPrerequisiteError(f"no .wav files under {corpus_dir}")
    if limit:
        paths = paths[:limit]
    return [(p.name, load_wav(p, target_rate=sample_rate)) for p in paths]


def cmd_bench(args) -> int:
    loaded = _load_ckpt(args.checkpoint)
    decoders = {loaded.config.decoder.variant: loaded.model}
    for extra in args.extra_decoder or []:
        extra_loaded = _load_ckpt(extra)
        label = extra_loaded.config.decoder.variant
        if label in decoders:
            label = f"{label}:{Path(extra).stem}"
        decoders[label] = extra_loaded.model
    named = _corpus_waveforms(args.corpus, loaded.model.sample_rate, args.utterances)
    waves = [w for _, w in named]
    windows = [float(w) for w in args.windows.split(",")]
    report = bench_latency(loaded.model, decoders, waves, window_ms=windows)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
        print(f"json report -> {args.json}")
    return 0


def cmd_eval(args) -> int:
    loaded = _load_ckpt(args.checkpoint)
    model = loaded.model
    named = _corpus_waveforms(args.corpus, model.sample_rate, args.utterances)

    def pairs():
        for name, ref in named:
            yield name, ref, model.reconstruct(ref)

    report = evaluate_corpus(pairs(), model.config.mel)
    payload = report.to_dict()
    payload["config_hash"] = loaded.config_hash
    payload["checkpoint"] = str(args.checkpoint)
    header = f"{'utterance':<28}{'F0RMSE(Hz)':>12}{'U/V(%)':>9}{'MCD(dB)':>9}{'LSD(dB)':>9}"
    print(header)
    for row in report.per_utterance:
        print(
            f"{row['utterance']:<28}{row['f0_rmse_hz']:>12.3f}{row['uv_error_percent']:>9.3f}"
            f"{row['mcd_db']:>9.3f}{row['lsd_db']:>9.3f}"
        )
    print(
        f"{'MEAN':<28}{report.f0_rmse:>12.3f}{report.uv_error:>9.3f}"
        f"{report.mcd:>9.3f}{report.lsd:>9.3f}"
    )
    if args.json:
        Path(args.json).write_text(json.dumps(payload, indent=2))
        print(f"json report -> {args.json}")
    return 0


def cmd_extract_codes(args) -> int:
    meta = trainer.extract_normalized_codes(args.checkpoint, args.corpus, args.out)
    print(f"{len(meta['utterances'])} utterances, {meta['num_frames']} frames -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamcodec",
        description="Trainable, streamable neural audio codec with residual VQ",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training pipeline from a config file")
    p.add_argument("config", help="YAML experiment config")
    p.add_argument("--stage", choices=["1", "2", "vocoder", "all"], default="all")
    p.add_argument("--resume", action="store_true", help="resume from saved training state")
    p.add_argument("--progress", action="store_true", help="print periodic progress lines")
    p.add_argument("--stage1-ckpt", default=None, help="override stage-1 checkpoint path")
    p.add_argument("--base-ckpt", default=None, help="frozen base codec for vocoder training")
    p.add_argument("--codes", default=None, help="extracted code dataset for vocoder training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a WAV file to a bitstream")
    p.add_argument("checkpoint")
    p.add_argument("input", help="input .wav path")
    p.add_argument("output", help="output bitstream path, or '-' for stdout")
    p.add_argument("--chunk-ms", type=float, default=None, help="stream in chunks of this many ms")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream to a WAV file")
    p.add_argument("checkpoint")
    p.add_argument("input", help="input bitstream path, or '-' for stdin")
    p.add_argument("output", help="output .wav path, or '-' for stdout")
    p.add_argument("--chunk-ms", type=float, default=None)
    p.add_argument("--bit-depth", type=int, choices=[16, 24], default=16)
    p.add_argument("--force", action="store_true", help="ignore header/checkpoint mismatches")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="latency benchmark over a corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--windows", default="12.5,25,50,100", help="window lengths in ms")
    p.add_argument("--extra-decoder", action="append", help="additional decoder checkpoints")
    p.add_argument("--utterances", type=int, default=None, help="cap the number of utterances")
    p.add_argument("--json", default=None, help="also write a JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="objective metrics of a codec over a corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--utterances", type=int, default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-codes", help="dump normalized codes of a corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("out", help="output .npz code dataset")
    p.set_defaults(func=cmd_extract_codes)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except CompatibilityError as exc:
        print(f"incompatible artifacts: {exc}", file=sys.stderr)
        return 4
    except BitstreamError as exc:
        print(f"corrupt bitstream: {exc}", file=sys.stderr)
        return 5
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
