"""Two-stage training, vocoder-mode training, and code extraction.

Stage 1 trains the whole autoencoder with the metric loss only (no
discriminator is ever constructed). Stage 2 builds the discriminator
ensemble and trains the decoder adversarially behind a stop-gradient
barrier; in symAD/asymAD/vocoder modes the encoder, projector, quantizer,
and codebook are frozen and provably untouched. symAD_star trains
everything jointly in stage 2, and soundstream_baseline is the
hinge-loss, STFTD+MSD, from-scratch configuration.
"""

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch

from .audio import LogMelSpectrogram, Waveform, load_wav
from .config import ExperimentConfig, config_echo_dict, config_hash
from .discriminators import DiscriminatorEnsemble
from .errors import ConfigError, MissingPrerequisiteError, TrainingDivergedError
from .losses import (
    GeneratorLossParts,
    adversarial_d_loss,
    adversarial_g_loss,
    ensemble_feature_matching_loss,
    generator_total_loss,
    mel_loss,
)
from .model import (
    CodecModel,
    load_arrays,
    load_checkpoint,
    save_arrays,
    save_checkpoint,
    state_hash,
)

Tensor = torch.Tensor

FROZEN_STAGE2_MODES = ("symAD", "asymAD", "vocoder")


class WavCorpus:
    """All WAVs under a directory, loaded once at the configured rate."""

    def __init__(self, root, sample_rate: int):
        self.root = Path(root)
        if not self.root.is_dir():
            raise MissingPrerequisiteError(f"corpus directory not found: {self.root}")
        self.paths = sorted(self.root.glob("**/*.wav"))
        if not self.paths:
            raise MissingPrerequisiteError(f"no .wav files under {self.root}")
        self.sample_rate = sample_rate
        self._cache: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.paths)

    def samples(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = load_wav(self.paths[i], target_rate=self.sample_rate).samples
        return self._cache[i]

    def waveforms(self) -> Iterator[Tuple[str, Waveform]]:
        for i, path in enumerate(self.paths):
            yield path.name, Waveform(self.samples(i), self.sample_rate)


class SegmentSampler:
    """Seeded random fixed-length, hop-aligned crops batched as (B, 1, L)."""

    def __init__(self, corpus: WavCorpus, segment_length: int, batch_size: int, hop: int, seed: int):
        self.corpus = corpus
        self.segment_length = segment_length
        self.batch_size = batch_size
        self.hop = hop
        self.rng = np.random.default_rng(seed)
        self.usable = [
            i for i in range(len(corpus)) if len(corpus.samples(i)) >= segment_length
        ]
        if not self.usable:
            raise ConfigError(
                f"no corpus utterance reaches segment_length={segment_length}"
            )

    def next_batch(self) -> Tensor:
        out = np.empty((self.batch_size, 1, self.segment_length), dtype=np.float32)
        for b in range(self.batch_size):
            i = self.usable[self.rng.integers(len(self.usable))]
            samples = self.corpus.samples(i)
            max_start = (len(samples) - self.segment_length) // self.hop
            start = int(self.rng.integers(max_start + 1)) * self.hop
            out[b, 0] = samples[start : start + self.segment_length]
        return torch.from_numpy(out)


class TrainLogger:
    """Append-only JSON-lines loss log; truncated for fresh runs."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w")
        self._t_last = time.perf_counter()

    def write(self, record: dict) -> None:
        now = time.perf_counter()
        record = dict(record)
        record["wall_time"] = time.time()
        record["iter_seconds"] = now - self._t_last
        self._t_last = now
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_train_log(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _check_finite(value: float, iteration: int, parts: dict) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {iteration}: "
            + ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        )


def _make_scheduler(optimizer, total_iters: int, gamma: float):
    milestones = [max(total_iters // 2, 1)]
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, gamma=gamma)


class Stage1Loop:
    """Metric-only optimization of the full autoencoder. No discriminators."""

    def __init__(self, model: CodecModel, config: ExperimentConfig):
        self.model = model
        self.config = config
        self.mel = LogMelSpectrogram(config.mel, config.sample_rate)
        self.optimizer = torch.optim.Adam(
            model.parameters(),
            lr=config.schedule.g_lr,
            betas=config.schedule.adam_betas,
        )
        self.scheduler = _make_scheduler(
            self.optimizer, config.schedule.stage1_iters, config.schedule.lr_decay_gamma
        )
        self.reseed_rng = torch.Generator().manual_seed(config.seed + 1)

    def step(self, batch: Tensor, iteration: int) -> dict:
        model, cfg = self.model, self.config
        z = model.latents(batch)
        if not torch.isfinite(z).all():
            raise TrainingDivergedError(f"non-finite latents at iteration {iteration}")
        if not model.quantizer.initialized:
            model.quantizer.kmeans_init(
                z.transpose(1, 2).reshape(-1, z.shape[1]), self.reseed_rng
            )
        result = model.quantizer.quantize(z)
        x_hat = model.decode_latents(result.quantized)
        l_mel = mel_loss(batch.squeeze(1), x_hat.squeeze(1), self.mel)
        total = l_mel + cfg.losses.lambda_vq * result.vq_loss
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.scheduler.step()
        stage_indices = [result.codes[..., s].reshape(-1) for s in range(model.quantizer.num_books)]
        model.quantizer.ema_update(stage_indices, result.stage_residuals)
        if (
            cfg.quantizer.reseed_interval > 0
            and iteration > 0
            and iteration % cfg.quantizer.reseed_interval == 0
        ):
            model.quantizer.reseed_dead_codes(result.stage_residuals, self.reseed_rng)
        parts = {
            "mel": float(l_mel.detach()),
            "vq": float(result.vq_loss.detach()),
            "total": float(total.detach()),
        }
        _check_finite(parts["total"], iteration, parts)
        parts["perplexity"] = model.quantizer.perplexity(result.codes)
        parts["lr"] = self.optimizer.param_groups[0]["lr"]
        return parts


class Stage2Loop:
    """Alternating D/G adversarial training with optional freezing.

    ``frozen`` freezes encoder+projector+quantizer and inserts the
    stop-gradient barrier at the quantizer output; each training mode maps
    to one (frozen, flavor) pair.
    """

    def __init__(
        self,
        model: CodecModel,
        config: ExperimentConfig,
        frozen: bool,
        total_iters: Optional[int] = None,
    ):
        self.model = model
        self.config = config
        self.frozen = frozen
        self.flavor = config.losses.gan_flavor
        self.mel = LogMelSpectrogram(config.mel, config.sample_rate)
        self.discriminators = DiscriminatorEnsemble(config.discriminators)
        total_iters = total_iters or config.schedule.stage2_iters
        if frozen:
            model.quantizer.freeze()
            for module in (model.encoder, model.projector):
                module.requires_grad_(False)
            g_params = list(model.decoder.parameters())
        else:
            g_params = list(model.parameters())
        self.optimizer_g = torch.optim.Adam(
            g_params, lr=config.schedule.g_lr, betas=config.schedule.adam_betas
        )
        self.optimizer_d = torch.optim.Adam(
            self.discriminators.parameters(),
            lr=config.schedule.d_lr,
            betas=config.schedule.adam_betas,
        )
        self.scheduler_g = _make_scheduler(
            self.optimizer_g, total_iters, config.schedule.lr_decay_gamma
        )
        self.scheduler_d = _make_scheduler(
            self.optimizer_d, total_iters, config.schedule.lr_decay_gamma
        )
        self.reseed_rng = torch.Generator().manual_seed(config.seed + 2)

    def _generator_forward(self, batch: Tensor):
        model = self.model
        if self.frozen:
            with torch.no_grad():
                z = model.latents(batch)
                result = model.quantizer.quantize(z)
            zq = result.quantized.detach()
        else:
            z = model.latents(batch)
            if not torch.isfinite(z).all():
                raise TrainingDivergedError("non-finite latents in stage-2 forward")
            if not model.quantizer.initialized:
                model.quantizer.kmeans_init(
                    z.transpose(1, 2).reshape(-1, z.shape[1]), self.reseed_rng
                )
            result = model.quantizer.quantize(z)
            zq = result.quantized
        x_hat = model.decode_latents(zq)
        return x_hat, result

    def step(self, batch: Tensor, iteration: int) -> dict:
        cfg = self.config
        x_hat, result = self._generator_forward(batch)

        # discriminator update on detached audio
        real_out = self.discriminators(batch)
        fake_out = self.discriminators(x_hat.detach())
        l_d = adversarial_d_loss(real_out, fake_out, self.flavor)
        self.optimizer_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.optimizer_d.step()

        # generator update
        fake_out = self.discriminators(x_hat)
        with torch.no_grad():
            real_out = self.discriminators(batch)
        l_adv = adversarial_g_loss(fake_out, self.flavor)
        l_fm = ensemble_feature_matching_loss(real_out, fake_out)
        l_mel = mel_loss(batch.squeeze(1), x_hat.squeeze(1), self.mel)
        parts_t = GeneratorLossParts(adv=l_adv, fm=l_fm, mel=l_mel, vq=result.vq_loss)
        total = generator_total_loss(parts_t, cfg.losses)
        self.optimizer_g.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer_g.step()
        self.scheduler_g.step()
        self.scheduler_d.step()

        if not self.frozen:
            stage_indices = [
                result.codes[..., s].reshape(-1) for s in range(self.model.quantizer.num_books)
            ]
            self.model.quantizer.ema_update(stage_indices, result.stage_residuals)

        parts = {
            "d": float(l_d.detach()),
            "adv": float(l_adv.detach()),
            "fm": float(l_fm.detach()),
            "mel": float(l_mel.detach()),
            "vq": float(result.vq_loss.detach()),
            "total": float(total.detach()),
        }
        _check_finite(parts["total"] + parts["d"], iteration, parts)
        parts["lr"] = self.optimizer_g.param_groups[0]["lr"]
        return parts


@dataclass
class TrainResult:
    checkpoint: Path
    train_state: Path
    log: Path
    iterations: int


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.paths.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_stage1(
    config: ExperimentConfig, progress: bool = False, resume: bool = False
) -> TrainResult:
    """Stage 1: metric-only training of encoder/projector/quantizer/decoder."""
    if config.schedule.mode == "vocoder":
        raise ConfigError("stage 1 is undefined for vocoder mode")
    _seed_everything(config.seed)
    out = _out_dir(config)
    model = CodecModel(config)
    loop = Stage1Loop(model, config)
    corpus = WavCorpus(config.paths.train_corpus, config.sample_rate)
    sampler = SegmentSampler(
        corpus,
        config.schedule.segment_length,
        config.schedule.batch_size,
        config.hop,
        config.seed,
    )
    state_path = out / "stage1-train.npz"
    start = _resume_if_requested(
        resume,
        state_path,
        config,
        model,
        None,
        {"g": loop.optimizer},
        {"g": loop.scheduler},
        {"reseed": loop.reseed_rng},
    )
    for _ in range(start):  # replay the sample stream up to the resume point
        sampler.next_batch()
    log = TrainLogger(out / "train-stage1.jsonl", append=start > 0)
    iters = config.schedule.stage1_iters
    for i in range(start, iters):
        parts = loop.step(sampler.next_batch(), i)
        if i % config.schedule.log_every == 0:
            log.write({"stage": 1, "iter": i, **parts})
        if i % config.schedule.save_every == 0 and i > start:
            _save_train_state(
                state_path, model, None, {"g": loop.optimizer},
                {"g": loop.scheduler}, {"reseed": loop.reseed_rng}, i + 1, 1, config,
            )
        if progress and i % 100 == 0:
            print(f"stage1 iter {i}/{iters} mel={parts['mel']:.4f}", flush=True)
    log.close()
    ckpt = out / "stage1.npz"
    save_checkpoint(ckpt, model, extra={"stage": 1, "mode": config.schedule.mode, "iteration": iters})
    _save_train_state(
        state_path, model, None, {"g": loop.optimizer},
        {"g": loop.scheduler}, {"reseed": loop.reseed_rng}, iters, 1, config,
    )
    return TrainResult(ckpt, state_path, log.path, iters)


def train_stage2(
    config: ExperimentConfig, stage1_ckpt, progress: bool = False, resume: bool = False
) -> TrainResult:
    """Stage 2: adversarial training per the configured mode."""
    stage1_ckpt = Path(stage1_ckpt)
    if not stage1_ckpt.exists():
        raise MissingPrerequisiteError(f"stage-1 checkpoint not found: {stage1_ckpt}")
    loaded = load_checkpoint(stage1_ckpt)
    if config_hash(config) != loaded.config_hash:
        raise ConfigError(
            "config does not match the stage-1 checkpoint "
            f"({config_hash(config)[:12]} vs {loaded.config_hash[:12]})"
        )
    _seed_everything(config.seed + 10)
    out = _out_dir(config)
    model = loaded.model
    model.train()
    frozen = config.schedule.mode in FROZEN_STAGE2_MODES
    loop = Stage2Loop(model, config, frozen=frozen)
    corpus = WavCorpus(config.paths.train_corpus, config.sample_rate)
    sampler = SegmentSampler(
        corpus,
        config.schedule.segment_length,
        config.schedule.batch_size,
        config.hop,
        config.seed + 10,
    )
    state_path = out / "stage2-train.npz"
    optimizers = {"g": loop.optimizer_g, "d": loop.optimizer_d}
    schedulers = {"g": loop.scheduler_g, "d": loop.scheduler_d}
    generators = {"reseed": loop.reseed_rng}
    start = _resume_if_requested(
        resume, state_path, config, model, loop.discriminators, optimizers, schedulers, generators
    )
    for _ in range(start):
        sampler.next_batch()
    log = TrainLogger(out / "train-stage2.jsonl", append=start > 0)
    iters = config.schedule.stage2_iters
    for i in range(start, iters):
        parts = loop.step(sampler.next_batch(), i)
        if i % config.schedule.log_every == 0:
            log.write({"stage": 2, "iter": i, **parts})
        if i % config.schedule.save_every == 0 and i > start:
            _save_train_state(
                state_path, model, loop.discriminators, optimizers, schedulers,
                generators, i + 1, 2, config,
            )
        if progress and i % 100 == 0:
            print(f"stage2 iter {i}/{iters} mel={parts['mel']:.4f}", flush=True)
    log.close()
    ckpt = out / "stage2.npz"
    save_checkpoint(
        ckpt, model, extra={"stage": 2, "mode": config.schedule.mode, "iteration": iters}
    )
    _save_train_state(
        state_path, model, loop.discriminators, optimizers, schedulers, generators,
        iters, 2, config,
    )
    return TrainResult(ckpt, state_path, log.path, iters)


def extract_normalized_codes(ckpt_path, corpus_dir, out_path) -> dict:
    """Encode a corpus with a frozen codec; emit codes + corpus statistics.

    Statistics (per-dimension mean/std) are computed over the quantized
    latents of every frame in the corpus. Deterministic: rerunning
    produces byte-identical output.
    """
    loaded = load_checkpoint(ckpt_path)
    model = loaded.model
    if not model.quantizer.frozen:
        raise ConfigError("code extraction requires a frozen codebook (run stage 2 first)")
    corpus = WavCorpus(corpus_dir, model.sample_rate)
    arrays = {}
    names = []
    count = 0
    mean_acc = np.zeros(model.config.quantizer.code_dim, dtype=np.float64)
    sq_acc = np.zeros_like(mean_acc)
    for name, wave in corpus.waveforms():
        codes, latents = model.encode(wave)
        idx = len(names)
        arrays[f"codes/{idx}"] = codes.astype("<i8")
        arrays[f"latents/{idx}"] = latents.vectors.astype("<f4")
        names.append(name)
        mean_acc += latents.vectors.sum(axis=0)
        sq_acc += (latents.vectors.astype(np.float64) ** 2).sum(axis=0)
        count += latents.num_frames
    mean = mean_acc / count
    var = np.maximum(sq_acc / count - mean**2, 0.0)
    std = np.sqrt(var)
    arrays["stats/mean"] = mean.astype("<f8")
    arrays["stats/std"] = std.astype("<f8")
    meta = {
        "kind": "code-dataset",
        "source_checkpoint": str(ckpt_path),
        "config": config_echo_dict(model.config),
        "config_hash": loaded.config_hash,
        "utterances": names,
        "num_frames": count,
        "wav_root": str(Path(corpus_dir)),
    }
    save_arrays(out_path, arrays, meta)
    return meta


class VocoderLoop:
    """Adversarial decoder training on globally normalized frozen codes."""

    def __init__(self, model: CodecModel, config: ExperimentConfig):
        self.model = model
        self.config = config
        self.flavor = config.losses.gan_flavor
        self.mel = LogMelSpectrogram(config.mel, config.sample_rate)
        self.discriminators = DiscriminatorEnsemble(config.discriminators)
        self.optimizer_g = torch.optim.Adam(
            model.decoder.parameters(),
            lr=config.schedule.g_lr,
            betas=config.schedule.adam_betas,
        )
        self.optimizer_d = torch.optim.Adam(
            self.discriminators.parameters(),
            lr=config.schedule.d_lr,
            betas=config.schedule.adam_betas,
        )
        self.scheduler_g = _make_scheduler(
            self.optimizer_g, config.schedule.stage2_iters, config.schedule.lr_decay_gamma
        )
        self.scheduler_d = _make_scheduler(
            self.optimizer_d, config.schedule.stage2_iters, config.schedule.lr_decay_gamma
        )

    def step(self, codes: Tensor, target: Tensor, iteration: int) -> dict:
        with torch.no_grad():
            zq = self.model.quantizer.dequantize(codes)
        x_hat = self.model.decode_latents(zq)

        real_out = self.discriminators(target)
        fake_out = self.discriminators(x_hat.detach())
        l_d = adversarial_d_loss(real_out, fake_out, self.flavor)
        self.optimizer_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.optimizer_d.step()

        fake_out = self.discriminators(x_hat)
        with torch.no_grad():
            real_out = self.discriminators(target)
        l_adv = adversarial_g_loss(fake_out, self.flavor)
        l_fm = ensemble_feature_matching_loss(real_out, fake_out)
        l_mel = mel_loss(target.squeeze(1), x_hat.squeeze(1), self.mel)
        zero = torch.zeros((), dtype=torch.float32)
        total = generator_total_loss(
            GeneratorLossParts(adv=l_adv, fm=l_fm, mel=l_mel, vq=zero), self.config.losses
        )
        self.optimizer_g.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer_g.step()
        self.scheduler_g.step()
        self.scheduler_d.step()
        parts = {
            "d": float(l_d.detach()),
            "adv": float(l_adv.detach()),
            "fm": float(l_fm.detach()),
            "mel": float(l_mel.detach()),
            "total": float(total.detach()),
        }
        _check_finite(parts["total"] + parts["d"], iteration, parts)
        parts["lr"] = self.optimizer_g.param_groups[0]["lr"]
        return parts


class CodeDataset:
    """Sampler over an extracted code dataset: (code crop, waveform crop)."""

    def __init__(self, codes_path, config: ExperimentConfig, seed: int):
        arrays, meta = load_arrays(codes_path)
        if meta.get("kind") != "code-dataset":
            raise ConfigError(f"{codes_path} is not a code dataset")
        q = meta["config"]["quantizer"]
        if q["code_dim"] != config.quantizer.code_dim or q["num_books"] != config.quantizer.num_books:
            raise ConfigError(
                "code dataset dimensions do not match the vocoder config "
                f"(dataset code_dim={q['code_dim']}, books={q['num_books']})"
            )
        self.meta = meta
        self.codes = [arrays[f"codes/{i}"] for i in range(len(meta["utterances"]))]
        self.mean = arrays["stats/mean"]
        self.std = arrays["stats/std"]
        self.hop = config.hop
        root = Path(meta["wav_root"])
        self.waves = []
        for i, name in enumerate(meta["utterances"]):
            wav = load_wav(root / name, target_rate=config.sample_rate)
            frames = self.codes[i].shape[0]
            self.waves.append(wav.samples[: frames * self.hop])
        self.seg_frames = config.schedule.segment_length // self.hop
        self.batch_size = config.schedule.batch_size
        self.rng = np.random.default_rng(seed)
        self.usable = [
            i for i in range(len(self.codes)) if self.codes[i].shape[0] >= self.seg_frames
        ]
        if not self.usable:
            raise ConfigError("no utterance long enough for the configured segment")

    def next_batch(self) -> Tuple[Tensor, Tensor]:
        books = self.codes[0].shape[1]
        codes = np.empty((self.batch_size, self.seg_frames, books), dtype=np.int64)
        waves = np.empty(
            (self.batch_size, 1, self.seg_frames * self.hop), dtype=np.float32
        )
        for b in range(self.batch_size):
            i = self.usable[self.rng.integers(len(self.usable))]
            f0 = int(self.rng.integers(self.codes[i].shape[0] - self.seg_frames + 1))
            codes[b] = self.codes[i][f0 : f0 + self.seg_frames]
            waves[b, 0] = self.waves[i][f0 * self.hop : (f0 + self.seg_frames) * self.hop]
        return torch.from_numpy(codes), torch.from_numpy(waves)


def train_vocoder(
    config: ExperimentConfig, codes_path, base_ckpt, progress: bool = False
) -> TrainResult:
    """Train a v0/v1/v2 decoder on the extracted normalized codes.

    The resulting checkpoint carries the base model's frozen encoder,
    projector, and codebook, the corpus normalization statistics, and the
    freshly trained decoder, so it is a drop-in codec for the stream
    runtime.
    """
    if config.schedule.mode != "vocoder":
        raise ConfigError("train_vocoder requires schedule.mode == 'vocoder'")
    if config.decoder.variant not in ("v0", "v1", "v2"):
        raise ConfigError("vocoder training requires decoder.variant in v0/v1/v2")
    base = load_checkpoint(base_ckpt)
    if not base.model.quantizer.frozen:
        raise ConfigError("vocoder training requires a frozen base codec")
    _seed_everything(config.seed + 20)
    out = _out_dir(config)
    dataset = CodeDataset(codes_path, config, config.seed + 20)

    model = CodecModel(config)
    model.encoder.load_state_dict(base.model.encoder.state_dict())
    model.projector.load_state_dict(base.model.projector.state_dict())
    model.quantizer.load_state_dict(base.model.quantizer.state_dict())
    model.normalizer.set_stats(
        torch.from_numpy(dataset.mean.astype(np.float32)),
        torch.from_numpy(dataset.std.astype(np.float32)),
    )
    loop = VocoderLoop(model, config)
    log = TrainLogger(out / f"train-vocoder-{config.decoder.variant}.jsonl")
    iters = config.schedule.stage2_iters
    enc_hash_before = state_hash(model.encoder)
    for i in range(iters):
        codes, target = dataset.next_batch()
        parts = loop.step(codes, target, i)
        if i % config.schedule.log_every == 0:
            log.write({"stage": "vocoder", "iter": i, **parts})
        if progress and i % 100 == 0:
            print(f"vocoder iter {i}/{iters} mel={parts['mel']:.4f}", flush=True)
    log.close()
    assert state_hash(model.encoder) == enc_hash_before
    ckpt = out / f"vocoder-{config.decoder.variant}.npz"
    save_checkpoint(
        ckpt,
        model,
        extra={
            "stage": "vocoder",
            "mode": "vocoder",
            "variant": config.decoder.variant,
            "iteration": iters,
        },
    )
    state_path = out / f"vocoder-{config.decoder.variant}-train.npz"
    _save_train_state(
        state_path,
        model,
        loop.discriminators,
        {"g": loop.optimizer_g, "d": loop.optimizer_d},
        {"g": loop.scheduler_g, "d": loop.scheduler_d},
        {},
        iters,
        "vocoder",
        config,
    )
    return TrainResult(ckpt, state_path, log.path, iters)


def evaluate_mel_loss(
    model: CodecModel, corpus: WavCorpus, max_utterances: Optional[int] = None
) -> float:
    """Held-out reconstruction mel loss averaged over whole utterances."""
    mel = LogMelSpectrogram(model.config.mel, model.sample_rate)
    losses = []
    for i, (name, wave) in enumerate(corpus.waveforms()):
        if max_utterances is not None and i >= max_utterances:
            break
        recon = model.reconstruct(wave)
        n = min(len(wave), len(recon))
        with torch.no_grad():
            a = torch.from_numpy(wave.samples[:n]).unsqueeze(0)
            b = torch.from_numpy(recon.samples[:n]).unsqueeze(0)
            losses.append(float(mel_loss(a, b, mel)))
    return float(np.mean(losses))


def training_speed_probe(
    config: ExperimentConfig, phase: str, iters: int = 20, warmup: int = 3
) -> float:
    """Iterations/second of one training phase on synthetic batches.

    phase: 'stage1', 'stage2_frozen' (encoder fixed), or 'stage2_joint'
    (symAD*-style). Model and data geometry come from the config, so the
    three phases are directly comparable.
    """
    _seed_everything(config.seed)
    model = CodecModel(config)
    if phase == "stage1":
        loop = Stage1Loop(model, config)
    elif phase == "stage2_frozen":
        model.quantizer.initialized_flag.fill_(1)
        loop = Stage2Loop(model, config, frozen=True, total_iters=iters + warmup + 1)
    elif phase == "stage2_joint":
        model.quantizer.initialized_flag.fill_(1)
        loop = Stage2Loop(model, config, frozen=False, total_iters=iters + warmup + 1)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    gen = torch.Generator().manual_seed(config.seed)
    batch = torch.rand(
        (config.schedule.batch_size, 1, config.schedule.segment_length), generator=gen
    ) * 0.2 - 0.1
    for i in range(warmup):
        loop.step(batch, i)
    t0 = time.perf_counter()
    for i in range(iters):
        loop.step(batch, warmup + i)
    dt = time.perf_counter() - t0
    return iters / dt


# -- resumable training state ------------------------------------------------


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> Tuple[dict, dict]:
    arrays = {}
    sd = opt.state_dict()
    scalars = {"param_groups": sd["param_groups"], "state_keys": {}}
    for idx, state in sd["state"].items():
        keys = {}
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}.{idx}.{key}"] = value.detach().cpu().numpy()
                keys[key] = "tensor"
            else:
                keys[key] = value
        scalars["state_keys"][str(idx)] = keys
    return arrays, scalars


def _optimizer_load(opt: torch.optim.Optimizer, arrays: dict, scalars: dict, prefix: str) -> None:
    state = {}
    for idx_str, keys in scalars["state_keys"].items():
        idx = int(idx_str)
        entry = {}
        for key, kind in keys.items():
            if kind == "tensor":
                entry[key] = torch.from_numpy(arrays[f"{prefix}.{idx}.{key}"].copy())
            else:
                entry[key] = kind
        state[idx] = entry
    opt.load_state_dict({"state": state, "param_groups": scalars["param_groups"]})


def _scheduler_meta(scheduler) -> dict:
    sd = scheduler.state_dict()
    sd["milestones"] = {str(k): v for k, v in sd["milestones"].items()}
    return sd


def _scheduler_restore(scheduler, meta: dict) -> None:
    from collections import Counter

    sd = dict(meta)
    sd["milestones"] = Counter({int(k): v for k, v in sd["milestones"].items()})
    scheduler.load_state_dict(sd)


def _save_train_state(
    path, model, discriminators, optimizers, schedulers, generators, iteration, stage, config
):
    arrays = {}
    for key, t in model.state_dict().items():
        arrays[f"model.{key}"] = t.detach().cpu().numpy()
    if discriminators is not None:
        for key, t in discriminators.state_dict().items():
            arrays[f"disc.{key}"] = t.detach().cpu().numpy()
    opt_meta = {}
    for name, opt in optimizers.items():
        opt_arrays, scalars = _optimizer_arrays(opt, f"opt.{name}")
        arrays.update(opt_arrays)
        opt_meta[name] = scalars
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    for name, gen in generators.items():
        arrays[f"rng.{name}"] = gen.get_state().numpy()
    meta = {
        "kind": "train-state",
        "stage": stage,
        "iteration": iteration,
        "config": config_echo_dict(config),
        "config_hash": config_hash(config),
        "optimizers": opt_meta,
        "schedulers": {name: _scheduler_meta(s) for name, s in schedulers.items()},
    }
    save_arrays(path, arrays, meta)


def load_train_state(path) -> Tuple[dict, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "train-state":
        raise ConfigError(f"{path} is not a training state file")
    return arrays, meta


def _resume_if_requested(
    resume: bool,
    state_path,
    config: ExperimentConfig,
    model: CodecModel,
    discriminators,
    optimizers: dict,
    schedulers: dict,
    generators: dict,
) -> int:
    """Restore model/optimizer/scheduler/rng state; returns the start iteration.

    Resume is crash recovery: the config must be identical to the one that
    produced the state (changing the schedule invalidates the trajectory).
    """
    if not resume or not Path(state_path).exists():
        return 0
    arrays, meta = load_train_state(state_path)
    if meta["config_hash"] != config_hash(config):
        raise ConfigError(
            f"training state {state_path} was produced by a different config"
        )
    model.load_state_dict(
        {
            key[len("model.") :]: torch.from_numpy(arr.copy())
            for key, arr in arrays.items()
            if key.startswith("model.")
        }
    )
    if discriminators is not None:
        disc_state = {
            key[len("disc.") :]: torch.from_numpy(arr.copy())
            for key, arr in arrays.items()
            if key.startswith("disc.")
        }
        if disc_state:
            discriminators.load_state_dict(disc_state)
    for name, opt in optimizers.items():
        _optimizer_load(opt, arrays, meta["optimizers"][name], f"opt.{name}")
    for name, sch in schedulers.items():
        _scheduler_restore(sch, meta["schedulers"][name])
    torch.set_rng_state(torch.from_numpy(arrays["rng.torch"].copy()))
    for name, gen in generators.items():
        gen.set_state(torch.from_numpy(arrays[f"rng.{name}"].copy()))
    return int(meta["iteration"])
