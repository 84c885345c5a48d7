"""Projector and residual vector quantizer with EMA codebook learning.

The quantizer cascades ``num_books`` nearest-neighbor stages, each
quantizing the residual left by the previous stage. Codebooks learn by
exponential moving averages (no gradient), the encoder trains through a
straight-through estimator, and a frozen codebook is bit-stable forever
after (stage 2 / vocoder operation).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import QuantizerConfig
from .errors import FrozenCodebookError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


class Projector(nn.Module):
    """Linear map from encoder channels to the code dimensionality."""

    def __init__(self, in_channels: int, code_dim: int):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, code_dim, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


@dataclass
class QuantizeResult:
    """Output of one quantizer pass.

    quantized carries the straight-through gradient (identity w.r.t. the
    input); stage_residuals/codes are detached views for EMA bookkeeping.
    """

    codes: Tensor  # (B, T, num_books) int64
    quantized: Tensor  # (B, D, T), straight-through
    vq_loss: Tensor  # scalar commitment loss
    stage_residuals: List[Tensor]  # per stage: (B*T, D), detached


def _nearest_entry(residual: Tensor, entries: Tensor) -> Tensor:
    """Index of the nearest codebook entry; ties break to the lowest index."""
    dist = (
        residual.pow(2).sum(1, keepdim=True)
        - 2.0 * residual @ entries.t()
        + entries.pow(2).sum(1)
    )
    book_size = entries.shape[0]
    min_dist = dist.min(dim=1, keepdim=True).values
    idx_grid = torch.arange(book_size, device=dist.device).expand_as(dist)
    candidates = torch.where(dist == min_dist, idx_grid, book_size)
    return candidates.min(dim=1).values


class ResidualVectorQuantizer(nn.Module):
    """num_books x book_size learned codebook over residuals."""

    def __init__(self, cfg: QuantizerConfig):
        super().__init__()
        self.cfg = cfg
        shape = (cfg.num_books, cfg.book_size, cfg.code_dim)
        self.register_buffer("entries", torch.randn(shape) * 0.1)
        self.register_buffer("ema_counts", torch.ones(cfg.num_books, cfg.book_size))
        self.register_buffer("ema_sums", self.entries.clone())
        self.register_buffer("frozen_flag", torch.zeros(1, dtype=torch.uint8))
        self.register_buffer("initialized_flag", torch.zeros(1, dtype=torch.uint8))

    @property
    def num_books(self) -> int:
        return self.cfg.num_books

    @property
    def frozen(self) -> bool:
        return bool(self.frozen_flag.item())

    @property
    def initialized(self) -> bool:
        return bool(self.initialized_flag.item())

    def freeze(self) -> None:
        """Permanently stop codebook updates; idempotent."""
        self.frozen_flag.fill_(1)

    def quantize(self, z: Tensor) -> QuantizeResult:
        """z: (B, D, T) -> codes, straight-through quantized latents, vq loss."""
        if z.shape[1] != self.cfg.code_dim:
            raise ValueError(
                f"latent dim {z.shape[1]} != codebook dim {self.cfg.code_dim}"
            )
        if not torch.isfinite(z).all():
            raise ValueError("non-finite latents passed to the quantizer")
        b, d, t = z.shape
        flat = z.transpose(1, 2).reshape(b * t, d)
        residual = flat.detach()
        total = torch.zeros_like(residual)
        codes = []
        stage_residuals = []
        for s in range(self.cfg.num_books):
            stage_residuals.append(residual)
            idx = _nearest_entry(residual, self.entries[s])
            chosen = self.entries[s].index_select(0, idx)
            residual = residual - chosen
            total = total + chosen
            codes.append(idx)
        vq_loss = F.mse_loss(flat, total.detach())
        # straight-through: value is bit-exactly the entry sum, gradient is
        # identity w.r.t. the input ((flat - flat.detach()) is exactly zero)
        quantized = total.detach() + (flat - flat.detach())
        return QuantizeResult(
            codes=torch.stack(codes, dim=1).view(b, t, self.cfg.num_books),
            quantized=quantized.view(b, t, d).transpose(1, 2),
            vq_loss=vq_loss,
            stage_residuals=stage_residuals,
        )

    def dequantize(self, codes: Tensor) -> Tensor:
        """codes: (B, T, num_books) int64 -> (B, D, T) summed entries."""
        if codes.shape[-1] != self.cfg.num_books:
            raise ValueError(
                f"expected {self.cfg.num_books} books per frame, got {codes.shape[-1]}"
            )
        if codes.min() < 0 or codes.max() >= self.cfg.book_size:
            raise ValueError("code index out of codebook range")
        b, t, s = codes.shape
        out = torch.zeros(b, t, self.cfg.code_dim, device=codes.device)
        for stage in range(s):
            out = out + F.embedding(codes[..., stage], self.entries[stage])
        return out.transpose(1, 2)

    def ema_update(self, stage_indices: List[Tensor], stage_residuals: List[Tensor]) -> None:
        """EMA codebook step from one batch of assignments.

        counts <- decay * counts + (1 - decay) * n
        sums   <- decay * sums + (1 - decay) * sum(assigned vectors)
        entry  <- sums / (counts + epsilon)
        """
        if self.frozen:
            raise FrozenCodebookError("ema_update called on a frozen codebook")
        decay, eps = self.cfg.decay, self.cfg.epsilon
        with torch.no_grad():
            for s, (idx, vecs) in enumerate(zip(stage_indices, stage_residuals)):
                n = torch.bincount(idx, minlength=self.cfg.book_size).float()
                batch_sum = torch.zeros_like(self.ema_sums[s])
                batch_sum.index_add_(0, idx, vecs)
                self.ema_counts[s] = decay * self.ema_counts[s] + (1.0 - decay) * n
                self.ema_sums[s] = decay * self.ema_sums[s] + (1.0 - decay) * batch_sum
                self.entries[s] = self.ema_sums[s] / (
                    self.ema_counts[s].unsqueeze(1) + eps
                )

    def kmeans_init(self, latents: Tensor, generator: Optional[torch.Generator] = None) -> None:
        """Seed each stage's codebook with k-means over the residuals of a batch.

        Falls back to sampled (noise-jittered) latents when the batch is
        smaller than the book size.
        """
        if self.frozen:
            raise FrozenCodebookError("kmeans_init called on a frozen codebook")
        flat = latents.detach().reshape(-1, self.cfg.code_dim)
        residual = flat
        with torch.no_grad():
            for s in range(self.cfg.num_books):
                centers = _kmeans(
                    residual, self.cfg.book_size, self.cfg.kmeans_iters, generator
                )
                self.entries[s] = centers
                self.ema_sums[s] = centers.clone()
                self.ema_counts[s].fill_(1.0)
                idx = _nearest_entry(residual, self.entries[s])
                residual = residual - self.entries[s].index_select(0, idx)
            self.initialized_flag.fill_(1)

    def reseed_dead_codes(
        self, stage_residuals: List[Tensor], generator: Optional[torch.Generator] = None
    ) -> int:
        """Replace entries whose EMA count fell below the threshold with
        random residuals from the current batch. No-op when frozen."""
        if self.frozen:
            return 0
        replaced = 0
        with torch.no_grad():
            for s in range(self.cfg.num_books):
                dead = self.ema_counts[s] < self.cfg.dead_code_threshold
                n_dead = int(dead.sum())
                if n_dead == 0:
                    continue
                pool = stage_residuals[s]
                pick = torch.randint(
                    0, pool.shape[0], (n_dead,), generator=generator, device=pool.device
                )
                fresh = pool.index_select(0, pick)
                self.entries[s][dead] = fresh
                self.ema_sums[s][dead] = fresh
                self.ema_counts[s][dead] = 1.0
                replaced += n_dead
        return replaced

    def perplexity(self, codes: Tensor) -> List[float]:
        """Per-stage exp(entropy) of the assignment histogram."""
        out = []
        flat = codes.reshape(-1, self.cfg.num_books)
        for s in range(self.cfg.num_books):
            hist = torch.bincount(flat[:, s], minlength=self.cfg.book_size).float()
            p = hist / hist.sum()
            ent = -(p[p > 0] * p[p > 0].log()).sum()
            out.append(float(ent.exp()))
        return out


def _kmeans(
    data: Tensor, k: int, iters: int, generator: Optional[torch.Generator]
) -> Tensor:
    n = data.shape[0]
    if n >= k:
        perm = torch.randperm(n, generator=generator, device=data.device)[:k]
        centers = data.index_select(0, perm).clone()
    else:
        pick = torch.randint(0, n, (k,), generator=generator, device=data.device)
        jitter = torch.randn(k, data.shape[1], generator=generator, device=data.device)
        centers = data.index_select(0, pick) + 1e-3 * jitter
    for _ in range(iters):
        idx = _nearest_entry(data, centers)
        counts = torch.bincount(idx, minlength=k).float()
        sums = torch.zeros_like(centers)
        sums.index_add_(0, idx, data)
        alive = counts > 0
        centers[alive] = sums[alive] / counts[alive].unsqueeze(1)
    return centers


class CodeNormalizer(nn.Module):
    """Per-dimension affine normalization of quantized latents.

    Used in vocoder mode: the decoder consumes globally normalized codes,
    with statistics computed over the training corpus after freezing.
    """

    def __init__(self, code_dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(code_dim))
        self.register_buffer("std", torch.ones(code_dim))
        self.register_buffer("enabled_flag", torch.zeros(1, dtype=torch.uint8))

    @property
    def enabled(self) -> bool:
        return bool(self.enabled_flag.item())

    def set_stats(self, mean: Tensor, std: Tensor) -> None:
        std = std.clone()
        zero = std == 0
        if zero.any():
            logger.warning(
                "code normalization: %d zero-variance dimension(s) passed through",
                int(zero.sum()),
            )
            std[zero] = 1.0
        self.mean.copy_(mean)
        self.std.copy_(std)
        self.enabled_flag.fill_(1)

    def normalize(self, z: Tensor) -> Tensor:
        """z: (B, D, T) -> (z - mean) / std along D."""
        return (z - self.mean.view(1, -1, 1)) / self.std.view(1, -1, 1)

    def denormalize(self, z: Tensor) -> Tensor:
        return z * self.std.view(1, -1, 1) + self.mean.view(1, -1, 1)
