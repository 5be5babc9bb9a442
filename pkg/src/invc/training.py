"""Training: losses, segment sampling, Adam, and the optimization loop.

Training is unsupervised; nothing here reads speaker labels. Both loss
terms are normalized per element so the default loss weights hold across
segment sizes. Deterministic mode pins the thread count and drives all
randomness from saved generator state, which makes runs bit-reproducible
and checkpoint resume exact.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from .corpus import FeatureCache, NormStats
from .dsp import DspConfig
from .errors import ConfigError, IngestionError, NumericError, SizeError
from .model import ArchConfig, VoiceConverter, init_params, save_checkpoint, load_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda_rec: float = 10.0
    lambda_kl: float = 0.01
    lr: float = 0.0005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    weight_decay: float = 0.0001
    dropout: float = 0.5
    segment_len: int = 128
    total_iters: int = 200000
    seed: int = 0
    checkpoint_every: int = 10000
    log_every: int = 100
    deterministic: bool = True

    def __post_init__(self) -> None:
        if min(self.lambda_rec, self.lambda_kl, self.lr, self.adam_beta1,
               self.adam_beta2, self.adam_eps) <= 0:
            raise ConfigError("loss weights, learning rate, and Adam constants must be positive")
        if self.batch_size < 1 or self.segment_len < 1:
            raise ConfigError("batch_size and segment_len must be >= 1")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ConfigError("invalid weight_decay or dropout")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainMetrics:
    iteration: int
    l_rec: float
    l_kl: float
    total: float
    seconds: float

    def line(self) -> str:
        return f"{self.iteration}\t{self.l_rec!r}\t{self.l_kl!r}\t{self.total!r}\t{self.seconds:.3f}"


# --- Losses ---------------------------------------------------------------

def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-element mean absolute error between a batch and its reconstruction."""
    if x.shape != x_hat.shape:
        raise SizeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x_hat - x).abs().mean()


def kl_loss(z_c_mean: torch.Tensor) -> torch.Tensor:
    """Per-element mean of squared content means (unit-variance posterior
    against a standard normal prior collapses to this quadratic penalty)."""
    return z_c_mean.pow(2).mean()


def total_loss(l_rec, l_kl, cfg: TrainConfig):
    return cfg.lambda_rec * l_rec + cfg.lambda_kl * l_kl


# --- Segment sampling -------------------------------------------------------

def sample_segment(cache: FeatureCache, norm: NormStats, rng: np.random.Generator,
                   segment_len: int = 128) -> np.ndarray:
    """Uniformly pick an utterance, then a start frame; returns the
    normalized (segment_len, n_mels) slice."""
    utts = cache.utterance_ids
    if not utts:
        raise IngestionError("cannot sample from an empty feature cache")
    utt = utts[int(rng.integers(len(utts)))]
    frames = cache.frames(utt)
    if frames < segment_len:
        raise SizeError(f"{utt} has {frames} frames < segment_len {segment_len}")
    start = int(rng.integers(frames - segment_len + 1))
    mel = cache.load(utt)[start:start + segment_len]
    return norm.normalize(mel).astype(np.float32)


def sample_batch(cache: FeatureCache, norm: NormStats, rng: np.random.Generator,
                 batch_size: int, segment_len: int) -> torch.Tensor:
    """(batch, n_mels, segment_len) float32 tensor of normalized segments."""
    segs = [sample_segment(cache, norm, rng, segment_len) for _ in range(batch_size)]
    return torch.from_numpy(np.stack(segs).transpose(0, 2, 1).copy())


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(step=0,
                   m={k: torch.zeros_like(p) for k, p in params.items()},
                   v={k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, cfg: TrainConfig) -> AdamState:
    """One Adam update with bias correction, in place on params.

    Weight decay is classic coupled L2: added to the gradient before the
    moment updates. Raises NumericError naming the first tensor whose
    gradient is non-finite.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient in tensor {name!r}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = state.m[name] / bias1
            v_hat = state.v[name] / bias2
            p.addcdiv_(m_hat, v_hat.sqrt() + cfg.adam_eps, value=-cfg.lr)
    return state


# --- Training loop -----------------------------------------------------------

def _rng_state_tensors(torch_rng: torch.Generator) -> dict[str, torch.Tensor]:
    return {"rng.torch": torch_rng.get_state()}


def train(cache: FeatureCache, norm: NormStats, arch: ArchConfig, cfg: TrainConfig,
          out_dir, resume_from=None) -> tuple[Path, list[TrainMetrics]]:
    """Optimize the autoencoder on random segments; returns (checkpoint, metrics).

    Writes metrics.tsv (iter, l_rec, l_kl, total, seconds per log period) and
    checkpoint.invc under out_dir. Checkpoints carry optimizer and generator
    state, so resuming reproduces the uninterrupted run exactly in
    deterministic mode. A non-finite loss aborts with the last good
    checkpoint left on disk.
    """
    if cfg.segment_len % arch.downsample_factor != 0:
        raise ConfigError(
            f"segment_len {cfg.segment_len} not divisible by downsample factor "
            f"{arch.downsample_factor}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.invc"
    metrics_path = out_dir / "metrics.tsv"
    dsp_config = cache.dsp_config
    if arch.n_mels != dsp_config.n_mels:
        raise ConfigError(f"arch.n_mels {arch.n_mels} != cache n_mels {dsp_config.n_mels}")

    old_threads = torch.get_num_threads()
    if cfg.deterministic:
        torch.set_num_threads(1)
    try:
        return _train_loop(cache, norm, arch, cfg, dsp_config, ckpt_path,
                           metrics_path, resume_from)
    finally:
        torch.set_num_threads(old_threads)


def _train_loop(cache, norm, arch, cfg, dsp_config, ckpt_path, metrics_path,
                resume_from) -> tuple[Path, list[TrainMetrics]]:
    torch_rng = torch.Generator()
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        model.set_dropout_rate(cfg.dropout)
        params = dict(model.named_parameters())
        state = AdamState(
            step=int(bundle.meta["adam_step"]),
            m={k: torch.from_numpy(bundle.extra_tensors[f"opt.m.{k}"]).clone()
               for k in params},
            v={k: torch.from_numpy(bundle.extra_tensors[f"opt.v.{k}"]).clone()
               for k in params})
        start_iter = int(bundle.meta["iteration"])
        torch_rng.set_state(torch.from_numpy(bundle.extra_tensors["rng.torch"]))
        np_rng = np.random.default_rng()
        np_rng.bit_generator.state = bundle.meta["numpy_rng_state"]
    else:
        model = init_params(arch, cfg.seed)
        model.set_dropout_rate(cfg.dropout)
        params = dict(model.named_parameters())
        state = AdamState.for_params(params)
        start_iter = 0
        torch_rng.manual_seed(cfg.seed + 1)
        np_rng = np.random.default_rng(cfg.seed + 2)

    def write_checkpoint(iteration: int) -> None:
        extra = {f"opt.m.{k}": v for k, v in state.m.items()}
        extra.update({f"opt.v.{k}": v for k, v in state.v.items()})
        extra.update(_rng_state_tensors(torch_rng))
        meta = {"iteration": iteration, "adam_step": state.step,
                "numpy_rng_state": np_rng.bit_generator.state,
                "train_config": cfg.to_dict()}
        save_checkpoint(ckpt_path, model, dsp_config, norm, meta=meta,
                        extra_tensors=extra)

    metrics: list[TrainMetrics] = []
    mode = "a" if resume_from is not None else "w"
    model.train()
    write_checkpoint(start_iter)  # there is always a last-good checkpoint
    if start_iter >= cfg.total_iters:
        if mode == "w":
            metrics_path.write_text("")
        return ckpt_path, metrics

    with open(metrics_path, mode, encoding="utf-8") as metrics_file:
        t_mark = time.monotonic()
        for iteration in range(start_iter + 1, cfg.total_iters + 1):
            batch = sample_batch(cache, norm, np_rng, cfg.batch_size, cfg.segment_len)
            z_s = model.speaker_encoder(batch, torch_rng)
            z_c_mean = model.content_encoder(batch, torch_rng)
            noise = torch.randn(z_c_mean.shape, generator=torch_rng)
            x_hat = model.decoder(z_s, z_c_mean + noise, torch_rng)

            l_rec = reconstruction_loss(batch, x_hat)
            l_kl = kl_loss(z_c_mean)
            loss = total_loss(l_rec, l_kl, cfg)
            if not torch.isfinite(loss):
                log.error("non-finite loss at iteration %d; aborting "
                          "(last good checkpoint kept)", iteration)
                raise NumericError(f"loss became non-finite at iteration {iteration}")

            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg)

            if iteration % cfg.log_every == 0 or iteration == cfg.total_iters:
                now = time.monotonic()
                rec = TrainMetrics(iteration, l_rec.item(), l_kl.item(),
                                   loss.item(), now - t_mark)
                t_mark = now
                metrics.append(rec)
                metrics_file.write(rec.line() + "\n")
                metrics_file.flush()
                log.info("iter %d l_rec %.4f l_kl %.4f total %.4f",
                         iteration, rec.l_rec, rec.l_kl, rec.total)
            if iteration % cfg.checkpoint_every == 0 or iteration == cfg.total_iters:
                write_checkpoint(iteration)
    return ckpt_path, metrics
