"""Speaker encoder, content encoder, and decoder, plus parameter
initialization and checkpoint serialization.

The speaker encoder pools over time into a fixed-length embedding; the
content encoder downsamples time with strided convolutions and (by default)
instance-normalizes after every convolution so channel statistics cannot
carry speaker identity. The decoder reinjects those statistics through
per-layer adaptive instance normalization driven by the speaker embedding,
and upsamples back with 1-D pixel shuffles. Everything is fully
convolutional over time, so any frame count divisible by the downsampling
factor works at inference.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
from torch import nn

from . import layers
from .corpus import NormStats
from .dsp import DspConfig
from .errors import CheckpointError, ConfigError, SizeError

CHECKPOINT_MAGIC = b"INVCCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "|u1"),
}


@dataclass(frozen=True)
class ArchConfig:
    """Network sizes. The defaults describe the full-scale model; tiny() is
    the small preset used throughout the test suite."""

    n_mels: int = 512
    convbank_k: int = 8
    enc_channels: int = 128
    n_enc_blocks: int = 6
    downsample_factor: int = 4
    speaker_dim: int = 128
    content_channels: int = 128
    n_dec_blocks: int = 6
    n_res_blocks: int = 4
    dropout_rate: float = 0.5
    content_encoder_in: bool = True
    speaker_encoder_in: bool = False
    eps: float = layers.DEFAULT_EPS

    def __post_init__(self) -> None:
        for name in ("n_mels", "convbank_k", "enc_channels", "n_enc_blocks",
                     "downsample_factor", "speaker_dim", "content_channels",
                     "n_dec_blocks", "n_res_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        n_up = self.downsample_factor.bit_length() - 1
        if 2 ** n_up != self.downsample_factor:
            raise ConfigError("downsample_factor must be a power of two (stride-2 stages)")
        if self.n_enc_blocks < n_up or self.n_dec_blocks < n_up:
            raise ConfigError("need at least one block per stride-2 / upsample stage")

    @property
    def n_up_stages(self) -> int:
        return self.downsample_factor.bit_length() - 1

    @property
    def bank_channels(self) -> int:
        return max(1, self.enc_channels // 4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, n_mels: int = 64, **overrides) -> "ArchConfig":
        """~100k-parameter preset for tests and desk-scale runs."""
        base = dict(n_mels=n_mels, convbank_k=4, enc_channels=32, n_enc_blocks=4,
                    downsample_factor=4, speaker_dim=32, content_channels=32,
                    n_dec_blocks=4, n_res_blocks=2, dropout_rate=0.5)
        base.update(overrides)
        return cls(**base)


class SpeakerEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.bank = layers.ConvBank(arch.n_mels, arch.bank_channels, arch.convbank_k)
        self.proj = layers.Conv1d(arch.convbank_k * arch.bank_channels, arch.enc_channels, 1)
        self.blocks = nn.ModuleList([
            layers.ConvBlock(arch.enc_channels, arch.enc_channels, 5,
                             use_in=arch.speaker_encoder_in,
                             dropout_rate=arch.dropout_rate, eps=arch.eps)
            for _ in range(arch.n_enc_blocks)])
        self.fc1 = nn.Linear(arch.enc_channels, arch.enc_channels)
        self.fc2 = nn.Linear(arch.enc_channels, arch.speaker_dim)

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None,
                taps: dict | None = None) -> torch.Tensor:
        h = self.bank(x)
        h = layers.dropout(layers.activation(self.proj(h)),
                           self.arch.dropout_rate, rng, self.training)
        for i, block in enumerate(self.blocks):
            h = block(h, rng, taps, f"speaker.post_in.{i}")
        if self.arch.speaker_encoder_in:
            # Normalizing right before the pooling forces the pooled vector
            # to (numerically) zero: the channel means are what pooling reads.
            h = layers.instance_norm(h, self.arch.eps)
        pooled = layers.avg_pool_over_time(h)
        if taps is not None:
            taps["speaker.pooled"] = pooled
        h = layers.dropout(layers.activation(self.fc1(pooled)),
                           self.arch.dropout_rate, rng, self.training)
        return self.fc2(h)


class ContentEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        # Linear bank so the first instance norm sees raw convolution output:
        # per-mel-bin input shifts arrive as time-constant channel offsets and
        # are removed exactly (so the bank bias would be cancelled too).
        self.bank = layers.ConvBank(arch.n_mels, arch.bank_channels, arch.convbank_k,
                                    act="linear", bias=not arch.content_encoder_in)
        self.proj = layers.Conv1d(arch.convbank_k * arch.bank_channels, arch.enc_channels, 1)
        self.blocks = nn.ModuleList([
            layers.ConvBlock(arch.enc_channels, arch.enc_channels, 5,
                             stride=2 if i < arch.n_up_stages else 1,
                             use_in=arch.content_encoder_in,
                             dropout_rate=arch.dropout_rate, eps=arch.eps)
            for i in range(arch.n_enc_blocks)])
        self.out = layers.Conv1d(arch.enc_channels, arch.content_channels, 1)

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None,
                taps: dict | None = None) -> torch.Tensor:
        if x.shape[-1] % self.arch.downsample_factor != 0:
            raise SizeError(
                f"frame count {x.shape[-1]} not divisible by downsample factor "
                f"{self.arch.downsample_factor}")
        h = self.bank(x)
        if self.arch.content_encoder_in:
            h = layers.instance_norm(h, self.arch.eps)
            if taps is not None:
                taps["content.post_in.0"] = h
        h = layers.activation(h)
        h = layers.dropout(layers.activation(self.proj(h)),
                           self.arch.dropout_rate, rng, self.training)
        for i, block in enumerate(self.blocks):
            h = block(h, rng, taps, f"content.post_in.{i + 1}")
        return self.out(h)


class Decoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.in_proj = layers.Conv1d(arch.content_channels, arch.enc_channels, 1,
                                     bias=False)
        self.res_blocks = nn.ModuleList(
            [layers.ResidualDense(arch.speaker_dim, arch.dropout_rate)
             for _ in range(arch.n_res_blocks)])
        # The last n_up_stages stages double channels and pixel-shuffle x2.
        self.upsample = [i >= arch.n_dec_blocks - arch.n_up_stages
                         for i in range(arch.n_dec_blocks)]
        convs, affines = [], []
        for up in self.upsample:
            out_ch = arch.enc_channels * (2 if up else 1)
            convs.append(layers.Conv1d(arch.enc_channels, out_ch, 5, bias=False))
            affines.append(nn.Linear(arch.speaker_dim, 2 * out_ch))
        self.convs = nn.ModuleList(convs)
        self.affines = nn.ModuleList(affines)
        self.out = layers.Conv1d(arch.enc_channels, arch.n_mels, 1)

    def forward(self, z_s: torch.Tensor, z_c: torch.Tensor,
                rng: torch.Generator | None = None,
                taps: dict | None = None) -> torch.Tensor:
        if z_c.shape[-1] < 1:
            raise SizeError("content code has no time steps")
        s = z_s
        for block in self.res_blocks:
            s = block(s, rng)
        h = self.in_proj(z_c)
        for i, (conv, affine) in enumerate(zip(self.convs, self.affines)):
            ab = affine(s)
            out_ch = conv.weight.shape[0]
            gamma, beta = ab[..., :out_ch], ab[..., out_ch:]
            h = conv(h)
            if taps is not None:
                taps[f"decoder.pre_adain.{i}"] = h
                taps[f"decoder.gamma.{i}"] = gamma
                taps[f"decoder.beta.{i}"] = beta
            h = layers.adaptive_instance_norm(h, gamma, beta, self.arch.eps)
            if taps is not None:
                taps[f"decoder.post_adain.{i}"] = h
            h = layers.dropout(layers.activation(h), self.arch.dropout_rate,
                               rng, self.training)
            if self.upsample[i]:
                h = layers.pixel_shuffle_1d(h, 2)
        return self.out(h)


class VoiceConverter(nn.Module):
    """Container for the three networks with a shared ArchConfig."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.speaker_encoder = SpeakerEncoder(arch)
        self.content_encoder = ContentEncoder(arch)
        self.decoder = Decoder(arch)

    def autoencode(self, x: torch.Tensor, rng: torch.Generator | None = None,
                   noise: torch.Tensor | None = None):
        """Full reconstruction pass; returns (x_hat, z_c_mean).

        noise, when given, is added to the content mean (the unit-variance
        posterior sample); inference passes None and uses the mean.
        """
        z_s = self.speaker_encoder(x, rng)
        z_c_mean = self.content_encoder(x, rng)
        z_c = z_c_mean if noise is None else z_c_mean + noise
        return self.decoder(z_s, z_c, rng), z_c_mean

    def set_dropout_rate(self, rate: float) -> None:
        for mod in self.modules():
            if hasattr(mod, "dropout_rate"):
                mod.dropout_rate = rate
        self.arch = ArchConfig.from_dict({**self.arch.to_dict(), "dropout_rate": rate})
        self.speaker_encoder.arch = self.arch
        self.content_encoder.arch = self.arch
        self.decoder.arch = self.arch


def sample_content(z_c_mean: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Unit-variance Gaussian sample around the content mean."""
    noise = torch.randn(z_c_mean.shape, generator=rng, dtype=z_c_mean.dtype,
                        device=z_c_mean.device)
    return z_c_mean + noise


def init_params(arch: ArchConfig, seed: int) -> VoiceConverter:
    """Fan-in-scaled uniform init, deterministic given seed.

    Biases start at zero except the gamma half of each decoder affine head,
    which starts at one so adaptive instance norm begins as a plain
    normalization.
    """
    model = VoiceConverter(arch)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim == 1:
                p.zero_()
            else:
                fan_in = p.shape[1] * (p.shape[2] if p.ndim == 3 else 1)
                bound = math.sqrt(1.0 / fan_in)
                p.uniform_(-bound, bound, generator=g)
        for affine in model.decoder.affines:
            out_ch = affine.out_features // 2
            affine.bias[:out_ch] = 1.0
    return model


# --- Mel <-> tensor plumbing ---------------------------------------------

def mel_to_tensor(mel: np.ndarray) -> torch.Tensor:
    """(frames, n_mels) numpy -> (1, n_mels, frames) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(mel.T[None])).float()


def tensor_to_mel(t: torch.Tensor) -> np.ndarray:
    """(1, n_mels, frames) tensor -> (frames, n_mels) float32 numpy."""
    return t.detach().squeeze(0).numpy().T.copy()


def speaker_encode(mel: np.ndarray, model: VoiceConverter) -> np.ndarray:
    """Speaker embedding of a (frames, n_mels) mel; eval mode, any length."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.speaker_encoder(mel_to_tensor(mel))
    model.train(was_training)
    return z.squeeze(0).numpy().copy()


def content_encode(mel: np.ndarray, model: VoiceConverter) -> np.ndarray:
    """Content mean of a (frames, n_mels) mel as (channels, frames/factor)."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.content_encoder(mel_to_tensor(mel))
    model.train(was_training)
    return z.squeeze(0).numpy().copy()


def decode(z_s: np.ndarray, z_c: np.ndarray, model: VoiceConverter) -> np.ndarray:
    """Decode numpy codes back to a (frames, n_mels) mel; eval mode."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.decoder(torch.from_numpy(z_s).float().unsqueeze(0),
                            torch.from_numpy(z_c).float().unsqueeze(0))
    model.train(was_training)
    return tensor_to_mel(out)


# --- Checkpoints ----------------------------------------------------------

@dataclass
class CheckpointBundle:
    model: VoiceConverter
    arch: ArchConfig
    dsp_config: DspConfig
    norm_stats: NormStats
    meta: dict
    extra_tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _to_numpy(name: str, t: torch.Tensor) -> tuple[str, np.ndarray]:
    arr = t.detach().cpu().numpy()
    for dtype_name, (_, np_dtype) in _DTYPES.items():
        if arr.dtype == np.dtype(np_dtype):
            return dtype_name, np.ascontiguousarray(arr.astype(np_dtype))
    raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")


def save_checkpoint(path, model: VoiceConverter, dsp_config: DspConfig,
                    norm_stats: NormStats, meta: dict | None = None,
                    extra_tensors: dict[str, torch.Tensor] | None = None) -> None:
    """Versioned binary container: magic, version, JSON header, raw blobs.

    The header carries the architecture, the full DSP configuration and its
    fingerprint, and user metadata; tensors are little-endian, row-major,
    stored sorted by name so identical state always produces identical bytes.
    """
    tensors: dict[str, torch.Tensor] = {
        f"model.{k}": v for k, v in model.state_dict().items()}
    tensors["norm.mean"] = torch.from_numpy(np.asarray(norm_stats.mean, dtype=np.float32))
    tensors["norm.std"] = torch.from_numpy(np.asarray(norm_stats.std, dtype=np.float32))
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v

    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        dtype_name, arr = _to_numpy(name, tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dtype_name,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "dsp_config": dsp_config.to_dict(),
        "dsp_fingerprint": dsp_config.fingerprint(),
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> CheckpointBundle:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    start = len(CHECKPOINT_MAGIC) + 12
    try:
        header = json.loads(data[start:start + header_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header in {path}") from exc
    blob_start = start + header_len

    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        _, np_dtype = _DTYPES[entry["dtype"]]
        lo = blob_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated checkpoint {path} (tensor {entry['name']})")
        arr = np.frombuffer(data[lo:hi], dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()

    try:
        arch = ArchConfig.from_dict(header["arch"])
        dsp_config = DspConfig.from_dict(header["dsp_config"])
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"checkpoint {path} has an incompatible config block: {exc}") from exc
    model = VoiceConverter(arch)
    state = {k[len("model."):]: torch.from_numpy(v)
             for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its architecture: {exc}") from exc
    model.eval()
    if "norm.mean" not in tensors or "norm.std" not in tensors:
        raise CheckpointError(f"checkpoint {path} is missing normalization stats")
    norm = NormStats(mean=tensors["norm.mean"], std=tensors["norm.std"])
    extra = {k: v for k, v in tensors.items()
             if not k.startswith("model.") and not k.startswith("norm.")}
    return CheckpointBundle(model=model, arch=arch, dsp_config=dsp_config,
                            norm_stats=norm, meta=header["meta"], extra_tensors=extra)
