"""Waveform <-> spectrogram transforms.

STFT with left-aligned (non-centered) framing, triangular mel filterbank
with a precomputed pseudo-inverse, approximate mel inversion, and
Griffin-Lim phase reconstruction.  All operations are pure functions;
spectrograms are (frames, bins) float arrays.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import ConfigError, IngestionError, NumericError, SizeError


@dataclass(frozen=True)
class DspConfig:
    """Front-end analysis/synthesis parameters.

    Defaults: 24 kHz audio, 50 ms Hann window, 12.5 ms hop, 2048-point FFT
    (window zero-padded up to the FFT size), 512 mel bins spanning
    0..Nyquist, log compression floored at 1e-5, 100 Griffin-Lim
    iterations.
    """

    sample_rate_hz: int = 24000
    win_length_ms: float = 50.0
    hop_length_ms: float = 12.5
    fft_size: int = 2048
    n_mels: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    log_floor: float = 1e-5
    griffin_lim_iters: int = 100
    # Preprocessing knobs (used by the corpus pipeline).
    trim_db: float = 40.0           # trim leading/trailing audio this far below peak
    volume_norm_dbfs: float = -3.0  # peak-normalize target

    def __post_init__(self) -> None:
        if self.fmax_hz is None:
            object.__setattr__(self, "fmax_hz", self.sample_rate_hz / 2.0)
        self.validate()

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.win_length_ms <= 0 or self.hop_length_ms <= 0:
            raise ConfigError("window and hop lengths must be positive")
        if self.hop_length > self.win_length:
            raise ConfigError(
                f"hop ({self.hop_length} samples) must not exceed window ({self.win_length} samples)")
        if self.fft_size < self.win_length:
            raise ConfigError(
                f"fft_size {self.fft_size} smaller than window length {self.win_length} samples")
        if not 0 < self.n_mels < self.fft_size // 2 + 1:
            raise ConfigError(f"n_mels must be in (0, fft_size/2 + 1), got {self.n_mels}")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2.0 + 1e-9:
            raise ConfigError(f"invalid mel band [{self.fmin_hz}, {self.fmax_hz}]")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.griffin_lim_iters < 1:
            raise ConfigError("griffin_lim_iters must be >= 1")

    @property
    def win_length(self) -> int:
        """Window length in samples."""
        return int(round(self.win_length_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_length(self) -> int:
        """Hop length in samples."""
        return int(round(self.hop_length_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_fft_bins(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DspConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        """Stable hash of every field; caches and checkpoints carry it."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def num_frames(n_samples: int, cfg: DspConfig) -> int:
    """Frame count of a left-aligned framing: floor((n - win)/hop) + 1."""
    if n_samples < cfg.win_length:
        raise SizeError(
            f"waveform of {n_samples} samples shorter than window ({cfg.win_length})")
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def _hann(win_length: int) -> np.ndarray:
    # Periodic Hann; with hop = win/4 this tiles to a constant overlap sum.
    n = np.arange(win_length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / win_length))


def _frame(w: np.ndarray, cfg: DspConfig) -> np.ndarray:
    frames = num_frames(len(w), cfg)
    hop, win = cfg.hop_length, cfg.win_length
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    return w[idx]


def _stft_complex(w: np.ndarray, cfg: DspConfig) -> np.ndarray:
    frames = _frame(np.asarray(w, dtype=np.float64), cfg)
    return np.fft.rfft(frames * _hann(cfg.win_length), n=cfg.fft_size, axis=1)


def stft_magnitude(w: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Magnitude spectrogram, shape (frames, fft_size//2 + 1)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise SizeError(f"expected mono waveform, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("waveform contains non-finite samples")
    return np.abs(_stft_complex(w, cfg))


def istft(spec: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Least-squares inverse STFT (windowed overlap-add, window-square normalized).

    Output length is (frames - 1) * hop + win.
    """
    spec = np.asarray(spec)
    frames = spec.shape[0]
    hop, win = cfg.hop_length, cfg.win_length
    window = _hann(win)
    out_len = (frames - 1) * hop + win
    acc = np.zeros(out_len)
    wsq = np.zeros(out_len)
    chunks = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :win] * window
    for t in range(frames):
        acc[t * hop : t * hop + win] += chunks[t]
        wsq[t * hop : t * hop + win] += window ** 2
    nz = wsq > 1e-11
    acc[nz] /= wsq[nz]
    return acc


def mel_from_hz(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_from_mel(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_bin_averages(left: float, center: float, right: float,
                           bin_edges: np.ndarray) -> np.ndarray:
    """Average of the (left, center, right) triangle over each FFT bin interval.

    Integrating instead of point-sampling keeps every filter non-empty even
    when triangles are narrower than one FFT bin (512 mels over a 2048-point
    FFT needs this at low frequencies).
    """

    def ramp_integral(lo: float, hi: float, a: float, b: float, rising: bool) -> float:
        # Integral over [lo, hi] of the ramp that is 0 at a and 1 at b (rising)
        # or 1 at a and 0 at b (falling), restricted to [min(a,b), max(a,b)].
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
        if hi <= lo:
            return 0.0
        span = b - a if rising else a - b
        if abs(span) < 1e-12:
            return 0.0
        anchor = a if rising else b
        return ((hi - anchor) ** 2 - (lo - anchor) ** 2) / (2.0 * span)

    lo_edges, hi_edges = bin_edges[:-1], bin_edges[1:]
    out = np.zeros(len(lo_edges))
    for k in range(len(lo_edges)):
        lo, hi = lo_edges[k], hi_edges[k]
        if hi <= left or lo >= right or hi <= lo:
            continue
        area = ramp_integral(lo, hi, left, center, rising=True)
        area += ramp_integral(lo, hi, center, right, rising=False)
        out[k] = area / (hi - lo)
    return out


@dataclass
class MelFilterbank:
    """Triangular mel filterbank plus its Moore-Penrose pseudo-inverse."""

    weights: np.ndarray       # (n_mels, n_fft_bins)
    pseudo_inverse: np.ndarray  # (n_fft_bins, n_mels)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def build_mel_filterbank(cfg: DspConfig) -> MelFilterbank:
    """Triangular filters on the mel scale spanning [fmin, fmax]."""
    n_bins = cfg.n_fft_bins
    bin_width = cfg.sample_rate_hz / cfg.fft_size
    # Bin k is centered at k * bin_width; integrate over its covering interval.
    centers = np.arange(n_bins) * bin_width
    edges = np.concatenate(([0.0], (centers[:-1] + centers[1:]) / 2.0,
                            [cfg.sample_rate_hz / 2.0]))
    mel_pts = np.linspace(mel_from_hz(cfg.fmin_hz), mel_from_hz(cfg.fmax_hz),
                          cfg.n_mels + 2)
    hz_pts = np.asarray(hz_from_mel(mel_pts))
    weights = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        weights[i] = _triangle_bin_averages(hz_pts[i], hz_pts[i + 1], hz_pts[i + 2], edges)
    empty = ~np.any(weights > 0, axis=1)
    if np.any(empty):
        raise ConfigError(
            f"{int(empty.sum())} mel filters are empty; n_mels too large for the FFT resolution")
    # Dense mel grids make near-duplicate rows; cutting the noise-level
    # singular values keeps the pseudo-inverse a clean least-squares solve.
    return MelFilterbank(weights=weights,
                         pseudo_inverse=np.linalg.pinv(weights, rcond=1e-6))


def linear_to_mel(spec: np.ndarray, fb: MelFilterbank, log_floor: float) -> np.ndarray:
    """Log mel spectrogram: log(max(fb @ spec^T, floor)), back to (frames, n_mels)."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != fb.weights.shape[1]:
        raise SizeError(
            f"spectrogram shape {spec.shape} does not match filterbank "
            f"({fb.weights.shape[1]} bins)")
    mel = fb.weights @ spec.T
    return np.log(np.maximum(mel, log_floor)).T


def mel_to_linear_approx(log_mel: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Approximate inverse of linear_to_mel via the pseudo-inverse; clamped at 0."""
    log_mel = np.asarray(log_mel)
    if log_mel.ndim != 2 or log_mel.shape[1] != fb.n_mels:
        raise SizeError(f"log-mel shape {log_mel.shape} does not match {fb.n_mels} mels")
    linear = fb.pseudo_inverse @ np.exp(log_mel).T
    return np.maximum(linear, 0.0).T


def griffin_lim(spec: np.ndarray, cfg: DspConfig, *, init_phase: str = "zeros",
                seed: int = 0, track_convergence: bool = False):
    """Waveform from a magnitude spectrogram via iterative phase reconstruction.

    Runs exactly cfg.griffin_lim_iters magnitude-projection iterations.
    init_phase is "zeros" (deterministic default) or "random" (seeded).
    With track_convergence, also returns the per-iteration spectral
    convergence error ||  |STFT(w)| - spec || / ||spec||.
    """
    spec = np.asarray(spec, dtype=np.float64)
    if not np.all(np.isfinite(spec)):
        raise NumericError("magnitude spectrogram contains non-finite values")
    if np.any(spec < 0):
        raise NumericError("magnitude spectrogram must be nonnegative")
    if init_phase == "zeros":
        phase = np.zeros_like(spec)
    elif init_phase == "random":
        rng = np.random.default_rng(seed)
        phase = rng.uniform(-np.pi, np.pi, size=spec.shape)
    else:
        raise ConfigError(f"unknown init_phase {init_phase!r}")

    ref = np.linalg.norm(spec)
    errors = []
    current = spec * np.exp(1j * phase)
    for _ in range(cfg.griffin_lim_iters):
        w = istft(current, cfg)
        rebuilt = _stft_complex(w, cfg)
        if track_convergence:
            err = np.linalg.norm(np.abs(rebuilt) - spec) / ref if ref > 0 else 0.0
            errors.append(float(err))
        current = spec * np.exp(1j * np.angle(rebuilt))
    w = istft(current, cfg)
    if track_convergence:
        return w, errors
    return w


# --- WAV I/O ------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV file as float64 in [-1, 1]; stereo keeps the first channel."""
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise IngestionError(f"cannot read WAV file {path}: {exc}") from exc
    if sampwidth == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif sampwidth == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        as32 = (b[:, 0].astype(np.uint32) << 8 | b[:, 1].astype(np.uint32) << 16
                | b[:, 2].astype(np.uint32) << 24).astype(np.int32)
        data = as32.astype(np.float64) / 2147483648.0
    else:
        raise IngestionError(f"unsupported PCM sample width {sampwidth * 8} bits in {path}")
    if n_channels > 1:
        data = data[::n_channels]
    return data, rate


def write_wav(path, w: np.ndarray, sample_rate_hz: int) -> None:
    """Write a mono 16-bit PCM WAV file; samples are clipped to [-1, 1]."""
    w = np.clip(np.asarray(w, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(w * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate_hz)
        f.writeframes(pcm.tobytes())


# --- Preprocessing primitives -------------------------------------------

def trim_silence(w: np.ndarray, threshold_db: float) -> np.ndarray:
    """Strip leading/trailing samples more than threshold_db below the peak."""
    w = np.asarray(w)
    peak = np.max(np.abs(w)) if len(w) else 0.0
    if peak == 0.0:
        return w[:0]
    floor = peak * 10.0 ** (-threshold_db / 20.0)
    active = np.flatnonzero(np.abs(w) >= floor)
    return w[active[0] : active[-1] + 1]


def peak_normalize(w: np.ndarray, target_dbfs: float) -> np.ndarray:
    """Scale so the peak sits at target_dbfs (no-op on silence)."""
    w = np.asarray(w, dtype=np.float64)
    peak = np.max(np.abs(w)) if len(w) else 0.0
    if peak == 0.0:
        return w
    return w * (10.0 ** (target_dbfs / 20.0) / peak)


def resample(w: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Polyphase resampling to target_rate."""
    if orig_rate == target_rate:
        return np.asarray(w, dtype=np.float64)
    from scipy.signal import resample_poly
    from math import gcd
    g = gcd(orig_rate, target_rate)
    return resample_poly(np.asarray(w, dtype=np.float64), target_rate // g, orig_rate // g)


def wav_to_log_mel(w: np.ndarray, cfg: DspConfig, fb: MelFilterbank) -> np.ndarray:
    """STFT magnitude -> log mel, shape (frames, n_mels)."""
    return linear_to_mel(stft_magnitude(w, cfg), fb, cfg.log_floor)
