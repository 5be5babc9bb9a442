"""Synthetic timbre corpus for desk-scale experiments.

Each toy speaker is a fixed spectral envelope (per-band gain, an additive
offset in the log-mel domain) plus a fixed slow amplitude-modulation depth
(a per-band scale of the log-mel fluctuations). Content is a random note
sequence with pitch drawn from a distribution shared by all speakers, so
speaker identity lives almost entirely in channel statistics. That makes
the corpus a sharp instrument for the disentanglement evaluations: channel
statistics are exactly what instance normalization removes and what the
decoder's adaptive normalization re-imposes.

Run `python -m invc.toyset OUT_DIR` to materialize one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp

F0_RANGE_HZ = (90.0, 280.0)
NOTE_DURATION_S = (0.12, 0.30)
HARMONIC_ROLLOFF = 0.8
NOISE_FLOOR = 1e-4
RAMP_S = 0.012


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    envelope_coefs: tuple[float, ...]  # cosine-series log-gain over frequency
    am_depth: float                    # std of the slow log-amplitude wander
    gender: str                        # cosmetic tag for plots


def toy_dsp_config(**overrides) -> dsp.DspConfig:
    """Small analysis front end matched to the 8 kHz toy corpus."""
    base = dict(sample_rate_hz=8000, win_length_ms=32.0, hop_length_ms=8.0,
                fft_size=256, n_mels=64)
    base.update(overrides)
    return dsp.DspConfig(**base)


def _make_speakers(n_speakers: int, rng: np.random.Generator) -> list[ToySpeaker]:
    speakers = []
    for i in range(n_speakers):
        coefs = tuple(float(c) for c in rng.normal(0.0, 1.2, size=4))
        # Evenly spread modulation depths so spectral dynamics separate speakers.
        depth = 0.1 + 0.9 * (i / max(n_speakers - 1, 1))
        speakers.append(ToySpeaker(
            speaker_id=f"spk{i:02d}",
            envelope_coefs=coefs,
            am_depth=float(depth),
            gender="f" if i % 2 == 0 else "m",
        ))
    return speakers


def _envelope_gain(freqs_hz: np.ndarray, coefs: tuple[float, ...], fmax: float) -> np.ndarray:
    log_gain = np.zeros_like(freqs_hz)
    for j, a in enumerate(coefs, start=1):
        log_gain += a * np.cos(math.pi * j * freqs_hz / fmax)
    return np.exp(log_gain)


def _slow_wander(n_samples: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-std smooth noise (~25 Hz control rate) for amplitude modulation."""
    n_ctrl = max(int(n_samples / sample_rate * 25), 4)
    ctrl = rng.normal(size=n_ctrl + 4)
    kernel = np.ones(5) / 5.0
    ctrl = np.convolve(ctrl, kernel, mode="valid")
    ctrl = (ctrl - ctrl.mean()) / max(ctrl.std(), 1e-6)
    t = np.linspace(0, len(ctrl) - 1, n_samples)
    return np.interp(t, np.arange(len(ctrl)), ctrl)


def synthesize_utterance(speaker: ToySpeaker, duration_s: float, sample_rate: int,
                         rng: np.random.Generator) -> np.ndarray:
    n_total = int(duration_s * sample_rate)
    fmax = sample_rate / 2.0
    out = np.zeros(n_total)
    pos = 0
    ramp_n = int(RAMP_S * sample_rate)
    while pos < n_total:
        f0 = math.exp(rng.uniform(math.log(F0_RANGE_HZ[0]), math.log(F0_RANGE_HZ[1])))
        note_n = min(int(rng.uniform(*NOTE_DURATION_S) * sample_rate), n_total - pos)
        if note_n <= 2 * ramp_n:
            break
        t = np.arange(note_n) / sample_rate
        glide = rng.uniform(-0.03, 0.03)  # small shared-distribution pitch drift
        inst_f0 = f0 * (1.0 + glide * t / max(duration_s, 1e-6))
        note = np.zeros(note_n)
        n_harm = max(int(0.45 * sample_rate / f0), 1)
        phase_base = rng.uniform(0, 2 * math.pi)
        for h in range(1, n_harm + 1):
            fh = inst_f0 * h
            amp = (1.0 / h ** HARMONIC_ROLLOFF)
            amp = amp * _envelope_gain(np.array([f0 * h]), speaker.envelope_coefs, fmax)[0]
            phase = 2 * math.pi * np.cumsum(fh) / sample_rate + phase_base * h
            note += amp * np.sin(phase)
        ramp = np.ones(note_n)
        ramp[:ramp_n] = 0.5 * (1 - np.cos(math.pi * np.arange(ramp_n) / ramp_n))
        ramp[-ramp_n:] = ramp[:ramp_n][::-1]
        out[pos:pos + note_n] += note * ramp
        pos += note_n
    am = np.exp(speaker.am_depth * _slow_wander(n_total, sample_rate, rng))
    out = out * am + NOISE_FLOOR * rng.normal(size=n_total)
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def make_toy_corpus(out_dir, n_speakers: int = 6, utterances_per_speaker: int = 55,
                    seed: int = 0, sample_rate: int = 8000,
                    duration_range: tuple[float, float] = (1.7, 2.2)) -> dict:
    """Write a speaker-per-subdirectory WAV corpus; deterministic given seed.

    Returns {"root": Path, "speakers": [ToySpeaker], "gender": {id: tag}}.
    """
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    speakers = _make_speakers(n_speakers, rng)
    for speaker in speakers:
        spk_dir = root / speaker.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for j in range(utterances_per_speaker):
            utt_rng = np.random.default_rng(
                (seed, int(speaker.speaker_id[3:]), j))
            duration = utt_rng.uniform(*duration_range)
            w = synthesize_utterance(speaker, duration, sample_rate, utt_rng)
            dsp.write_wav(spk_dir / f"utt{j:03d}.wav", w, sample_rate)
    return {"root": root, "speakers": speakers,
            "gender": {s.speaker_id: s.gender for s in speakers}}


def main(argv=None) -> int:
    import argparse
    parser = argparse.ArgumentParser(description="Generate the synthetic toy corpus.")
    parser.add_argument("out_dir")
    parser.add_argument("--speakers", type=int, default=6)
    parser.add_argument("--utterances", type=int, default=55)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    info = make_toy_corpus(args.out_dir, args.speakers, args.utterances, args.seed)
    print(f"wrote {args.speakers} speakers x {args.utterances} utterances under {info['root']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
