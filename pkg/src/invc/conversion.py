"""One-shot voice conversion: source utterance + target utterance +
checkpoint -> converted waveform.

The speaker embedding comes from the target utterance, the content code
from the source; the decoder combines them and the DSP chain renders audio.
No speaker labels are involved, and the whole pipeline is deterministic
given (request, checkpoint): inference uses the content mean, dropout is
off, and Griffin-Lim starts from zero phase.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .errors import IngestionError, SizeError
from .model import CheckpointBundle, load_checkpoint, mel_to_tensor, tensor_to_mel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConversionRequest:
    source_audio: str
    target_audio: str
    checkpoint: str
    output: str
    dump_dir: str | None = None


def crop_to_factor(mel: np.ndarray, factor: int) -> np.ndarray:
    """Drop tail frames so the frame count divides the downsampling factor."""
    frames = (mel.shape[0] // factor) * factor
    if frames < factor:
        raise SizeError(
            f"utterance has {mel.shape[0]} frames; need at least {factor}")
    return mel[:frames]


def convert_mel(source_mel: np.ndarray, target_mel: np.ndarray,
                model) -> np.ndarray:
    """decode(speaker(target), content(source)) on normalized mels.

    The source is cropped down to a multiple of the downsampling factor;
    output frame count equals the cropped source frame count.
    """
    factor = model.arch.downsample_factor
    source_mel = crop_to_factor(source_mel, factor)
    if target_mel.shape[0] < 1:
        raise SizeError("target utterance has no frames")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z_s = model.speaker_encoder(mel_to_tensor(target_mel))
        z_c = model.content_encoder(mel_to_tensor(source_mel))
        out = model.decoder(z_s, z_c)
    model.train(was_training)
    return tensor_to_mel(out)


def _load_normalized_mel(path, bundle: CheckpointBundle,
                         fb: dsp.MelFilterbank) -> np.ndarray:
    cfg = bundle.dsp_config
    w, rate = dsp.read_wav(path)
    w = dsp.trim_silence(w, cfg.trim_db)
    if len(w) == 0:
        raise IngestionError(f"{path} is entirely silent")
    w = dsp.peak_normalize(w, cfg.volume_norm_dbfs)
    w = dsp.resample(w, rate, cfg.sample_rate_hz)
    if len(w) < cfg.win_length:
        raise SizeError(f"{path} too short after trimming: {len(w)} samples")
    mel = dsp.wav_to_log_mel(w, cfg, fb)
    return bundle.norm_stats.normalize(mel).astype(np.float32)


def convert(req: ConversionRequest) -> Path:
    """Run the full conversion chain and write a 16-bit WAV.

    The output file is written atomically (temp file + rename) so a failing
    run leaves nothing behind. With dump_dir set, the source, target, and
    converted mel matrices are saved as .npy for inspection.
    """
    for p in (req.source_audio, req.target_audio, req.checkpoint):
        if not Path(p).exists():
            raise IngestionError(f"input file does not exist: {p}")
    bundle = load_checkpoint(req.checkpoint)
    cfg = bundle.dsp_config
    fb = dsp.build_mel_filterbank(cfg)

    source_mel = _load_normalized_mel(req.source_audio, bundle, fb)
    target_mel = _load_normalized_mel(req.target_audio, bundle, fb)
    converted = convert_mel(source_mel, target_mel, bundle.model)

    log_mel = bundle.norm_stats.denormalize(converted.astype(np.float64))
    linear = dsp.mel_to_linear_approx(log_mel, fb)
    wave = dsp.griffin_lim(linear, cfg)
    wave = dsp.peak_normalize(wave, cfg.volume_norm_dbfs)

    if req.dump_dir is not None:
        dump = Path(req.dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        np.save(dump / "source_mel.npy", source_mel)
        np.save(dump / "target_mel.npy", target_mel)
        np.save(dump / "converted_mel.npy", converted)

    out_path = Path(req.output)
    tmp_path = out_path.with_name(out_path.name + ".part")
    dsp.write_wav(tmp_path, wave, cfg.sample_rate_hz)
    tmp_path.replace(out_path)
    log.info("wrote %s (%d frames -> %d samples)", out_path, converted.shape[0], len(wave))
    return out_path
