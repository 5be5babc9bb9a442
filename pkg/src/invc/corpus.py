"""Corpus ingestion: manifests, speaker-disjoint splits, preprocessing cache,
and per-mel-bin normalization statistics.

Speaker labels live only in manifests; they are consumed by split
construction and the evaluation probes, never by training.
"""

from __future__ import annotations

import json
import logging
import random
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker_id: str
    audio_path: str
    duration_s: float


@dataclass
class Manifest:
    records: list[ManifestRecord]

    def __post_init__(self) -> None:
        ids = [r.utterance_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate utterance_ids in manifest")
        if any(not r.speaker_id for r in self.records):
            raise ConfigError("empty speaker_id in manifest")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def speakers(self) -> set[str]:
        return {r.speaker_id for r in self.records}

    def by_speaker(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.speaker_id, []).append(r)
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(f"{r.utterance_id}\t{r.speaker_id}\t{r.audio_path}\t{r.duration_s:.6f}\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        records = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise IngestionError(f"{path}:{line_no}: expected 4 tab-separated fields")
                records.append(ManifestRecord(parts[0], parts[1], parts[2], float(parts[3])))
        return cls(records)


def _wav_duration(path: Path) -> float:
    try:
        with wave.open(str(path), "rb") as f:
            return f.getnframes() / float(f.getframerate())
    except (wave.Error, EOFError, OSError):
        return 0.0  # undecodable; preprocessing will skip it with a report entry


def build_manifest(root_dir, test_speaker_count: int, valid_fraction: float,
                   seed: int) -> dict[str, Manifest]:
    """Scan a speaker-per-subdirectory corpus and split it.

    The test split takes every utterance of test_speaker_count randomly
    chosen speakers; remaining utterances are split at utterance level into
    train (1 - valid_fraction) and valid. Deterministic given seed.
    """
    root = Path(root_dir)
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    records: list[ManifestRecord] = []
    for spk in speakers:
        for wav_path in sorted((root / spk).glob("*.wav")):
            records.append(ManifestRecord(
                utterance_id=f"{spk}/{wav_path.stem}",
                speaker_id=spk,
                audio_path=str(wav_path),
                duration_s=_wav_duration(wav_path),
            ))
    if not records:
        raise IngestionError(f"no speaker subdirectories with WAV files under {root}")
    if not 0 <= valid_fraction < 1:
        raise ConfigError(f"valid_fraction must be in [0, 1), got {valid_fraction}")
    if test_speaker_count >= len(speakers):
        raise ConfigError(
            f"test_speaker_count={test_speaker_count} but corpus has only "
            f"{len(speakers)} speakers")

    rng = random.Random(seed)
    test_speakers = set(rng.sample(speakers, test_speaker_count))
    test_records = [r for r in records if r.speaker_id in test_speakers]
    rest = [r for r in records if r.speaker_id not in test_speakers]
    rest_shuffled = rest[:]
    rng.shuffle(rest_shuffled)
    n_valid = int(round(valid_fraction * len(rest_shuffled)))
    valid_records = sorted(rest_shuffled[:n_valid], key=lambda r: r.utterance_id)
    train_records = sorted(rest_shuffled[n_valid:], key=lambda r: r.utterance_id)
    return {
        "train": Manifest(train_records),
        "valid": Manifest(valid_records),
        "test": Manifest(test_records),
    }


class FeatureCache:
    """Directory of per-utterance log-mel matrices (.npy, float32, frames x n_mels)
    plus an index file and the fingerprint of the DspConfig that built it."""

    INDEX_NAME = "index.tsv"
    META_NAME = "meta.json"
    SKIP_NAME = "skip_report.tsv"

    def __init__(self, directory, index: dict[str, tuple[str, int, int]],
                 dsp_config: dsp.DspConfig):
        self.directory = Path(directory)
        self.index = index  # utterance_id -> (filename, frames, n_mels)
        self.dsp_config = dsp_config
        self.fingerprint = dsp_config.fingerprint()

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self.index

    @property
    def utterance_ids(self) -> list[str]:
        return sorted(self.index)

    def frames(self, utterance_id: str) -> int:
        return self.index[utterance_id][1]

    def load(self, utterance_id: str) -> np.ndarray:
        filename, frames, n_mels = self.index[utterance_id]
        m = np.load(self.directory / filename)
        if m.shape != (frames, n_mels):
            raise IngestionError(
                f"cache entry {utterance_id} has shape {m.shape}, index says {(frames, n_mels)}")
        return m

    def _write_meta(self) -> None:
        meta = {"dsp_config": self.dsp_config.to_dict(), "fingerprint": self.fingerprint}
        (self.directory / self.META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=1))
        with open(self.directory / self.INDEX_NAME, "w", encoding="utf-8") as f:
            for utt in sorted(self.index):
                filename, frames, n_mels = self.index[utt]
                f.write(f"{utt}\t{filename}\t{frames}\t{n_mels}\n")

    @classmethod
    def open(cls, directory) -> "FeatureCache":
        directory = Path(directory)
        meta_path = directory / cls.META_NAME
        if not meta_path.exists():
            raise IngestionError(f"{directory} is not a feature cache (missing meta)")
        meta = json.loads(meta_path.read_text())
        cfg = dsp.DspConfig.from_dict(meta["dsp_config"])
        if cfg.fingerprint() != meta["fingerprint"]:
            raise IngestionError(f"cache fingerprint mismatch in {directory}")
        index: dict[str, tuple[str, int, int]] = {}
        with open(directory / cls.INDEX_NAME, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                utt, filename, frames, n_mels = line.split("\t")
                index[utt] = (filename, int(frames), int(n_mels))
        return cls(directory, index, cfg)


def _utterance_filename(utterance_id: str) -> str:
    return utterance_id.replace("/", "__") + ".npy"


def _preprocess_one(record: ManifestRecord, cfg: dsp.DspConfig,
                    fb: dsp.MelFilterbank) -> tuple[np.ndarray | None, str | None]:
    """Returns (log_mel, None) or (None, skip_reason)."""
    try:
        w, rate = dsp.read_wav(record.audio_path)
    except IngestionError as exc:
        return None, f"undecodable: {exc}"
    w = dsp.trim_silence(w, cfg.trim_db)
    if len(w) == 0:
        return None, "all-silent after trimming"
    w = dsp.peak_normalize(w, cfg.volume_norm_dbfs)
    w = dsp.resample(w, rate, cfg.sample_rate_hz)
    if len(w) < cfg.win_length:
        return None, f"too short: {len(w)} samples < window {cfg.win_length}"
    return dsp.wav_to_log_mel(w, cfg, fb).astype(np.float32), None


def preprocess_corpus(manifest: Manifest, dsp_config: dsp.DspConfig,
                      min_frames: int, cache_dir, workers: int = 0) -> FeatureCache:
    """Trim, volume-normalize, resample, and convert every utterance to log mel.

    Utterances shorter than min_frames after preprocessing are dropped and
    recorded in the cache's skip report, as are undecodable files. Raises
    IngestionError if nothing survives.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    fb = dsp.build_mel_filterbank(dsp_config)
    skipped: list[tuple[str, str]] = []
    index: dict[str, tuple[str, int, int]] = {}

    def run(record):
        return record, _preprocess_one(record, dsp_config, fb)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, manifest.records))
    else:
        results = [run(r) for r in manifest.records]

    for record, (mel, reason) in results:
        if mel is None:
            skipped.append((record.utterance_id, reason))
            log.warning("skipping %s: %s", record.utterance_id, reason)
            continue
        if mel.shape[0] < min_frames:
            skipped.append((record.utterance_id,
                            f"only {mel.shape[0]} frames < min_frames {min_frames}"))
            continue
        filename = _utterance_filename(record.utterance_id)
        np.save(cache_dir / filename, mel)
        index[record.utterance_id] = (filename, mel.shape[0], mel.shape[1])

    with open(cache_dir / FeatureCache.SKIP_NAME, "w", encoding="utf-8") as f:
        for utt, reason in skipped:
            f.write(f"{utt}\t{reason}\n")
    if not index:
        raise IngestionError(
            f"preprocessing produced no usable utterances ({len(skipped)} skipped)")
    cache = FeatureCache(cache_dir, index, dsp_config)
    cache._write_meta()
    return cache


@dataclass
class NormStats:
    """Per-mel-bin mean/std over all training frames; std floored at 1e-8."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, m: np.ndarray) -> np.ndarray:
        return (m - self.mean) / self.std

    def denormalize(self, m: np.ndarray) -> np.ndarray:
        return m * self.std + self.mean

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path) -> "NormStats":
        with np.load(path) as z:
            return cls(mean=z["mean"].copy(), std=z["std"].copy())


def compute_norm_stats(cache: FeatureCache, train_manifest: Manifest) -> NormStats:
    """Single pass over the cached training utterances; float64 accumulation."""
    present = [r.utterance_id for r in train_manifest.records if r.utterance_id in cache]
    if not present:
        raise IngestionError("no training utterances present in the cache")
    n_mels = cache.index[present[0]][2]
    total = np.zeros(n_mels)
    total_sq = np.zeros(n_mels)
    count = 0
    for utt in present:
        m = cache.load(utt).astype(np.float64)
        total += m.sum(axis=0)
        total_sq += (m ** 2).sum(axis=0)
        count += m.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    std = np.sqrt(var)
    flat = std < STD_FLOOR
    if np.any(flat):
        log.warning("%d mel bins have (near) zero variance; std floored", int(flat.sum()))
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean.astype(np.float32), std=std.astype(np.float32))
