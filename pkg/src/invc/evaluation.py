"""Objective evaluations: speaker-identity probes on content codes, the
three-way normalization-placement ablation, speaker-embedding
classification with a 2-D projection, per-bin global variance, and plot
export.

The probe protocol (features, split, budget, seeding) is fixed across
ablation arms; only the voice-conversion model under test changes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import training
from .corpus import FeatureCache, Manifest
from .errors import ConfigError, IngestionError
from .model import ArchConfig, CheckpointBundle, load_checkpoint, mel_to_tensor

log = logging.getLogger(__name__)


class AblationSetting(str, Enum):
    CONTENT_WITH_IN = "content_with_in"
    CONTENT_WITHOUT_IN = "content_without_in"
    CONTENT_WITHOUT_IN_SPEAKER_WITH_IN = "content_without_in_speaker_with_in"


# Full-scale reference accuracies (109-speaker corpus, 200k iterations);
# desk-scale runs reproduce the ordering, not these values.
FULL_SCALE_PROBE_ACCURACY = {
    AblationSetting.CONTENT_WITH_IN: 0.375,
    AblationSetting.CONTENT_WITHOUT_IN: 0.658,
    AblationSetting.CONTENT_WITHOUT_IN_SPEAKER_WITH_IN: 0.746,
}
FULL_SCALE_SPEAKER_ACCURACY = {"seen": 0.9973, "unseen": 0.9998}


def apply_setting(arch: ArchConfig, setting: AblationSetting) -> ArchConfig:
    flags = {
        AblationSetting.CONTENT_WITH_IN: (True, False),
        AblationSetting.CONTENT_WITHOUT_IN: (False, False),
        AblationSetting.CONTENT_WITHOUT_IN_SPEAKER_WITH_IN: (False, True),
    }[setting]
    return ArchConfig.from_dict({**arch.to_dict(),
                                 "content_encoder_in": flags[0],
                                 "speaker_encoder_in": flags[1]})


@dataclass(frozen=True)
class ProbeConfig:
    hidden_layers: int = 5
    hidden_units: int = 1024
    activation: str = "relu"
    iters: int = 10000
    lr: float = 0.0005
    batch_size: int = 64
    seed: int = 0
    holdout_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ConfigError("probe sizes must be positive")
        if self.iters < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("invalid probe training budget")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in (0, 1)")


# --- Representation extraction --------------------------------------------

def _iter_segments(cache: FeatureCache, manifest: Manifest, segment_len: int,
                   stride: int | None = None):
    """Segments tiled from frame 0 (non-overlapping unless stride is smaller)."""
    stride = stride or segment_len
    for record in manifest.records:
        if record.utterance_id not in cache:
            continue
        mel = cache.load(record.utterance_id)
        for start in range(0, mel.shape[0] - segment_len + 1, stride):
            yield record, mel[start:start + segment_len]


def _check_fingerprint(cache: FeatureCache, bundle: CheckpointBundle) -> None:
    if cache.fingerprint != bundle.dsp_config.fingerprint():
        raise ConfigError("feature cache and checkpoint were built with "
                          "different DSP configurations")


def extract_content_reps(cache: FeatureCache, manifest: Manifest,
                         bundle: CheckpointBundle, segment_len: int = 128,
                         stride: int | None = None, frame_level: bool = False,
                         shuffle_labels: bool = False, seed: int = 0):
    """(features, labels, utterance_ids) from the content encoder.

    One vector per segment: the time-averaged content mean (frame_level
    instead emits one vector per downsampled time step). shuffle_labels
    permutes speaker labels for a chance-level control.
    """
    _check_fingerprint(cache, bundle)
    model = bundle.model
    model.eval()
    feats, labels, utts = [], [], []
    with torch.no_grad():
        for record, seg in _iter_segments(cache, manifest, segment_len, stride):
            z = model.content_encoder(
                mel_to_tensor(bundle.norm_stats.normalize(seg).astype(np.float32)))
            z = z.squeeze(0).numpy()
            if frame_level:
                for t in range(z.shape[1]):
                    feats.append(z[:, t])
                    labels.append(record.speaker_id)
                    utts.append(record.utterance_id)
            else:
                feats.append(z.mean(axis=1))
                labels.append(record.speaker_id)
                utts.append(record.utterance_id)
    if not feats:
        raise IngestionError("no segments long enough for representation extraction")
    features = np.stack(feats).astype(np.float32)
    if shuffle_labels:
        rng = np.random.default_rng(seed)
        labels = [labels[i] for i in rng.permutation(len(labels))]
    return features, labels, utts


def extract_speaker_reps(cache: FeatureCache, manifest: Manifest,
                         bundle: CheckpointBundle, segment_len: int = 128,
                         stride: int | None = None):
    """(features, labels, utterance_ids) from the speaker encoder, one
    embedding per segment."""
    _check_fingerprint(cache, bundle)
    model = bundle.model
    model.eval()
    feats, labels, utts = [], [], []
    with torch.no_grad():
        for record, seg in _iter_segments(cache, manifest, segment_len, stride):
            z = model.speaker_encoder(
                mel_to_tensor(bundle.norm_stats.normalize(seg).astype(np.float32)))
            feats.append(z.squeeze(0).numpy())
            labels.append(record.speaker_id)
            utts.append(record.utterance_id)
    if not feats:
        raise IngestionError("no segments long enough for representation extraction")
    return np.stack(feats).astype(np.float32), labels, utts


# --- Probe classifier -------------------------------------------------------

class ProbeClassifier(nn.Module):
    """Plain rectifier MLP used to measure speaker information in a
    representation; inputs are standardized with stats frozen at fit time."""

    def __init__(self, in_dim: int, n_classes: int, cfg: ProbeConfig):
        super().__init__()
        dims = [in_dim] + [cfg.hidden_units] * cfg.hidden_layers
        self.hidden = nn.ModuleList(
            [nn.Linear(dims[i], dims[i + 1]) for i in range(cfg.hidden_layers)])
        self.head = nn.Linear(cfg.hidden_units, n_classes)
        self.register_buffer("feat_mean", torch.zeros(in_dim))
        self.register_buffer("feat_std", torch.ones(in_dim))
        self.classes: list[str] = []

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = (x - self.feat_mean) / self.feat_std
        for fc in self.hidden:
            h = torch.relu(fc(h))
        return self.head(h)


def _stratified_split(labels: list[str], holdout_fraction: float,
                      rng: np.random.Generator):
    train_idx, held_idx = [], []
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    for lab in sorted(by_class):
        idx = np.array(by_class[lab])
        rng.shuffle(idx)
        n_held = int(round(holdout_fraction * len(idx)))
        # every class with >= 2 samples contributes to both sides
        n_held = min(max(n_held, 1), len(idx) - 1)
        held_idx.extend(idx[:n_held].tolist())
        train_idx.extend(idx[n_held:].tolist())
    return np.array(sorted(train_idx)), np.array(sorted(held_idx))


def train_probe(features: np.ndarray, labels: list[str],
                cfg: ProbeConfig) -> tuple[ProbeClassifier, float]:
    """Fit the probe on a stratified split; returns (probe, held-out accuracy)."""
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ConfigError(f"probe needs at least 2 classes, got {len(classes)}")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[lab] for lab in labels], dtype=np.int64)

    rng = np.random.default_rng(cfg.seed)
    train_idx, held_idx = _stratified_split(labels, cfg.holdout_fraction, rng)
    if len(held_idx) == 0:
        raise ConfigError("holdout split is empty; need more samples per class")

    x_train = torch.from_numpy(features[train_idx])
    y_train = torch.from_numpy(y[train_idx])
    x_held = torch.from_numpy(features[held_idx])
    y_held = torch.from_numpy(y[held_idx])

    probe = ProbeClassifier(features.shape[1], len(classes), cfg)
    probe.classes = classes
    g = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for p in probe.parameters():
            if p.ndim == 1:
                p.zero_()
            else:
                bound = float(np.sqrt(1.0 / p.shape[1]))
                p.uniform_(-bound, bound, generator=g)
        mean = x_train.mean(dim=0)
        std = x_train.std(dim=0).clamp_min(1e-8)
        probe.feat_mean.copy_(mean)
        probe.feat_std.copy_(std)

    params = dict(probe.named_parameters())
    state = training.AdamState.for_params(params)
    adam_cfg = training.TrainConfig(lr=cfg.lr, weight_decay=0.0, batch_size=cfg.batch_size,
                                    total_iters=cfg.iters, seed=cfg.seed)
    probe.train()
    n = len(train_idx)
    for _ in range(cfg.iters):
        idx = torch.from_numpy(rng.integers(n, size=min(cfg.batch_size, n)))
        logits = probe(x_train[idx])
        loss = nn.functional.cross_entropy(logits, y_train[idx])
        probe.zero_grad(set_to_none=True)
        loss.backward()
        training.adam_step(params, {k: p.grad for k, p in params.items()}, state, adam_cfg)

    probe.eval()
    with torch.no_grad():
        pred = probe(x_held).argmax(dim=1)
        accuracy = float((pred == y_held).float().mean())
    return probe, accuracy


# --- Ablation study ----------------------------------------------------------

def run_ablation(cache: FeatureCache, manifest: Manifest, arch: ArchConfig,
                 train_cfg: training.TrainConfig, probe_cfg: ProbeConfig,
                 settings: list[AblationSetting], work_dir) -> list[dict]:
    """Train one model per setting under identical budgets, probe each
    content representation, and emit accuracy rows."""
    work_dir = Path(work_dir)
    norm = _norm_from(cache, manifest)
    rows = []
    for setting in settings:
        arch_s = apply_setting(arch, setting)
        ckpt, _ = training.train(cache, norm, arch_s, train_cfg, work_dir / setting.value)
        bundle = load_checkpoint(ckpt)
        features, labels, _ = extract_content_reps(
            cache, manifest, bundle, segment_len=train_cfg.segment_len,
            seed=probe_cfg.seed)
        _, accuracy = train_probe(features, labels, probe_cfg)
        rows.append({"setting": setting.value, "accuracy": accuracy,
                     "reference": FULL_SCALE_PROBE_ACCURACY[setting]})
        log.info("ablation %s: probe accuracy %.4f", setting.value, accuracy)
    return rows


def _norm_from(cache: FeatureCache, manifest: Manifest):
    from .corpus import compute_norm_stats
    return compute_norm_stats(cache, manifest)


def write_probe_report(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("setting\taccuracy\tfull_scale_reference\n")
        for row in rows:
            f.write(f"{row['setting']}\t{row['accuracy']:.4f}\t{row['reference']:.3f}\n")


# --- Speaker embedding evaluation ---------------------------------------------

def pca_project_2d(features: np.ndarray) -> np.ndarray:
    """Deterministic 2-D principal-component projection of row vectors."""
    x = features.astype(np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros_like(vt[:1])])
    for i in range(2):  # fix the sign so repeated runs agree
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return (x @ comps.T).astype(np.float32)


def speaker_embedding_eval(cache: FeatureCache, seen_manifest: Manifest,
                           unseen_manifest: Manifest, bundle: CheckpointBundle,
                           probe_cfg: ProbeConfig, segment_len: int = 128) -> dict:
    """Probe speaker identity from speaker embeddings for seen and unseen
    speakers separately; returns accuracies and 2-D projection points.

    A group with fewer than two speakers gets accuracy None (not applicable).
    """
    out: dict = {"points": []}
    all_feats, all_labels, all_utts = [], [], []
    for group, manifest in (("seen", seen_manifest), ("unseen", unseen_manifest)):
        if len(manifest) == 0:
            out[f"{group}_accuracy"] = None
            continue
        feats, labels, utts = extract_speaker_reps(cache, manifest, bundle, segment_len)
        all_feats.append(feats)
        all_labels.extend(labels)
        all_utts.extend(utts)
        if len(set(labels)) < 2:
            out[f"{group}_accuracy"] = None
            continue
        _, acc = train_probe(feats, labels, probe_cfg)
        out[f"{group}_accuracy"] = acc
    if all_feats:
        xy = pca_project_2d(np.concatenate(all_feats, axis=0))
        out["points"] = [(utt, lab, float(x), float(y))
                         for (utt, lab), (x, y) in zip(zip(all_utts, all_labels), xy)]
    return out


def write_projection_points(points, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt, speaker, x, y in points:
            f.write(f"{utt}\t{speaker}\t{x:.6f}\t{y:.6f}\n")


# --- Global variance -----------------------------------------------------------

def global_variance(mels: list[np.ndarray]) -> np.ndarray:
    """Per-mel-bin variance over all frames of all utterances (population)."""
    if not mels:
        raise IngestionError("global_variance needs at least one utterance")
    stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in mels], axis=0)
    return stacked.var(axis=0)


# --- Plot export -----------------------------------------------------------------

def export_plots(artifacts: dict, out_dir) -> tuple[list[Path], int]:
    """Write spectrogram heatmaps, GV curves, and the embedding scatter.

    Every plot goes out as both PNG and SVG. Missing or empty artifacts are
    skipped with a warning; returns (written paths, warning count).
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    warnings = 0

    def save(fig, stem: str):
        for ext in ("png", "svg"):
            path = out_dir / f"{stem}.{ext}"
            fig.savefig(path)
            written.append(path)
        plt.close(fig)

    for name, source_mel, converted_mel in artifacts.get("mel_pairs", []):
        if source_mel is None or converted_mel is None:
            log.warning("skipping heatmap %s: missing mel", name)
            warnings += 1
            continue
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for ax, mel, title in zip(axes, (source_mel, converted_mel),
                                  ("source", "converted")):
            ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto",
                      interpolation="nearest")
            ax.set_title(f"{name} {title}")
            ax.set_xlabel("frame")
            ax.set_ylabel("mel bin")
        fig.tight_layout()
        save(fig, f"heatmap_{name}")

    for entry in artifacts.get("gv_pairs", []):
        name, converted_gv, target_gv = entry[0], entry[1], entry[2]
        source_gv = entry[3] if len(entry) > 3 else None
        if converted_gv is None or target_gv is None:
            log.warning("skipping GV plot %s: missing curve", name)
            warnings += 1
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(converted_gv, label="converted")
        ax.plot(target_gv, label="target")
        if source_gv is not None:
            ax.plot(source_gv, label="source", alpha=0.6)
        ax.set_xlabel("mel bin")
        ax.set_ylabel("variance")
        ax.set_title(f"global variance: {name}")
        ax.legend()
        fig.tight_layout()
        save(fig, f"gv_{name}")

    embedding = artifacts.get("embedding")
    if embedding is not None:
        points = embedding.get("points", [])
        if not points:
            log.warning("skipping embedding scatter: no points")
            warnings += 1
        else:
            gender = embedding.get("gender", {})
            fig, ax = plt.subplots(figsize=(6, 6))
            speakers = sorted({p[1] for p in points})
            cmap = plt.get_cmap("tab20")
            for i, spk in enumerate(speakers):
                xs = [p[2] for p in points if p[1] == spk]
                ys = [p[3] for p in points if p[1] == spk]
                marker = {"f": "x", "m": "o"}.get(gender.get(spk, ""), "s")
                ax.scatter(xs, ys, marker=marker, s=18, color=cmap(i % 20), label=spk)
            ax.set_title("speaker embeddings (2-D projection)")
            if len(speakers) <= 20:
                ax.legend(fontsize=6)
            fig.tight_layout()
            save(fig, "embedding_scatter")
    return written, warnings
