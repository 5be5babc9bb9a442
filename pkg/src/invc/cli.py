"""Command-line entry point wiring every stage together.

Subcommands: preprocess | train | convert | eval-probe | eval-embedding |
eval-gv | plot | info.

Configuration is a flat key=value text file with section-prefixed keys
(e.g. ``dsp.win_length_ms=50``). Precedence, lowest to highest: built-in
defaults, config file, ``INVC_SECTION__FIELD`` environment variables,
``--set section.field=value`` flags, dedicated flags such as ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conversion, corpus, dsp, evaluation, training
from .errors import (CheckpointError, ConfigError, IngestionError, InvcError,
                     NumericError, SizeError)
from .model import ArchConfig, load_checkpoint

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

ENV_PREFIX = "INVC_"


@dataclass(frozen=True)
class CorpusConfig:
    test_speaker_count: int = 20
    valid_fraction: float = 0.1
    min_frames: int = 128
    split_seed: int = 0
    workers: int = 0


@dataclass(frozen=True)
class PathsConfig:
    corpus_root: str = "corpus"
    cache_dir: str = "cache"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    dsp: dsp.DspConfig = field(default_factory=dsp.DspConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    probe: evaluation.ProbeConfig = field(default_factory=evaluation.ProbeConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        if self.arch.n_mels != self.dsp.n_mels:
            raise ConfigError(
                f"arch.n_mels={self.arch.n_mels} disagrees with dsp.n_mels={self.dsp.n_mels}")
        if self.train.segment_len % self.arch.downsample_factor != 0:
            raise ConfigError(
                f"train.segment_len={self.train.segment_len} not divisible by "
                f"arch.downsample_factor={self.arch.downsample_factor}")


_SECTIONS = {
    "dsp": dsp.DspConfig,
    "arch": ArchConfig,
    "train": training.TrainConfig,
    "probe": evaluation.ProbeConfig,
    "corpus": CorpusConfig,
    "paths": PathsConfig,
}


def _coerce(raw: str, annotation) -> object:
    text = raw.strip()
    ann = str(annotation)
    if "bool" in ann:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if text.lower() in ("none", "null") and ("None" in ann or "Optional" in ann):
        return None
    try:
        if "int" in ann and "float" not in ann:
            return int(text)
        if "float" in ann:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {ann}") from exc
    return text


def parse_config_file(path) -> dict[str, dict[str, str]]:
    """Flat ``section.field=value`` lines; '#' starts a comment."""
    out: dict[str, dict[str, str]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line or "." not in line.split("=", 1)[0]:
                raise ConfigError(f"{path}:{line_no}: expected section.field=value")
            key, value = line.split("=", 1)
            section, name = key.strip().split(".", 1)
            out.setdefault(section, {})[name.strip()] = value.strip()
    return out


def _env_overrides() -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, name = key[len(ENV_PREFIX):].lower().split("__", 1)
        out.setdefault(section, {})[name] = value
    return out


def merge_config_sources(config_path=None, sets: list[str] | None = None,
                         use_env: bool = True) -> dict[str, dict[str, str]]:
    """Raw string values per section.field after applying precedence:
    config file < environment < --set flags."""
    layers_: list[dict[str, dict[str, str]]] = []
    if config_path is not None:
        layers_.append(parse_config_file(config_path))
    if use_env:
        layers_.append(_env_overrides())
    if sets:
        flat: dict[str, dict[str, str]] = {}
        for item in sets:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"--set expects section.field=value, got {item!r}")
            key, value = item.split("=", 1)
            section, name = key.split(".", 1)
            flat.setdefault(section.strip(), {})[name.strip()] = value.strip()
        layers_.append(flat)

    merged: dict[str, dict[str, str]] = {}
    for layer in layers_:
        for section, fields_ in layer.items():
            merged.setdefault(section, {}).update(fields_)
    return merged


def build_run_config(config_path=None, sets: list[str] | None = None,
                     use_env: bool = True) -> RunConfig:
    merged = merge_config_sources(config_path, sets, use_env)
    kwargs = {}
    for section, cls in _SECTIONS.items():
        raw = merged.pop(section, {})
        field_types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for name, text in raw.items():
            if name not in field_types:
                raise ConfigError(f"unknown config key {section}.{name}")
            values[name] = _coerce(text, field_types[name])
        kwargs[section] = cls(**values)
    if merged:
        raise ConfigError(f"unknown config section(s): {sorted(merged)}")
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


# --- Subcommand handlers -----------------------------------------------------

def _cmd_preprocess(args) -> int:
    cfg = build_run_config(args.config, args.set)
    paths = cfg.paths
    cache_dir = Path(paths.cache_dir)
    splits = corpus.build_manifest(paths.corpus_root, cfg.corpus.test_speaker_count,
                                   cfg.corpus.valid_fraction, cfg.corpus.split_seed)
    cache_dir.mkdir(parents=True, exist_ok=True)
    all_records = [r for m in splits.values() for r in m.records]
    cache = corpus.preprocess_corpus(corpus.Manifest(all_records), cfg.dsp,
                                     cfg.corpus.min_frames, cache_dir,
                                     workers=cfg.corpus.workers)
    for name, manifest in splits.items():
        kept = corpus.Manifest([r for r in manifest.records if r.utterance_id in cache])
        kept.save(cache_dir / f"{name}.tsv")
    train_manifest = corpus.Manifest.load(cache_dir / "train.tsv")
    stats = corpus.compute_norm_stats(cache, train_manifest)
    stats.save(cache_dir / "norm_stats.npz")
    print(f"cache: {len(cache)} utterances "
          f"(train {len(train_manifest)}, valid {len(corpus.Manifest.load(cache_dir / 'valid.tsv'))}, "
          f"test {len(corpus.Manifest.load(cache_dir / 'test.tsv'))})")
    return EXIT_OK


def _open_cache(cfg: RunConfig):
    cache_dir = Path(cfg.paths.cache_dir)
    cache = corpus.FeatureCache.open(cache_dir)
    stats = corpus.NormStats.load(cache_dir / "norm_stats.npz")
    manifests = {name: corpus.Manifest.load(cache_dir / f"{name}.tsv")
                 for name in ("train", "valid", "test")}
    return cache, stats, manifests


def _cmd_train(args) -> int:
    cfg = build_run_config(args.config, args.set)
    if args.seed is not None:
        cfg.train = training.TrainConfig.from_dict(
            {**cfg.train.to_dict(), "seed": args.seed})
    cache, stats, _ = _open_cache(cfg)
    ckpt, metrics = training.train(cache, stats, cfg.arch, cfg.train,
                                   cfg.paths.checkpoint_dir, resume_from=args.resume)
    print(f"checkpoint: {ckpt} ({len(metrics)} logged periods)")
    return EXIT_OK


def _cmd_convert(args) -> int:
    req = conversion.ConversionRequest(
        source_audio=args.source, target_audio=args.target,
        checkpoint=args.checkpoint, output=args.out, dump_dir=args.dump_dir)
    out = conversion.convert(req)
    print(f"wrote {out}")
    return EXIT_OK


def _parse_settings(text: str) -> list[evaluation.AblationSetting]:
    if text == "all":
        return list(evaluation.AblationSetting)
    out = []
    for name in text.split(","):
        name = name.strip()
        if not name:
            continue
        try:
            out.append(evaluation.AblationSetting(name))
        except ValueError as exc:
            valid = ", ".join(s.value for s in evaluation.AblationSetting)
            raise ConfigError(f"unknown setting {name!r}; valid: all, {valid}") from exc
    return out


def _cmd_eval_probe(args) -> int:
    cfg = build_run_config(args.config, args.set)
    settings = _parse_settings(args.settings)
    cache, _, manifests = _open_cache(cfg)
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluation.run_ablation(cache, manifests["train"], cfg.arch, cfg.train,
                                   cfg.probe, settings,
                                   Path(cfg.paths.checkpoint_dir) / "ablation")
    report_path = report_dir / "probe_report.tsv"
    evaluation.write_probe_report(rows, report_path)
    for row in rows:
        print(f"{row['setting']}\taccuracy={row['accuracy']:.4f}\t"
              f"full-scale reference={row['reference']:.3f}")
    print(f"report: {report_path}")
    return EXIT_OK


def _cmd_eval_embedding(args) -> int:
    cfg = build_run_config(args.config, args.set)
    cache, _, manifests = _open_cache(cfg)
    bundle = load_checkpoint(args.checkpoint)
    result = evaluation.speaker_embedding_eval(cache, manifests["valid"],
                                               manifests["test"], bundle, cfg.probe,
                                               segment_len=cfg.train.segment_len)
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_projection_points(result["points"], report_dir / "embedding_points.tsv")
    with open(report_dir / "embedding_report.tsv", "w", encoding="utf-8") as f:
        f.write("group\taccuracy\tfull_scale_reference\n")
        for group in ("seen", "unseen"):
            acc = result.get(f"{group}_accuracy")
            text = "n/a" if acc is None else f"{acc:.4f}"
            f.write(f"{group}\t{text}\t{evaluation.FULL_SCALE_SPEAKER_ACCURACY[group]}\n")
            print(f"{group}: {text}")
    return EXIT_OK


def _load_mel_group(path: Path) -> list[np.ndarray]:
    if path.is_dir():
        files = sorted(path.glob("*.npy"))
    else:
        files = [path]
    if not files:
        raise IngestionError(f"no .npy mel matrices under {path}")
    return [np.load(p) for p in files]


def _cmd_eval_gv(args) -> int:
    groups = {}
    for item in args.group:
        if "=" not in item:
            raise ConfigError(f"--group expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        groups[name] = evaluation.global_variance(_load_mel_group(Path(path)))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, gv in groups.items():
        np.save(out_dir / f"gv_{name}.npy", gv)
    with open(out_dir / "gv_distances.tsv", "w", encoding="utf-8") as f:
        f.write("group_a\tgroup_b\tl2_distance\n")
        names = sorted(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                d = float(np.linalg.norm(groups[a] - groups[b]))
                f.write(f"{a}\t{b}\t{d:.6f}\n")
                print(f"GV L2 {a} <-> {b}: {d:.4f}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    artifacts: dict = {}
    mel_pairs = []
    gv_pairs = []
    for item in args.dump_dir or []:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).name, item
        d = Path(path)
        source = d / "source_mel.npy"
        converted = d / "converted_mel.npy"
        target = d / "target_mel.npy"
        src = np.load(source) if source.exists() else None
        cvt = np.load(converted) if converted.exists() else None
        tgt = np.load(target) if target.exists() else None
        mel_pairs.append((name, src, cvt))
        gv_pairs.append((name,
                         evaluation.global_variance([cvt]) if cvt is not None else None,
                         evaluation.global_variance([tgt]) if tgt is not None else None,
                         evaluation.global_variance([src]) if src is not None else None))
    if mel_pairs:
        artifacts["mel_pairs"] = mel_pairs
        artifacts["gv_pairs"] = gv_pairs
    if args.projection:
        points = []
        with open(args.projection, encoding="utf-8") as f:
            for line in f:
                utt, spk, x, y = line.rstrip("\n").split("\t")
                points.append((utt, spk, float(x), float(y)))
        artifacts["embedding"] = {"points": points}
    written, warnings = evaluation.export_plots(artifacts, args.out_dir)
    print(f"wrote {len(written)} files, {warnings} warnings")
    return EXIT_OK


def _cmd_info(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    n_params = sum(p.numel() for p in bundle.model.parameters())
    print(f"checkpoint: {args.checkpoint}")
    print(f"format version: 1")
    print(f"parameters: {n_params}")
    print(f"dsp fingerprint: {bundle.dsp_config.fingerprint()}")
    for key, value in sorted(bundle.arch.to_dict().items()):
        print(f"arch.{key}={value}")
    for key, value in sorted(bundle.dsp_config.to_dict().items()):
        print(f"dsp.{key}={value}")
    for key in sorted(bundle.meta):
        if key not in ("numpy_rng_state", "train_config"):
            print(f"meta.{key}={bundle.meta[key]}")
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invc",
                                     description="One-shot voice conversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build manifests, feature cache, norm stats")
    _add_config_args(p)
    p.set_defaults(handler=_cmd_preprocess)

    p = sub.add_parser("train", help="train the conversion model")
    _add_config_args(p)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("convert", help="one-shot conversion between two utterances")
    p.add_argument("--source", required=True, help="utterance providing content")
    p.add_argument("--target", required=True, help="utterance providing the voice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--dump-dir", default=None, help="dump intermediate mel matrices here")
    p.set_defaults(handler=_cmd_convert)

    p = sub.add_parser("eval-probe", help="normalization-placement ablation with probes")
    _add_config_args(p)
    p.add_argument("--settings", default="all",
                   help="'all' or comma-separated setting names")
    p.set_defaults(handler=_cmd_eval_probe)

    p = sub.add_parser("eval-embedding", help="speaker-embedding classification + projection")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=_cmd_eval_embedding)

    p = sub.add_parser("eval-gv", help="global variance per mel bin for mel groups")
    p.add_argument("--group", action="append", required=True, metavar="NAME=PATH",
                   help=".npy file or directory of .npy mels (repeatable)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=_cmd_eval_gv)

    p = sub.add_parser("plot", help="render heatmaps, GV curves, and embedding scatter")
    p.add_argument("--dump-dir", action="append", default=[], metavar="[NAME=]DIR",
                   help="conversion dump directory (repeatable)")
    p.add_argument("--projection", default=None, help="embedding points TSV")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=_cmd_plot)

    p = sub.add_parser("info", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=_cmd_info)
    return parser


def run_cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors carry exit code 2
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SizeError as exc:
        print(f"size error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except InvcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run_cli(argv)


if __name__ == "__main__":
    raise SystemExit(main())
