import numpy as np
import pytest
import torch

from invc import corpus, model, toyset, training


@pytest.fixture(scope="session")
def toy_dsp():
    return toyset.toy_dsp_config()


@pytest.fixture(scope="session")
def tiny_arch():
    return model.ArchConfig.tiny()


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """2 toy speakers x 4 utterances; enough for plumbing tests."""
    root = tmp_path_factory.mktemp("micro_corpus")
    info = toyset.make_toy_corpus(root, n_speakers=2, utterances_per_speaker=4, seed=7)
    return info


@pytest.fixture(scope="session")
def micro_cache(micro_corpus, toy_dsp, tmp_path_factory):
    cache_dir = tmp_path_factory.mktemp("micro_cache")
    splits = corpus.build_manifest(micro_corpus["root"], test_speaker_count=0,
                                   valid_fraction=0.0, seed=0)
    manifest = splits["train"]
    cache = corpus.preprocess_corpus(manifest, toy_dsp, 128, cache_dir)
    stats = corpus.compute_norm_stats(cache, manifest)
    return {"cache": cache, "stats": stats, "manifest": manifest,
            "root": micro_corpus["root"]}


@pytest.fixture(scope="session")
def micro_model(micro_cache, tiny_arch, tmp_path_factory):
    """Briefly trained tiny model + checkpoint on the micro corpus."""
    out = tmp_path_factory.mktemp("micro_model")
    cfg = training.TrainConfig(batch_size=8, segment_len=128, total_iters=150,
                               seed=13, log_every=50, checkpoint_every=150)
    ckpt, metrics = training.train(micro_cache["cache"], micro_cache["stats"],
                                   tiny_arch, cfg, out)
    bundle = model.load_checkpoint(ckpt)
    return {"checkpoint": ckpt, "bundle": bundle, "metrics": metrics, **micro_cache}


def make_synthetic_cache(directory, mels: dict[str, np.ndarray], dsp_cfg) -> corpus.FeatureCache:
    """Materialize an in-memory dict of (frames, n_mels) arrays as a cache."""
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for utt, mel in mels.items():
        filename = utt.replace("/", "__") + ".npy"
        np.save(directory / filename, mel.astype(np.float32))
        index[utt] = (filename, mel.shape[0], mel.shape[1])
    cache = corpus.FeatureCache(directory, index, dsp_cfg)
    cache._write_meta()
    return cache


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
