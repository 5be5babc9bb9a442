import numpy as np
import pytest

from invc import conversion, dsp, model
from invc.errors import IngestionError, SizeError


def normalized_mel(micro, utt_index=0, frames=None):
    cache, stats = micro["cache"], micro["stats"]
    utt = cache.utterance_ids[utt_index]
    mel = stats.normalize(cache.load(utt)).astype(np.float32)
    return mel if frames is None else mel[:frames]


def test_crop_to_factor():
    mel = np.zeros((130, 8), dtype=np.float32)
    assert conversion.crop_to_factor(mel, 4).shape == (128, 8)
    assert conversion.crop_to_factor(mel[:128], 4).shape == (128, 8)
    with pytest.raises(SizeError):
        conversion.crop_to_factor(mel[:3], 4)


def test_degenerate_conversion_equals_autoencode_path(micro_model):
    net = micro_model["bundle"].model
    mel = normalized_mel(micro_model, frames=128)
    converted = conversion.convert_mel(mel, mel, net)
    direct = model.decode(model.speaker_encode(mel, net),
                          model.content_encode(mel, net), net)
    assert np.array_equal(converted, direct)


def test_output_frames_track_source_length(micro_model):
    net = micro_model["bundle"].model
    target = normalized_mel(micro_model, 1)
    base = normalized_mel(micro_model, 0)
    long = np.concatenate([base, base], axis=0)
    for frames in (128, 256):
        src = long[:frames]
        out = conversion.convert_mel(src, target, net)
        assert out.shape == (frames, src.shape[1])


def test_conversion_not_symmetric(micro_model):
    net = micro_model["bundle"].model
    a = normalized_mel(micro_model, 0, 128)
    b = normalized_mel(micro_model, 5, 128)
    ab = conversion.convert_mel(a, b, net)
    ba = conversion.convert_mel(b, a, net)
    assert not np.array_equal(ab, ba)


def test_convert_mel_uses_content_mean_not_sampling(micro_model):
    net = micro_model["bundle"].model
    src = normalized_mel(micro_model, 0, 128)
    tgt = normalized_mel(micro_model, 1, 128)
    assert np.array_equal(conversion.convert_mel(src, tgt, net),
                          conversion.convert_mel(src, tgt, net))


@pytest.fixture()
def wav_request(micro_model, tmp_path):
    root = micro_model["root"]
    return conversion.ConversionRequest(
        source_audio=str(root / "spk00" / "utt000.wav"),
        target_audio=str(root / "spk01" / "utt001.wav"),
        checkpoint=str(micro_model["checkpoint"]),
        output=str(tmp_path / "out.wav"),
        dump_dir=str(tmp_path / "dump"))


def test_convert_writes_wav_and_dumps(wav_request, tmp_path):
    out = conversion.convert(wav_request)
    w, rate = dsp.read_wav(out)
    assert rate == 8000
    assert len(w) > 8000  # ~2 s utterance survives
    for name in ("source_mel.npy", "target_mel.npy", "converted_mel.npy"):
        assert (tmp_path / "dump" / name).exists()
    converted = np.load(tmp_path / "dump" / "converted_mel.npy")
    source = np.load(tmp_path / "dump" / "source_mel.npy")
    assert converted.shape[0] == (source.shape[0] // 4) * 4


def test_convert_output_duration_matches_frame_arithmetic(wav_request):
    out = conversion.convert(wav_request)
    w, rate = dsp.read_wav(out)
    converted = np.load(wav_request.dump_dir + "/converted_mel.npy")
    cfg = model.load_checkpoint(wav_request.checkpoint).dsp_config
    expected = (converted.shape[0] - 1) * cfg.hop_length + cfg.win_length
    assert len(w) == expected


def test_convert_bit_identical_runs(wav_request, tmp_path):
    p1 = conversion.convert(wav_request)
    first = p1.read_bytes()
    p2 = conversion.convert(wav_request)
    assert p2.read_bytes() == first


def test_convert_missing_input_no_partial_output(micro_model, tmp_path):
    req = conversion.ConversionRequest(
        source_audio=str(tmp_path / "missing.wav"),
        target_audio=str(tmp_path / "missing2.wav"),
        checkpoint=str(micro_model["checkpoint"]),
        output=str(tmp_path / "out.wav"))
    with pytest.raises(IngestionError):
        conversion.convert(req)
    assert not (tmp_path / "out.wav").exists()
    assert not (tmp_path / "out.wav.part").exists()
