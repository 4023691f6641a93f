import numpy as np
import pytest
import soundfile as sf

import manifests
import storage_io
from errors import EmptyInputError, FormatError
from etl_features import extract_directory, list_wavs, read_pcm, wav_to_features
from settings import FeatureConfig


def _tone(seconds=0.5, sr=16000, freq=440.0):
    t = np.arange(int(seconds * sr)) / sr
    return 0.3 * np.sin(2 * np.pi * freq * t)


def _wav(path, data, sr=16000, subtype="PCM_16"):
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), data, sr, subtype=subtype)
    return path


@pytest.fixture
def wav_tree(tmp_path):
    root = tmp_path / "wavs"
    _wav(root / "alice" / "a1.wav", _tone(freq=300.0))
    _wav(root / "alice" / "a2.wav", _tone(freq=320.0))
    _wav(root / "bob" / "b1.WAV", _tone(freq=900.0))
    (root / "bob" / "notes.txt").write_text("not audio")
    return root


def test_list_wavs_is_sorted_and_case_insensitive(wav_tree):
    names = [p.name for p in list_wavs(wav_tree)]
    assert names == ["a1.wav", "a2.wav", "b1.WAV"]


def test_read_pcm_scales_16_bit(tmp_path):
    pcm = read_pcm(_wav(tmp_path / "x.wav", _tone()), 16000)
    assert pcm.dtype == np.float64 and pcm.ndim == 1
    assert np.abs(pcm).max() == pytest.approx(0.3, abs=1e-3)


def test_read_pcm_rejects_wrong_formats(tmp_path):
    with pytest.raises(FormatError, match="sample rate"):
        read_pcm(_wav(tmp_path / "sr.wav", _tone(sr=8000), sr=8000), 16000)
    with pytest.raises(FormatError, match="mono"):
        read_pcm(_wav(tmp_path / "st.wav", np.stack([_tone(), _tone()], axis=1)), 16000)
    with pytest.raises(FormatError, match="16-bit"):
        read_pcm(_wav(tmp_path / "f.wav", _tone(), subtype="FLOAT"), 16000)
    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"definitely not RIFF")
    with pytest.raises(FormatError, match="unreadable"):
        read_pcm(junk, 16000)


def test_wav_to_features_shape(tmp_path):
    fm = wav_to_features(_wav(tmp_path / "x.wav", _tone(seconds=1.0)), FeatureConfig())
    assert fm.values.shape == (98, 40)


def test_extract_directory_writes_features_and_manifest(wav_tree, tmp_path):
    out = tmp_path / "out"
    result = extract_directory(wav_tree, out, FeatureConfig())
    assert len(result.written) == 3 and not result.errors
    df = manifests.read_manifest(result.manifest)
    assert df["utterance_id"].tolist() == ["alice/a1", "alice/a2", "bob/b1"]
    assert df["speaker_id"].tolist() == ["alice", "alice", "bob"]
    assert storage_io.read_features(df.iloc[2].path).values.shape == (48, 40)
    assert (out / "features" / "alice" / "a1.fbnk").exists()


def test_extract_directory_reports_bad_files_after_writing_good_ones(wav_tree, tmp_path):
    _wav(wav_tree / "carol" / "c1.wav", _tone(sr=8000), sr=8000)
    out = tmp_path / "out"
    with pytest.raises(FormatError, match="1 of 4 files failed"):
        extract_directory(wav_tree, out, FeatureConfig())
    df = manifests.read_manifest(out / "manifest.tsv")
    assert len(df) == 3 and "carol" not in set(df["speaker_id"])


def test_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(EmptyInputError, match="no input files"):
        extract_directory(tmp_path / "empty", tmp_path / "out", FeatureConfig())


def test_extract_rerun_is_byte_identical(wav_tree, tmp_path):
    out = tmp_path / "out"
    extract_directory(wav_tree, out, FeatureConfig())
    first = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    extract_directory(wav_tree, out, FeatureConfig())
    second = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    assert len(first) == 4
    assert first == second
