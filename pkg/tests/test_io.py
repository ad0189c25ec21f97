import struct

import numpy as np
import pytest

from hieraudio.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from hieraudio.config import Config, ModelConfig, TrainConfig, tiny_model
from hieraudio.dsp import FeatureConfig, Waveform, load_wav, log_mel, write_wav
from hieraudio.manifest import (ClipDataset, ClipEntry, DatasetError, EventInterval, load_manifest,
                                write_manifest)
from hieraudio.model import init_params
from hieraudio.synth import MAX_CLASSES, class_frequency, class_row, make_dataset


@pytest.fixture(scope="module")
def tiny():
    return Config(tiny_model(), TrainConfig(seed=3))


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tiny, tmp_path):
    params = {k: v.data for k, v in init_params(tiny.model, 1).items()}
    path = tmp_path / "a.htsc"
    save_checkpoint(path, tiny, params)
    cfg, loaded = load_checkpoint(path)
    assert cfg == tiny
    assert list(loaded) == list(params)
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params)
    save_checkpoint(tmp_path / "b.htsc", cfg, loaded)
    assert (tmp_path / "b.htsc").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tiny):
    params = {k: v.data for k, v in init_params(tiny.model, 0).items()}
    blob = encode(tiny, params)
    assert blob[:4] == b"HTSC"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    n = struct.unpack("<I", blob[8:12])[0]
    assert blob[12:12 + n].decode().startswith("# model")
    assert len(blob) == 12 + n + 4 + sum(4 + len(k) + 4 + 4 * v.ndim + 4 * v.size for k, v in params.items()) + 8


def test_checkpoint_corruption_detected(tiny):
    blob = bytearray(encode(tiny, {k: v.data for k, v in init_params(tiny.model, 0).items()}))
    blob[200] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + bytes(blob[4:]))


def test_checkpoint_config_mismatch(tiny):
    blob = encode(tiny, {k: v.data for k, v in init_params(tiny.model, 0).items()})
    other = Config(ModelConfig(**{**vars(tiny.model), "C": 10}))
    with pytest.raises(CheckpointError, match="C"):
        decode(blob, expect=other)
    params = {k: v.data for k, v in init_params(tiny.model, 0).items()}
    params.pop("norm.bias")
    with pytest.raises(CheckpointError, match="missing"):
        decode(encode(tiny, params))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="nope.htsc"):
        load_checkpoint(tmp_path / "nope.htsc")


# --- manifests -----------------------------------------------------------------------------


def write_clip(path, seconds=0.5, rate=32000):
    write_wav(path, Waveform(np.zeros(int(seconds * rate)), rate))
    return path


def test_manifest_roundtrip(tmp_path):
    (tmp_path / "clips").mkdir()
    a = write_clip(tmp_path / "clips" / "a.wav")
    b = write_clip(tmp_path / "clips" / "b.wav")
    entries = [ClipEntry(a, (0, 2), (EventInterval(0, 0.5, 1.25, "a"), EventInterval(2, 2.0, 3.0, "a"))),
               ClipEntry(b, (1,), ())]
    write_manifest(tmp_path / "m.csv", entries)
    text = (tmp_path / "m.csv").read_text()
    assert "clips/a.wav,0;2,0:0.5:1.25;2:2.0:3.0" in text
    m = load_manifest(tmp_path / "m.csv", n_classes=3)
    assert m.clips == entries
    assert m.labels == [(0, 2), (1,)]


def test_manifest_errors(tmp_path):
    with pytest.raises(DatasetError, match="missing.csv"):
        load_manifest(tmp_path / "missing.csv")
    (tmp_path / "empty.csv").write_text("clip_path,labels,events\n")
    with pytest.raises(DatasetError, match="no clips"):
        load_manifest(tmp_path / "empty.csv")
    (tmp_path / "ghost.csv").write_text("clip_path,labels,events\nghost.wav,0,\n")
    with pytest.raises(DatasetError, match="ghost.wav"):
        load_manifest(tmp_path / "ghost.csv")
    write_clip(tmp_path / "x.wav")
    (tmp_path / "range.csv").write_text("clip_path,labels,events\nx.wav,9,\n")
    with pytest.raises(DatasetError, match=r"range.csv:2"):
        load_manifest(tmp_path / "range.csv", n_classes=8)


def test_dataset_features_tile_short_clips(tmp_path):
    cfg = tiny_model()
    rng = np.random.default_rng(0)
    short = Waveform(rng.uniform(-0.5, 0.5, size=8000), 32000)  # 0.25 s
    write_wav(tmp_path / "s.wav", short)
    (tmp_path / "m.csv").write_text("clip_path,labels,events\ns.wav,3,\n")
    ds = ClipDataset(load_manifest(tmp_path / "m.csv", cfg.C), cfg)
    feats = ds.features(0)
    assert feats.shape == (cfg.T, cfg.F) and feats.dtype == np.float32
    np.testing.assert_array_equal(ds.target(0), np.eye(cfg.C)[3])
    # the tile repeats every 25 frames, so interior frames recur
    np.testing.assert_allclose(feats[30], feats[55], atol=1e-4)


def test_dataset_bad_wav_names_path(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    (tmp_path / "m.csv").write_text("clip_path,labels,events\nbad.wav,0,\n")
    ds = ClipDataset(load_manifest(tmp_path / "m.csv"), tiny_model())
    with pytest.raises(DatasetError, match="bad.wav"):
        ds.features(0)


# --- synthetic data ---------------------------------------------------------------------------


def test_class_table_spread_and_distinct():
    rows = [class_row(k) for k in range(MAX_CLASSES)]
    assert sorted(rows) == list(range(1, 64, 2))
    assert rows[:4] == [1, 33, 17, 49]
    freqs = [class_frequency(k) for k in range(MAX_CLASSES)]
    assert len(set(freqs)) == MAX_CLASSES and max(freqs) < 14000
    with pytest.raises(ValueError):
        class_row(32)


def test_synth_deterministic(tmp_path):
    m1 = make_dataset(tmp_path / "a", 3, 4, seed=5, seconds=2.5)
    m2 = make_dataset(tmp_path / "b", 3, 4, seed=5, seconds=2.5)
    for name in ("clip_0000.wav", "clip_0001.wav", "clip_0002.wav"):
        assert (tmp_path / "a" / "clips" / name).read_bytes() == (tmp_path / "b" / "clips" / name).read_bytes()
    assert m1.read_text() == m2.read_text()
    m3 = make_dataset(tmp_path / "c", 3, 4, seed=6, seconds=2.5)
    assert m3.read_text() != m1.read_text()


def test_synth_manifest_is_ground_truth(tmp_path):
    m = load_manifest(make_dataset(tmp_path, 16, 8, seed=1, seconds=2.5), 8)
    covered = set()
    for i, clip in enumerate(m.clips):
        assert 1 <= len(clip.events) <= 3
        assert len({e.class_id for e in clip.events}) == len(clip.events)
        assert i % 8 in clip.labels
        covered |= set(clip.labels)
        for e in clip.events:
            assert 0 <= e.onset < e.offset <= 2.5
            assert 0.25 * 2.5 - 0.011 <= e.duration <= 0.5 * 2.5 + 0.011
            assert round(e.onset * 100) == pytest.approx(e.onset * 100)
    assert covered == set(range(8))


def test_synth_events_visible_in_log_mel(tmp_path):
    m = load_manifest(make_dataset(tmp_path, 6, 8, seed=2, seconds=2.5), 8)
    feats = FeatureConfig()
    for clip in m.clips:
        spec = log_mel(load_wav(clip.path), feats).frames
        for e in clip.events:
            row = class_row(e.class_id)
            inside = spec[int(e.onset * 100) + 3:int(e.offset * 100) - 3, row]
            quiet = [t for t in range(250) if all(not (o.onset * 100 - 5 <= t < o.offset * 100 + 5)
                                                    for o in clip.events)]
            # ridge: the class row is far above the noise floor while the tone plays
            assert inside.min() > spec[quiet, row].max() + 3.0


def test_synth_rejects_bad_args(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(tmp_path, 2, 33, seed=0)
    with pytest.raises(ValueError):
        make_dataset(tmp_path, 0, 4, seed=0)
