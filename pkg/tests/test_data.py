import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parznet.data import FrameDataset, PfdError, SynthSpec, batches, read_pfd, synth_generate, write_pfd


def small_ds(rng, n=7, frame_len=16, classes=3):
    frames = rng.uniform(-1, 1, size=(n, frame_len)).astype(np.float32)
    return FrameDataset(frame_len, classes, rng.integers(0, classes, size=n), frames)


def test_round_trip(tmp_path, rng):
    ds = small_ds(rng)
    write_pfd(ds, tmp_path / "a.pfd")
    assert read_pfd(tmp_path / "a.pfd") == ds
    assert not (tmp_path / "a.pfd.tmp").exists()


def test_empty_round_trip(tmp_path):
    ds = FrameDataset(10, 4, np.zeros(0, int), np.zeros((0, 10), np.float32))
    write_pfd(ds, tmp_path / "e.pfd")
    back = read_pfd(tmp_path / "e.pfd")
    assert back == ds and len(back) == 0


def test_layout_is_little_endian(tmp_path):
    ds = FrameDataset(2, 5, np.array([3]), np.array([[0.5, -0.25]], np.float32))
    write_pfd(ds, tmp_path / "x.pfd")
    raw = (tmp_path / "x.pfd").read_bytes()
    assert raw[:4] == b"PZN1"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 1, 2, 5)
    assert struct.unpack("<Iff", raw[20:]) == (3, 0.5, -0.25)


def test_bad_magic_offset_zero(tmp_path, rng):
    p = tmp_path / "b.pfd"
    write_pfd(small_ds(rng), p)
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(PfdError) as err:
        read_pfd(p)
    assert err.value.offset == 0


def test_truncated_and_trailing(tmp_path, rng):
    p = tmp_path / "t.pfd"
    write_pfd(small_ds(rng, n=3, frame_len=4), p)
    raw = p.read_bytes()
    rec = 4 + 16
    p.write_bytes(raw[:-5])
    with pytest.raises(PfdError) as err:
        read_pfd(p)
    assert err.value.offset == 20 + 2 * rec
    p.write_bytes(raw + b"\0")
    with pytest.raises(PfdError) as err:
        read_pfd(p)
    assert err.value.offset == len(raw)
    p.write_bytes(raw[:10])
    with pytest.raises(PfdError):
        read_pfd(p)


def test_bad_version_and_label(tmp_path, rng):
    p = tmp_path / "v.pfd"
    write_pfd(small_ds(rng, n=2, frame_len=4, classes=3), p)
    raw = bytearray(p.read_bytes())
    bad = raw.copy()
    bad[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(bad))
    with pytest.raises(PfdError, match="version"):
        read_pfd(p)
    bad = raw.copy()
    bad[20 + 20:20 + 24] = struct.pack("<I", 3)  # second record's label
    p.write_bytes(bytes(bad))
    with pytest.raises(PfdError) as err:
        read_pfd(p)
    assert err.value.offset == 40


def test_dataset_validation():
    with pytest.raises(ValueError):
        FrameDataset(2, 2, [0, 2], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FrameDataset(2, 2, [0], np.full((1, 2), 1.5))


def test_batches_full_and_deterministic(rng):
    ds = small_ds(rng, n=11)
    (lab, fr), = list(batches(ds, 11, 5))
    assert sorted(map(tuple, fr.tolist())) == sorted(map(tuple, ds.frames.tolist()))
    a = [l.tolist() for l, _ in batches(ds, 3, 9)]
    b = [l.tolist() for l, _ in batches(ds, 3, 9)]
    assert a == b


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 40), st.integers(1, 50), st.integers(0, 2**31))
def test_batches_cover_each_record_once(n, bs, seed):
    frames = np.arange(n * 2, dtype=np.float32).reshape(n, 2) / (2 * n + 1)
    ds = FrameDataset(2, 1, np.zeros(n, int), frames)
    seen = [row[0] for _, fr in batches(ds, bs, seed) for row in fr.tolist()]
    assert sorted(seen) == sorted(frames[:, 0].tolist())
    sizes = [len(l) for l, _ in batches(ds, bs, seed)]
    assert all(s == bs for s in sizes[:-1])


def test_synth_defaults():
    spec = SynthSpec()
    carriers, _ = spec.resolved()
    np.testing.assert_array_equal(carriers[:, 0], 300 + 400 * np.arange(8))
    assert spec.frame_len == 3200 and spec.sample_rate == 16000


def test_synth_deterministic():
    spec = SynthSpec(n_train=20, n_val=5, n_test=5, seed=3)
    a, b = synth_generate(spec), synth_generate(spec)
    assert all(x == y for x, y in zip(a, b))
    c = synth_generate(SynthSpec(n_train=20, n_val=5, n_test=5, seed=4))
    assert a[0] != c[0]


def test_synth_noiseless_dft_oracle():
    spec = SynthSpec(n_train=64, n_val=0, n_test=0, snr_db=math.inf, seed=1)
    train, _, _ = synth_generate(spec)
    carriers, _ = spec.resolved()
    spectra = np.abs(np.fft.rfft(train.frames, axis=1))
    peak_hz = spectra.argmax(axis=1) * spec.sample_rate / spec.frame_len
    pred = np.abs(peak_hz[:, None] - carriers[None, :, 0]).argmin(axis=1)
    assert np.mean(pred == train.labels) == 1.0
    assert np.abs(train.frames).max() == pytest.approx(1.0)


def test_synth_validation():
    with pytest.raises(ValueError):
        SynthSpec(carriers=[[9000.0]], mod_rates=[[3.0]], class_count=1).validate()
    with pytest.raises(ValueError):
        SynthSpec(snr_db=float("nan")).validate()


def test_pcm_frames(tmp_path):
    from parznet.data import pcm_frames

    x = np.array([-32768, 0, 16384, 32767, 5, 6, 7], dtype="<i2")
    (tmp_path / "x.raw").write_bytes(x.tobytes())
    f = pcm_frames(tmp_path / "x.raw", 3, hop=2)
    np.testing.assert_allclose(f[0], [-1.0, 0.0, 0.5])
    assert f.shape == (3, 3)
    assert pcm_frames(tmp_path / "x.raw", 10).shape == (0, 10)
