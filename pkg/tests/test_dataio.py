import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from qgan.dataio import (
    CheckpointError,
    SyntheticSpec,
    channel_correlation,
    checkpoint_bytes,
    load_checkpoint,
    load_image,
    load_image_dir,
    load_mask,
    parse_checkpoint,
    save_checkpoint,
    save_image,
    save_mask,
    synth_dataset,
    to_uint8,
    to_unit_range,
)
from qgan.gan import TrainConfig, generator_forward, sample_latent, train

TINY = dict(image_size=8, latent_dim=3, g_channels=(3,), d_channels=(3,), batch_size=4)


@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(**TINY, iterations=20, seed=1)
    model, _ = train(synth_dataset(SyntheticSpec(side=8, count=8)), cfg)
    return model


class TestPixels:
    def test_black_and_gray(self):
        assert np.all(to_unit_range(np.zeros((1, 1, 3), np.uint8)) == -1)
        g = to_unit_range(np.full((1, 1, 3), 128, np.uint8))
        assert g[0, 0, 0] == pytest.approx(1 / 255)
        assert to_uint8(g)[0, 0, 0] == 128

    def test_bijection(self):
        v = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
        np.testing.assert_array_equal(to_uint8(to_unit_range(v)), v)

    @given(st.floats(-1, 1))
    def test_roundtrip_error(self, x):
        back = to_unit_range(to_uint8(np.full((3, 1, 1), x)))
        assert abs(back[0, 0, 0] - x) <= 1 / 255 + 1e-12

    def test_clipping(self):
        assert to_uint8(np.full((3, 1, 1), 5.0))[0, 0, 0] == 255
        assert to_uint8(np.full((3, 1, 1), -5.0))[0, 0, 0] == 0


class TestFiles:
    def test_save_load_fixpoint(self, tmp_path):
        img = np.random.default_rng(0).uniform(-1, 1, size=(3, 9, 7))
        save_image(img, tmp_path / "a.png")
        save_image(load_image(tmp_path / "a.png"), tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert np.max(np.abs(load_image(tmp_path / "a.png") - img)) <= 1 / 255 + 1e-12

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            save_image(np.zeros((3, 2, 2)), tmp_path / "nope" / "a.png")

    def test_rejects_non_rgb(self, tmp_path):
        Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "g.png")
        with pytest.raises(ValueError):
            load_image(tmp_path / "g.png")
        (tmp_path / "junk.png").write_bytes(b"not a png")
        with pytest.raises(ValueError):
            load_image(tmp_path / "junk.png")

    def test_mask_roundtrip(self, tmp_path):
        m = (np.random.default_rng(1).uniform(size=(6, 6)) > 0.5).astype(float)
        save_mask(m, tmp_path / "m.png")
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)
        with Image.open(tmp_path / "m.png") as im:
            assert im.mode == "L" and set(np.unique(np.asarray(im))) <= {0, 255}

    def test_image_dir(self, tmp_path):
        for name in ("b.png", "a.png"):
            save_image(np.zeros((3, 4, 4)), tmp_path / name)
        imgs, names = load_image_dir(tmp_path)
        assert names == ["a.png", "b.png"] and imgs.shape == (2, 3, 4, 4)
        save_image(np.zeros((3, 5, 4)), tmp_path / "c.png")
        with pytest.raises(ValueError):
            load_image_dir(tmp_path)


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["gradient-pairs", "colored-shapes"])
    def test_reproducible(self, kind):
        spec = SyntheticSpec(kind=kind, side=32, count=16, seed=3)
        a, b = synth_dataset(spec), synth_dataset(spec)
        assert a.shape == (16, 3, 32, 32)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= -1 and a.max() <= 1

    @pytest.mark.parametrize("kind", ["gradient-pairs", "colored-shapes"])
    def test_channel_correlation(self, kind):
        assert channel_correlation(synth_dataset(SyntheticSpec(kind=kind, count=32))) > 0.2

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(kind="noise")
        with pytest.raises(ValueError):
            SyntheticSpec(count=0)


class TestCheckpoint:
    def test_save_load_save_identical(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.bin")
        save_checkpoint(load_checkpoint(tmp_path / "a.bin"), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_forward_bitwise(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.bin")
        loaded = load_checkpoint(tmp_path / "a.bin")
        z = sample_latent(np.random.default_rng(0), 4, 3)
        trained.G.eval()
        np.testing.assert_array_equal(generator_forward(z, trained.G), generator_forward(z, loaded.G))

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = synth_dataset(SyntheticSpec(side=8, count=8))
        full, rows_full = train(data, TrainConfig(**TINY, iterations=10, seed=4))
        half, _ = train(data, TrainConfig(**TINY, iterations=5, seed=4))
        save_checkpoint(half, tmp_path / "h.bin")
        resumed = load_checkpoint(tmp_path / "h.bin")
        resumed, rows = train(data, TrainConfig(**TINY, iterations=5, seed=4), model=resumed)
        assert rows == rows_full[5:]
        # headers differ only in the echoed iteration budget
        h1, a1 = parse_checkpoint(checkpoint_bytes(resumed))
        h2, a2 = parse_checkpoint(checkpoint_bytes(full))
        assert h1["rng_state"] == h2["rng_state"] and h1["iteration"] == h2["iteration"] == 10
        assert a1.keys() == a2.keys()
        for k in a1:
            np.testing.assert_array_equal(a1[k], a2[k])

    def test_truncated(self, trained, tmp_path):
        data = checkpoint_bytes(trained)
        (tmp_path / "t.bin").write_bytes(data[:-100])
        with pytest.raises(CheckpointError, match="checksum|truncated"):
            load_checkpoint(tmp_path / "t.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"X" * 100)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.bin")

    def test_version_mismatch(self, trained, tmp_path):
        data = bytearray(checkpoint_bytes(trained)[:-32])
        struct.pack_into("<I", data, 8, 99)
        (tmp_path / "v.bin").write_bytes(bytes(data) + hashlib.sha256(data).digest())
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(tmp_path / "v.bin")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.bin")

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_any_flipped_byte_detected(self, trained, pos):
        data = bytearray(checkpoint_bytes(trained))
        pos = pos % len(data)
        data[pos] ^= 0xFF
        with pytest.raises(CheckpointError):
            parse_checkpoint(bytes(data))
