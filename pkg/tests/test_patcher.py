import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import patches_loop
from pyramidcir.errors import ConfigError, DataError
from pyramidcir.patcher import (Image, PatchEmbedding, PyramidConfig, embed_patches, flatten_patches,
                                png_to_container, read_image, token_count, unflatten_level, write_image)


@st.composite
def valid_setups(draw):
    P = draw(st.integers(1, 4))
    M = draw(st.integers(1, 4))
    unit = P * 2 ** (M - 1)
    H = unit * draw(st.integers(1, 3))
    W = unit * draw(st.integers(1, 3))
    C = draw(st.integers(1, 3))
    return P, M, H, W, C


def test_single_level_matches_standard_patching():
    ps = flatten_patches(np.zeros((8, 8, 1)), PyramidConfig(P=2, M=1, D=4))
    assert len(ps.levels) == 1
    assert ps.levels[0].patches.shape == (16, 4)


def test_two_levels_enumerated():
    ps = flatten_patches(np.zeros((8, 8, 1)), PyramidConfig(P=2, M=2, D=4))
    assert [lv.patches.shape for lv in ps.levels] == [(16, 4), (4, 16)]
    assert ps.total == 20
    assert token_count(PyramidConfig(2, 1, 4), 8, 8) == 16
    assert token_count(PyramidConfig(2, 2, 4), 8, 8) == 20


def test_divisibility_boundary_names_level():
    flatten_patches(np.zeros((8, 8, 1)), PyramidConfig(P=2, M=3, D=4))
    with pytest.raises(ConfigError, match="level 3"):
        flatten_patches(np.zeros((8, 8, 1)), PyramidConfig(P=2, M=4, D=4))


def test_rectangular_reading_is_a_stub():
    with pytest.raises(NotImplementedError):
        PyramidConfig(rectangular_levels=True)


@pytest.mark.parametrize("kw", [dict(P=0), dict(M=0), dict(D=0)])
def test_config_bounds(kw):
    with pytest.raises(ConfigError):
        PyramidConfig(**kw)


@given(valid_setups())
def test_token_count_closed_form(setup):
    P, M, H, W, C = setup
    L = H * W // P ** 2
    assert token_count(PyramidConfig(P, M, 8), H, W) == sum(L // 4 ** i for i in range(M))


@given(valid_setups())
def test_increments_shrink_by_four(setup):
    P, M, H, W, C = setup
    counts = [token_count(PyramidConfig(P, m, 8), H, W) for m in range(1, M + 1)]
    assert all(b > a for a, b in zip(counts, counts[1:]))
    deltas = [counts[0]] + [b - a for a, b in zip(counts, counts[1:])]
    for prev, cur in zip(deltas, deltas[1:]):
        assert prev == 4 * cur


@given(valid_setups(), st.integers(0, 2 ** 31))
def test_flatten_unflatten_round_trip(setup, seed):
    P, M, H, W, C = setup
    img = np.random.default_rng(seed).random((H, W, C))
    ps = flatten_patches(img, PyramidConfig(P, M, 8))
    for i in range(M):
        assert np.array_equal(unflatten_level(ps, i), img)
        assert ps.levels[i].patches.shape[1] == (2 ** i * P) ** 2 * C


def test_raster_order_matches_loop_oracle(rng):
    img = rng.random((8, 12, 3))
    ps = flatten_patches(img, PyramidConfig(P=2, M=2, D=4))
    for lv in ps.levels:
        np.testing.assert_array_equal(lv.patches, patches_loop(img, lv.side))


def test_zero_image_gives_per_level_bias(rng):
    cfg = PyramidConfig(P=2, M=2, D=5)
    emb = PatchEmbedding(cfg, 8, 8, 1, rng)
    for i, b in enumerate(emb.biases):
        b.data[:] = i + 1.0
        emb.positions[i].data[:] = 0.0
    seq = embed_patches(flatten_patches(np.zeros((8, 8, 1)), cfg), emb)
    np.testing.assert_array_equal(seq.tokens.data[:16], 1.0)
    np.testing.assert_array_equal(seq.tokens.data[16:], 2.0)
    assert [m.pyramid_level for m in seq.meta] == [0] * 16 + [1] * 4
    assert [m.position for m in seq.meta[16:]] == [0, 1, 2, 3]


def test_embedding_matches_matmul_oracle(rng):
    cfg = PyramidConfig(P=2, M=2, D=6)
    emb = PatchEmbedding(cfg, 8, 8, 3, rng)
    img = rng.random((8, 8, 3))
    want = np.concatenate([patches_loop(img, 2 * 2 ** i) @ emb.weights[i].data + emb.biases[i].data
                           + emb.positions[i].data for i in range(2)])
    got = embed_patches(flatten_patches(img, cfg), emb).tokens.data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(emb.embed_batch(img[None]).data[0], want, rtol=0, atol=1e-12)


def test_single_level_is_plain_patch_embedding(rng):
    cfg = PyramidConfig(P=4, M=1, D=3)
    emb = PatchEmbedding(cfg, 8, 8, 1, rng)
    img = rng.random((8, 8, 1))
    want = patches_loop(img, 4) @ emb.weights[0].data + emb.biases[0].data + emb.positions[0].data
    np.testing.assert_allclose(embed_patches(flatten_patches(img, cfg), emb).tokens.data, want, atol=1e-12)


def test_weight_shape_mismatch(rng):
    cfg = PyramidConfig(P=2, M=2, D=4)
    emb = PatchEmbedding(cfg, 8, 8, 1, rng)
    emb.weights[1].data = np.zeros((3, 4))
    with pytest.raises(ConfigError):
        embed_patches(flatten_patches(np.zeros((8, 8, 1)), cfg), emb)


def test_image_values_validated():
    with pytest.raises(DataError):
        Image(np.full((4, 4, 1), 1.5))
    with pytest.raises(DataError):
        Image(np.zeros((4, 4)))


def test_container_round_trip(tmp_path, rng):
    px = rng.random((8, 4, 3)).astype(np.float32)
    write_image(tmp_path / "a.cimg", px)
    raw = (tmp_path / "a.cimg").read_bytes()
    assert raw[:4] == b"CIMG" and len(raw) == 20 + px.size * 4
    assert np.array_equal(read_image(tmp_path / "a.cimg").pixels, px.astype(np.float64))


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" + bytes(20))
    with pytest.raises(DataError):
        read_image(tmp_path / "x")


def test_png_conversion(tmp_path, rng):
    from PIL import Image as PILImage

    arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    PILImage.fromarray(arr).save(tmp_path / "a.png")
    img = png_to_container(tmp_path / "a.png", tmp_path / "a.cimg")
    assert (img.H, img.W, img.C) == (8, 8, 3)
    np.testing.assert_allclose(read_image(tmp_path / "a.cimg").pixels, arr / 255.0, atol=1e-7)
