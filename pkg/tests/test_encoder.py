import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import forward_oracle
from pyramidcir.encoder import (Encoder, EncoderConfig, checkpoint_digest, last_token_rep, load_checkpoint,
                                save_checkpoint, yes_probability)
from pyramidcir.errors import ConfigError, DataError, DimensionError, InputError, LengthError
from pyramidcir.tensor import mean, square, tsum
from pyramidcir.text import ImageRef

CFG = EncoderConfig(vocab_size=12, yes_id=3, no_id=4, pad_id=0, sep_id=1, n_layers=2, D=8, n_heads=2,
                    max_seq_len=64, P=2, M=2, image_shape=(8, 8, 3), dtype="float64")


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(5)
    return {k: rng.random((8, 8, 3)) for k in ("a", "b", "c")}


@pytest.fixture(scope="module")
def model():
    return Encoder(CFG, seed=3)


ITEMS = [
    [ImageRef("a"), [1, 5, 6, 7]],
    [[2, 8, 9]],
    [ImageRef("b"), [1, 10], ImageRef("c"), [11]],
]


def test_tokens_per_image(model):
    assert model.tokens_per_image == 16 + 4


@pytest.mark.parametrize("i", range(len(ITEMS)))
def test_forward_matches_loop_oracle(model, images, i):
    states, logits = model.run(ITEMS, images.__getitem__)
    want_states, want_logits = forward_oracle(model, ITEMS[i], images.__getitem__)
    n = int(states.lengths[i])
    got = np.stack([h.data[i, :n] for h in states.hidden])
    np.testing.assert_allclose(got, want_states, rtol=0, atol=1e-10)
    np.testing.assert_allclose(logits.data[i], want_logits, rtol=0, atol=1e-10)


def test_hooks_match_oracle(model, images):
    p = np.linspace(-1, 1, CFG.D)
    hooks = {1: lambda h: h + p}
    states, logits = model.run(ITEMS[:1], images.__getitem__, hooks=hooks)
    want_states, want_logits = forward_oracle(model, ITEMS[0], images.__getitem__, hooks=hooks)
    np.testing.assert_allclose(states.hidden[1].data[0], want_states[1], atol=1e-10)
    np.testing.assert_allclose(logits.data[0], want_logits, atol=1e-10)


def test_identity_hook_is_a_no_op(model, images):
    _, base = model.run(ITEMS, images.__getitem__)
    _, same = model.run(ITEMS, images.__getitem__, hooks={0: lambda h: None, 1: lambda h: h})
    assert base.data.tobytes() == same.data.tobytes()


def test_padding_does_not_leak(model, images):
    _, batch = model.run(ITEMS, images.__getitem__)
    for i, item in enumerate(ITEMS):
        _, alone = model.run([item], images.__getitem__)
        np.testing.assert_allclose(batch.data[i], alone.data[0], atol=1e-12)


def test_batch_order_equivariance(model, images):
    _, a = model.run(ITEMS, images.__getitem__)
    perm = [2, 0, 1]
    _, b = model.run([ITEMS[i] for i in perm], images.__getitem__)
    np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)


def test_gradients_reach_every_parameter(model, images):
    model.zero_grad()
    states, logits = model.run(ITEMS, images.__getitem__)
    loss = tsum(square(logits))
    loss = loss + mean(square(states.last_token(0)))
    loss.backward()
    missing = [n for n, p in model.params.items() if p.grad is None or not np.any(p.grad)]
    model.zero_grad()
    assert not missing


def test_last_token_rep(model, images):
    states, _ = model.run(ITEMS, images.__getitem__)
    r = last_token_rep(states, -1, item=1)
    assert r.layer == 1 and np.array_equal(r.vector, states.hidden[1].data[1, 2])
    with pytest.raises(InputError):
        last_token_rep(states, 2)


def test_length_error(model, images):
    with pytest.raises(LengthError, match="item 0"):
        model.run([[list(range(2, 12)) * 7]], images.__getitem__)


def test_empty_inputs(model, images):
    with pytest.raises(InputError):
        model.run([], images.__getitem__)
    with pytest.raises(InputError):
        model.run([[]], images.__getitem__)


def test_out_of_vocabulary(model, images):
    with pytest.raises(DataError):
        model.run([[[99]]], images.__getitem__)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(12, 3, 3, 0, 1)
    with pytest.raises(ConfigError):
        EncoderConfig(12, 3, 4, 0, 1, D=10, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(12, 3, 4, 0, 1, P=3, image_shape=(16, 16, 3))
    with pytest.raises(ConfigError):
        CFG.layer_index("top")
    assert CFG.layer_index("middle") == [1] and CFG.layer_index("all") == [0, 1]


# ---------------------------------------------------------------- yes probability

def test_yes_probability_uniform():
    cfg = EncoderConfig(4, 0, 1, 2, 3, D=8, n_heads=2, P=2, M=1, image_shape=(4, 4, 3))
    assert yes_probability(np.zeros(4), cfg) == pytest.approx(0.25, abs=1e-12)
    assert yes_probability(np.zeros(4), cfg, renormalize=True) == pytest.approx(0.5, abs=1e-12)


def test_yes_probability_peaked():
    cfg = EncoderConfig(4, 0, 1, 2, 3, D=8, n_heads=2, P=2, M=1, image_shape=(4, 4, 3))
    z = np.array([2.0, 0.0, 0.0, 0.0])
    assert yes_probability(z, cfg) == pytest.approx(math.e ** 2 / (math.e ** 2 + 3), abs=1e-12)
    assert yes_probability(z, cfg, renormalize=True) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=12, max_size=12))
def test_yes_probability_is_a_probability(z):
    z = np.array(z)
    p = yes_probability(z, CFG)
    assert 0.0 <= p <= 1.0
    assert yes_probability(z + 7.0, CFG) == pytest.approx(p, rel=1e-9, abs=1e-300)


def test_yes_probability_shape_check():
    with pytest.raises(DimensionError):
        yes_probability(np.zeros(5), CFG)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, model, images):
    save_checkpoint(tmp_path / "m.ckpt", model, meta={"role": "x"})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"role": "x"} and loaded.cfg == model.cfg
    _, a = model.run(ITEMS, images.__getitem__)
    _, b = loaded.run(ITEMS, images.__getitem__)
    assert a.data.tobytes() == b.data.tobytes()
    save_checkpoint(tmp_path / "n.ckpt", loaded, meta={"role": "x"})
    assert checkpoint_digest(tmp_path / "m.ckpt") == checkpoint_digest(tmp_path / "n.ckpt")


def test_same_seed_same_bytes(tmp_path):
    save_checkpoint(tmp_path / "a", Encoder(CFG, seed=9))
    save_checkpoint(tmp_path / "b", Encoder(CFG, seed=9))
    save_checkpoint(tmp_path / "c", Encoder(CFG, seed=10))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes() != (tmp_path / "c").read_bytes()


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" + bytes(20))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x")
