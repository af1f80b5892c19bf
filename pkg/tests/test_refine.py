import numpy as np
import pytest
from hypothesis import given, strategies as st

from pyramidcir.backbone import backbone_config, group_loss, prompt_parts
from pyramidcir.dataio.corpus import generate_corpus
from pyramidcir.dataio.prompts import build_vocabulary
from pyramidcir.encoder import Encoder
from pyramidcir.errors import ConfigError, DataError, InputError, ParameterError
from pyramidcir.matcher import RetrievalResult
from pyramidcir.refine import (RefineConfig, fuse, normalize_scores, read_rerank, refinement_score,
                               refinement_scores, rerank, write_rerank)
from pyramidcir.repe import InjectionConfig, RAugRep
from pyramidcir.tensor import Tensor
from pyramidcir.text import ImageRef


def first_stage(raw, ids=None):
    """RetrievalResult whose order is the descending-score order of ``raw``."""
    raw = np.asarray(raw, dtype=np.float64)
    ids = ids or [f"c{i:03d}" for i in range(len(raw))]
    order = sorted(range(len(raw)), key=lambda i: (-raw[i], ids[i]))
    return RetrievalResult("q", [ids[i] for i in order], [float(raw[i]) for i in order], len(raw))


# ---------------------------------------------------------------- fusion

def test_fuse_examples():
    assert fuse(0.9, 0.5, 0.06) == pytest.approx(0.524, abs=1e-12)
    assert fuse(0.9, 0.5, 0.0) == 0.5
    assert fuse(0.9, 0.5, 1.0) == 0.9


@pytest.mark.parametrize("lam", [-0.01, 1.01, float("nan")])
def test_fuse_rejects_lambda(lam):
    with pytest.raises(ParameterError):
        fuse(0.5, 0.5, lam)
    with pytest.raises(ParameterError):
        RefineConfig(lam=lam)


def test_normalizations():
    s = np.array([-0.5, 0.0, 0.5])
    np.testing.assert_allclose(normalize_scores(s, "minmax"), [0, 0.5, 1])
    np.testing.assert_allclose(normalize_scores(s, "affine"), [0.25, 0.5, 0.75])
    np.testing.assert_array_equal(normalize_scores(s, "none"), s)
    np.testing.assert_array_equal(normalize_scores(np.ones(3), "minmax"), np.zeros(3))
    with pytest.raises(ConfigError):
        normalize_scores(s, "zscore")


# ---------------------------------------------------------------- rerank

def test_two_candidate_dominance():
    res = first_stage([0.3, 0.3], ["a", "b"])
    for lam in (1e-6, 0.06, 0.5, 1.0):
        assert rerank(res, [0.1, 0.9], lam).ids == ["b", "a"]


def test_matches_fused_sort_oracle(rng):
    for _ in range(50):
        raw = rng.uniform(-1, 1, 10)
        s_r = rng.uniform(0, 1, 10)
        res = first_stage(raw)
        out = rerank(res, s_r, 0.06)
        s_m = (np.array(res.scores) - min(res.scores)) / (max(res.scores) - min(res.scores))
        fused = 0.06 * s_r + 0.94 * s_m
        assert out.ids == [res.ids[i] for i in sorted(range(10), key=lambda i: (-fused[i], res.ids[i]))]


def test_tail_keeps_order(rng):
    res = first_stage(rng.uniform(-1, 1, 20))
    out = rerank(res, rng.uniform(0, 1, 5), 0.5)
    assert out.ids[5:] == res.ids[5:] and sorted(out.ids[:5]) == sorted(res.ids[:5])
    assert len(out.scored) == 5


def test_rerank_input_errors():
    res = first_stage([0.1, 0.2, 0.3])
    with pytest.raises(InputError):
        rerank(res, [0.5] * 4, 0.1)
    with pytest.raises(InputError):
        rerank(res, [], 0.1)
    with pytest.raises(InputError):
        rerank(res, [1.5], 0.1)


scores = st.lists(st.tuples(st.floats(-1, 1), st.floats(0, 1)), min_size=1, max_size=25)


@given(scores)
def test_zero_lambda_is_identity(pairs):
    res = first_stage([a for a, _ in pairs])
    assert rerank(res, [b for _, b in pairs], 0.0).ids == res.ids


@given(scores, st.floats(0, 1))
def test_output_is_a_permutation(pairs, lam):
    res = first_stage([a for a, _ in pairs])
    assert sorted(rerank(res, [b for _, b in pairs], lam).ids) == sorted(res.ids)


@given(scores, st.floats(1e-9, 1 - 1e-9, exclude_min=True), st.data())
def test_dominance(pairs, lam, data):
    res = first_stage([a for a, _ in pairs])
    raw = dict(zip(res.ids, res.scores))
    s_r = data.draw(st.lists(st.floats(0, 1), min_size=len(res.ids), max_size=len(res.ids)))
    out = rerank(res, s_r, lam)
    r = dict(zip(res.ids, s_r))
    pos = {c: i for i, c in enumerate(out.ids)}
    for a in res.ids:
        for b in res.ids:
            if r[a] >= r[b] and raw[a] >= raw[b] and (r[a] > r[b] or raw[a] > raw[b]):
                assert pos[a] < pos[b]


@given(scores, st.floats(1e-6, 1.0), st.integers(0, 24), st.floats(0, 1))
def test_raising_s_r_never_lowers_rank(pairs, lam, k, bump):
    res = first_stage([a for a, _ in pairs])
    s_r = np.array([b for _, b in pairs])
    k %= len(s_r)
    before = rerank(res, s_r, lam).ids.index(res.ids[k])
    s_r2 = s_r.copy()
    s_r2[k] = s_r[k] + bump * (1 - s_r[k])
    after = rerank(res, s_r2, lam).ids.index(res.ids[k])
    assert after <= before


def test_rerank_file_round_trip(tmp_path, rng):
    out = [rerank(first_stage(rng.uniform(-1, 1, 8)), rng.uniform(0, 1, 4), 0.3)]
    write_rerank(tmp_path / "r.jsonl", out, "fp")
    assert [r.to_dict() for r in read_rerank(tmp_path / "r.jsonl")] == [r.to_dict() for r in out]
    (tmp_path / "x").write_text('{"format": "nope"}\n')
    with pytest.raises(DataError):
        read_rerank(tmp_path / "x")


# ---------------------------------------------------------------- refinement scores

@pytest.fixture(scope="module")
def setup():
    corpus = generate_corpus(4, 8, pool_size=16, n_val=4)
    vocab = build_vocabulary()
    cfg = backbone_config(vocab, n_layers=2, D=16, n_heads=2, P=4, M=2, image_shape=(16, 16, 3))
    return corpus, vocab, Encoder(cfg, seed=2)


def test_scores_are_probabilities_and_deterministic(setup):
    corpus, vocab, model = setup
    t = corpus.val[0]
    cands = corpus.pool[:6]
    a = refinement_scores(model, vocab, t.ref_id, t.text, cands, corpus.image, batch_size=4)
    b = refinement_scores(model, vocab, t.ref_id, t.text, cands, corpus.image, batch_size=50)
    assert a.shape == (6,) and np.all((a >= 0) & (a <= 1))
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert refinement_score(model, vocab, t.ref_id, t.text, cands[0], corpus.image) == pytest.approx(a[0], abs=1e-12)


def test_zero_alpha_scores_bit_identical(setup, rng):
    corpus, vocab, model = setup
    t = corpus.val[1]
    rep = RAugRep(rng.normal(size=(2, 16)), 3)
    base = refinement_scores(model, vocab, t.ref_id, t.text, corpus.pool[:5], corpus.image)
    same = refinement_scores(model, vocab, t.ref_id, t.text, corpus.pool[:5], corpus.image, rep,
                             InjectionConfig(alpha=0.0))
    moved = refinement_scores(model, vocab, t.ref_id, t.text, corpus.pool[:5], corpus.image, rep,
                              InjectionConfig(alpha=2.0))
    assert base.tobytes() == same.tobytes()
    assert not np.array_equal(base, moved)


def test_prompt_holds_both_images(setup):
    _, vocab, _ = setup
    parts = prompt_parts("r", "c", "make it red", vocab, path="the reference shows")
    assert [p for p in parts if isinstance(p, ImageRef)] == [ImageRef("r"), ImageRef("c")]
    assert vocab.sep_id in parts[-1]


def test_group_loss_prefers_target():
    yes, no = 0, 1
    good = np.zeros((6, 3))
    good[[0, 3], yes] = 5.0
    good[[1, 2, 4, 5], no] = 5.0
    bad = good[[1, 0, 2, 4, 3, 5]]
    lg = group_loss(Tensor(good), [3, 3], yes, no, 1.0).item()
    lb = group_loss(Tensor(bad), [3, 3], yes, no, 1.0).item()
    assert lg < lb
