import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepcue import cue
from deepcue import ndiff as nd
from deepcue.errors import ColdStartError, ConfigError, DimensionError, SamplingError
from deepcue.interactions import BinaryInteractions
from oracles import max_rel_error, naive_affine, naive_conv1d, naive_maxpool, numeric_grad

# wide enough that ReLU stacks with zero biases do not collapse to all-zero outputs
SMALL = cue.CueConfig(
    embed_dim=8,
    feature_dim=4,
    negatives=2,
    channels=(6, 6, 6, 6, 6),
    pools=(2, 2, 1, 1, 1),
    mel_bins=8,
    context_frames=8,
)


def toy_clusters():
    dense = np.zeros((5, 8))
    dense[:3, :4] = 1
    dense[3:, 4:] = 1
    return BinaryInteractions.from_dense(dense)


def toy_mels(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return {i: rng.normal(size=(8, 8)) for i in range(n)}


def full_hinge(params, cfg, b, mels):
    """Mean hinge over every (user, positive, negative) triple; no sampling noise."""
    users, slots = [], []
    for u, pos in enumerate(b.positives):
        negs = np.setdiff1d(np.arange(b.num_items), pos)
        for i in pos:
            users.append(u)
            slots.append(np.concatenate([[i], negs]))
    side = np.stack([mels[i] for i in range(b.num_items)]) if params.kind == "cue" else np.arange(b.num_items)
    return float(np.mean(cue._chunked_losses(params.arrays, cfg, np.array(users), np.array(slots), side)))


# --- config ------------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ConfigError):
        cue.CueConfig(negatives=0)
    with pytest.raises(ConfigError):
        cue.CueConfig(margin=2.0)
    with pytest.raises(ConfigError):
        cue.CueConfig(channels=(8, 8, 8, 8))
    with pytest.raises(ConfigError):
        cue.CueConfig(feature_dim=0)
    assert cue.CueConfig().pooled_frames == 4


# --- hinge -------------------------------------------------------------------


def test_hinge_examples():
    assert cue.hinge_loss(1.0, np.full(20, -1.0), 0.2) == 0.0
    assert cue.hinge_loss(0.3, np.full(20, 0.3), 0.2) == pytest.approx(4.0, abs=1e-12)
    assert cue.hinge_loss(0.5, np.array([0.4, 0.45]), 0.2) == pytest.approx(0.25, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1, 1),
    st.lists(st.floats(-1, 1), min_size=1, max_size=25),
    st.floats(0.01, 1.99),
)
def test_hinge_bounds(rp, rn, margin):
    loss = float(cue.hinge_loss(rp, np.array(rn), margin))
    assert 0.0 <= loss <= len(rn) * (margin + 2) + 1e-12


def test_separated_tuple_has_zero_gradient():
    tape = nd.GradTape()
    rp = tape.leaf(np.array([0.9]), "rp")
    rn = tape.leaf(np.array([[0.1, 0.7]]), "rn")
    loss = nd.reduce_sum(cue.hinge_loss(rp, rn, 0.2))
    g = nd.grad(tape, loss)
    assert float(loss.value) == 0.0
    assert not g["rp"].any() and not g["rn"].any()


# --- forward -----------------------------------------------------------------


def test_user_embed_hand_forward():
    cfg = cue.CueConfig(embed_dim=2, feature_dim=2, channels=(1,) * 5, pools=(1,) * 5, mel_bins=1, context_frames=1)
    p = {
        "user.embedding": np.array([[1.0, -2.0], [3.0, 4.0]]),
        "user.hidden.W": np.eye(2),
        "user.hidden.b": np.zeros(2),
        "user.out.W": np.eye(2),
        "user.out.b": np.array([0.5, 0.0]),
    }
    # relu([1, -2]) = [1, 0]; + bias
    assert np.array_equal(cue.user_embed(p, 0), [1.5, 0.0])
    assert np.array_equal(cue.user_embed(p, 1), [3.5, 4.0])
    assert np.array_equal(cue.user_embed(p, 1), cue.user_embed(p, 1))
    assert cfg.pooled_frames == 1


def test_user_gradient_touches_only_its_row():
    params = cue.init_params(SMALL, num_users=6)
    tape = nd.GradTape()
    pv = tape.params(params.arrays)
    loss = nd.reduce_sum(cue.user_embed(pv, 3))
    g = nd.grad(tape, loss)["user.embedding"]
    assert g[3].any()
    assert not np.delete(g, 3, axis=0).any()


def test_zero_input_gives_output_bias():
    params = cue.init_params(cue.CueConfig(channels=(16,) * 5), num_users=2)
    bias = np.random.default_rng(0).normal(size=50)
    params.arrays["audio.out.b"] = bias
    out = cue.item_embed(params.arrays, cue.CueConfig(channels=(16,) * 5), np.zeros((128, 128)))
    assert np.array_equal(out, bias)


def naive_audio_tower(p, x, pools):
    h = x
    for n, w in enumerate(pools):
        h = naive_conv1d(h, p[f"audio.conv{n}.K"], p[f"audio.conv{n}.b"], "same")
        h = naive_maxpool(np.maximum(h, 0.0), w)
    feat = [max(row) for row in h]
    return naive_affine(feat, p["audio.out.W"], p["audio.out.b"])


@pytest.mark.parametrize("seed", range(3))
def test_audio_tower_matches_layerwise_oracle(seed):
    params = cue.init_params(cue.CueConfig(**{**SMALL.as_dict(), "seed": seed}), num_users=1)
    x = np.random.default_rng(seed).normal(size=(8, 8))
    got = cue.item_embed(params.arrays, SMALL, x)
    np.testing.assert_allclose(got, naive_audio_tower(params.arrays, x, SMALL.pools), rtol=0, atol=1e-10)
    batched = cue.item_embed(params.arrays, SMALL, np.stack([x, 2 * x]))
    np.testing.assert_allclose(batched[0], got, rtol=0, atol=1e-12)


def test_item_embed_shape_check():
    params = cue.init_params(SMALL, num_users=1)
    with pytest.raises(DimensionError):
        cue.item_embed(params.arrays, SMALL, np.zeros((8, 9)))


def test_pool_stride_shift_invariance():
    # identity-ish tower: 1 channel, kernel 1, unit weights, pools of total stride 4
    cfg = cue.CueConfig(embed_dim=2, feature_dim=1, channels=(1,) * 5, kernel_size=1,
                        pools=(2, 2, 1, 1, 1), mel_bins=1, context_frames=16)
    p = cue.init_params(cfg, num_users=1).arrays
    for n in range(5):
        p[f"audio.conv{n}.K"] = np.ones((1, 1, 1))
    p["audio.out.W"] = np.ones((1, 1))
    x = np.zeros((1, 16))
    x[0, 5] = 3.0
    shifted = np.roll(x, 4, axis=1)
    a = cue.item_embed(p, cfg, x)
    b = cue.item_embed(p, cfg, shifted)
    assert np.array_equal(a, b) and a[0] == 3.0


def test_relevance_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cue.relevance(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cue.relevance(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0, abs=1e-15)
    w = np.array([1.0, 4.0, -0.5])
    assert cue.relevance(v, 5 * w) == pytest.approx(cue.relevance(v, w), abs=1e-14)


# --- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_tuple_loss_gradient_matches_finite_differences(seed):
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "embed_dim": 4, "channels": (3,) * 5, "seed": seed, "margin": 1.5})
    rng = np.random.default_rng(100 + seed)
    params = cue.init_params(cfg, num_users=3).arrays
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    x = rng.normal(size=(3, 8, 8))
    users = np.array([1])
    slots = np.array([[0, 1, 2]])

    tape = nd.GradTape()
    pv = tape.params(params)
    analytic = nd.grad(tape, cue.batch_loss(pv, cfg, users, slots, x))

    def f():
        return float(cue.batch_loss(params, cfg, users, slots, x))

    worst = max(max_rel_error(analytic[k], numeric_grad(f, params[k])) for k in params)
    assert worst < 1e-4


def test_one_tuple_gradient_is_row_sparse():
    params = cue.init_params(SMALL, num_users=7)
    x = np.random.default_rng(1).normal(size=(3, 8, 8))
    tape = nd.GradTape()
    pv = tape.params(params.arrays)
    g = nd.grad(tape, cue.batch_loss(pv, SMALL, np.array([4]), np.array([[0, 1, 2]]), x))["user.embedding"]
    assert not np.delete(g, 4, axis=0).any()


# --- sampling ----------------------------------------------------------------


def test_sample_negatives_forced_set():
    pool = np.arange(10)
    pos = np.array([1, 4, 7])
    got = cue.sample_negatives(pos, pool, 7, np.random.default_rng(0))
    assert sorted(got.tolist()) == [0, 2, 3, 5, 6, 8, 9]


def test_sample_negatives_never_positive_and_seeded():
    rng = np.random.default_rng(0)
    pool = np.arange(40)
    pos = rng.choice(40, size=15, replace=False)
    draws = np.concatenate([cue.sample_negatives(pos, pool, 5, rng) for _ in range(20000)])
    assert len(draws) == 10**5
    assert not np.isin(draws, pos).any()
    a = cue.sample_negatives(pos, pool, 5, np.random.default_rng(3))
    b = cue.sample_negatives(pos, pool, 5, np.random.default_rng(3))
    assert np.array_equal(a, b)
    with pytest.raises(SamplingError):
        cue.sample_negatives(pos, pool, 26, rng)


# --- training ----------------------------------------------------------------


def test_zero_lr_leaves_parameters_unchanged():
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "base_lr": 0.0, "max_epochs": 1})
    init = cue.init_params(cfg, 5)
    res = cue.train(toy_clusters(), toy_mels(), cfg, np.arange(8))
    assert len(res.history) == 1
    for k, v in init.arrays.items():
        assert np.array_equal(res.params.arrays[k], v)


def test_zero_epochs_returns_initial():
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "max_epochs": 0})
    res = cue.train(toy_clusters(), toy_mels(), cfg, np.arange(8))
    assert res.history == []
    for k, v in cue.init_params(cfg, 5).arrays.items():
        assert np.array_equal(res.params.arrays[k], v)


def test_training_is_bit_deterministic():
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "max_epochs": 3, "batch_size": 4})
    mels = {i: np.random.default_rng(i).normal(size=(8, 20)) for i in range(8)}
    a = cue.train(toy_clusters(), mels, cfg, np.arange(8))
    b = cue.train(toy_clusters(), mels, cfg, np.arange(8))
    for k in a.params.arrays:
        assert a.params.arrays[k].tobytes() == b.params.arrays[k].tobytes()
    assert repr(a.history) == repr(b.history)  # valid_loss is nan without a validation set


@pytest.mark.parametrize("kind", ["cue", "cue-index"])
def test_toy_clusters_overfit(kind):
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "max_epochs": 200, "batch_size": 4, "base_lr": 0.05})
    b, mels = toy_clusters(), toy_mels()
    before = full_hinge(cue.init_params(cfg, 5, 8, kind), cfg, b, mels)
    res = cue.train(b, mels, cfg, np.arange(8), kind=kind)
    after = full_hinge(res.params, cfg, b, mels)
    assert before > 0
    assert after < 0.1 * before


def test_early_stopping_returns_best_epoch():
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "max_epochs": 6, "batch_size": 4, "patience": 1, "negatives": 1})
    dense = np.zeros((5, 10))
    dense[:3, [0, 1, 2, 8]] = 1
    dense[3:, [4, 5, 6, 9]] = 1
    b = BinaryInteractions.from_dense(dense)
    lines = []
    res = cue.train(b, toy_mels(10), cfg, np.arange(8), valid=b, valid_items=[8, 9], log=lines.append)
    assert lines[0] == cue.LOG_HEADER
    assert len(lines) == len(res.history) + 1
    best = min(h["valid_loss"] for h in res.history)
    assert res.history[res.best_epoch - 1]["valid_loss"] == best


def test_empty_training_set():
    with pytest.raises(ConfigError):
        cue.train(toy_clusters(), toy_mels(), SMALL, np.array([], dtype=np.int64))


# --- index variant and scoring ---------------------------------------------------


def test_index_variant_mirrors_user_side():
    p = cue.build_index_item_variant(SMALL, num_users=5, num_items=9)
    for name in ("hidden.W", "hidden.b", "out.W", "out.b"):
        assert p.arrays[f"item.{name}"].shape == p.arrays[f"user.{name}"].shape
    assert p.arrays["item.embedding"].shape == (9, SMALL.embed_dim)
    assert not any(k.startswith("audio.") for k in p.arrays)


def test_index_variant_cold_start():
    cfg = cue.CueConfig(**{**SMALL.as_dict(), "max_epochs": 1})
    dense = np.zeros((5, 10))
    dense[:3, :4] = 1
    dense[3:, 4:8] = 1
    dense[0, 9] = 1
    res = cue.train(BinaryInteractions.from_dense(dense), None, cfg, np.arange(8), kind="cue-index")
    assert cue.clip_embeddings(res.params, cfg, {}, [0, 7]).shape == (2, 4)
    with pytest.raises(ColdStartError):
        cue.clip_embeddings(res.params, cfg, {}, [9])


def test_clip_embedding_is_grid_mean():
    params = cue.init_params(SMALL, 2)
    rng = np.random.default_rng(2)
    mels = {0: rng.normal(size=(8, 8)), 1: rng.normal(size=(8, 19))}
    feats = cue.clip_embeddings(params, SMALL, mels, [0, 1])
    np.testing.assert_allclose(feats[0], cue.item_embed(params.arrays, SMALL, mels[0]), atol=1e-12)
    pair = (cue.item_embed(params.arrays, SMALL, mels[1][:, :8]) + cue.item_embed(params.arrays, SMALL, mels[1][:, 8:16])) / 2
    np.testing.assert_allclose(feats[1], pair, atol=1e-12)


def test_score_user_items_matches_relevance_loop():
    params = cue.init_params(SMALL, 4)
    feats = np.random.default_rng(3).normal(size=(6, 4))
    got = cue.score_user_items(params, SMALL, 2, feats)
    yu = cue.user_embed(params.arrays, 2)
    expect = [cue.relevance(yu, f) for f in feats]
    np.testing.assert_allclose(got, expect, atol=1e-12)
    dup = cue.score_user_items(params, SMALL, 2, np.vstack([feats, feats[:1]]))
    np.testing.assert_allclose(dup[:6], got, atol=0)
    assert dup[6] == got[0]


@pytest.mark.parametrize("seed", range(5))
def test_ranking_invariant_to_positive_scaling(seed):
    params = cue.init_params(cue.CueConfig(**{**SMALL.as_dict(), "seed": seed}), 3)
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(10, 4))
    scales = rng.uniform(0.1, 10, size=(10, 1))
    for u in range(3):
        a = cue.score_user_items(params, SMALL, u, feats)
        b = cue.score_user_items(params, SMALL, u, feats * scales)
        assert np.array_equal(np.argsort(a, kind="stable"), np.argsort(b, kind="stable"))
