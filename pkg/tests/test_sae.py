import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlmlab import numerics as nx
from dlmlab import sae as S
from dlmlab.fidelity import explained_variance
from tests.conftest import make_sae


def full_sort_active(pre_row: np.ndarray, k: int) -> set[int]:
    relu = np.maximum(pre_row, 0.0)
    order = sorted(range(relu.size), key=lambda i: (-relu[i], i))
    return {i for i in order[:k] if relu[i] > 0}


def test_zero_input_gives_empty_code():
    sae = make_sae()
    lat = S.latents(sae, np.zeros(16))
    assert not lat.h.any() and lat.active.size == 0


def test_full_budget_is_plain_relu():
    sae = make_sae(k=32)
    x = np.random.default_rng(1).normal(size=(5, 16))
    assert np.array_equal(S.encode(sae, x), np.maximum(x @ sae.w_enc.data.T, 0.0))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), k=st.integers(1, 32))
def test_encode_matches_full_sort_oracle(seed, k):
    sae = make_sae(k=k, seed=seed % 7)
    x = np.random.default_rng(seed).normal(size=16)
    h = S.encode(sae, x)
    pre = sae.w_enc.data @ x + sae.b_enc.data
    assert set(np.flatnonzero(h)) == full_sort_active(pre, k)
    assert np.count_nonzero(h) <= k and np.all(h >= 0)
    lat = S.latents(sae, x)
    assert list(lat.active) == sorted(np.flatnonzero(h), key=lambda i: (-h[i], i))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000), c=st.floats(1.01, 50.0))
def test_active_set_scale_covariant(seed, c):
    sae = make_sae(k=5, seed=2)
    x = np.random.default_rng(seed).normal(size=16)
    assert set(S.latents(sae, c * x).active) == set(S.latents(sae, x).active)


def test_decode_examples():
    sae = make_sae()
    sae.b_dec.data[:] = np.arange(16.0)
    assert np.array_equal(S.decode(sae, np.zeros(32)), np.arange(16.0))
    e = np.zeros(32)
    e[7] = 1.0
    assert np.allclose(S.decode(sae, e), sae.atom(7) + np.arange(16.0))


def test_shape_and_budget_validation():
    with pytest.raises(nx.ShapeError):
        S.encode(make_sae(), np.zeros(15))
    with pytest.raises(nx.ShapeError):
        S.decode(make_sae(), np.zeros(31))
    with pytest.raises(ValueError):
        make_sae(width=8, k=9)
    with pytest.raises(ValueError):
        S.SaeParams.init(16, 8, 2, np.random.default_rng(0))


def test_init_convention():
    sae = make_sae()
    assert np.allclose(np.linalg.norm(sae.w_dec.data, axis=0), 1.0)
    assert np.array_equal(sae.w_enc.data, sae.w_dec.data.T)
    assert not sae.b_enc.data.any() and not sae.b_dec.data.any()


def low_rank(n, d, r, seed):
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(d, r)))[0]
    return rng.normal(size=(n, r)) @ basis.T


def test_low_rank_reconstruction():
    x = low_rank(8192, 16, 4, 3)
    cfg = S.SaeTrainConfig(width=64, k_act=8, epochs=15, batch_size=256, lr=1e-2)
    res = S.train_sae(x, cfg, np.random.default_rng(4))
    assert explained_variance(res.params, x) >= 0.95


def test_identity_sized_sae_on_whitened_data():
    x = np.random.default_rng(5).normal(size=(8192, 8))
    cfg = S.SaeTrainConfig(width=8, k_act=8, epochs=20, batch_size=256, lr=1e-2)
    res = S.train_sae(x, cfg, np.random.default_rng(6))
    assert explained_variance(res.params, x) >= 0.99


def test_training_properties():
    x = low_rank(2048, 16, 6, 7)
    cfg = S.SaeTrainConfig(width=48, k_act=6, epochs=4, batch_size=64, lr=5e-3)
    a = S.train_sae(x, cfg, np.random.default_rng(8))
    b = S.train_sae(x, cfg, np.random.default_rng(8))
    assert a.params.equal(b.params)
    # loss with lam=0 is exactly the reconstruction term
    assert a.losses == a.mse
    ma = np.convolve(a.mse, np.ones(20) / 20, mode="valid")
    assert ma[-1] < ma[0]
    blocks = [ma[i : i + 20].mean() for i in range(0, ma.size - 19, 20)]
    assert all(later <= earlier * 1.02 for earlier, later in zip(blocks, blocks[1:]))


def test_decoder_norm_after_every_step():
    x = low_rank(512, 16, 4, 9)
    sae = make_sae()
    for step in range(1, 6):
        res = S.train_sae(x, S.SaeTrainConfig(width=32, k_act=4, batch_size=128, max_steps=step, lr=0.05),
                          np.random.default_rng(0), init=sae)
        assert np.allclose(np.linalg.norm(res.params.w_dec.data, axis=0), 1.0, atol=1e-9)


def test_zero_epochs_returns_initialisation():
    x = low_rank(64, 16, 4, 10)
    init = make_sae()
    res = S.train_sae(x, S.SaeTrainConfig(width=32, k_act=4, epochs=0), np.random.default_rng(0), init=init)
    assert res.params.equal(init) and res.losses == []


def test_l1_term_added_when_lam_positive():
    x = nx.Tensor(low_rank(32, 16, 4, 11))
    sae = make_sae()
    loss0, mse0 = S.sae_loss(sae, x, 0.0)
    loss1, mse1 = S.sae_loss(sae, x, 0.5)
    h = S.encode(sae, x.data)
    assert mse0.item() == mse1.item()
    assert loss1.item() == pytest.approx(mse1.item() + 0.5 * np.abs(h).sum(axis=1).mean(), rel=1e-12)


def test_sae_losses_pass_gradient_check():
    x = nx.Tensor(np.random.default_rng(12).normal(size=(6, 16)))
    sae = make_sae(k=5)
    for lam in (0.0, 0.3):
        err = nx.finite_diff_check(lambda: S.sae_loss(sae, x, lam)[0], sae.parameters())
        assert err < 1e-3


def test_non_finite_training_aborts():
    x = np.full((8, 16), np.nan)
    with pytest.raises(Exception, match="step 0"):
        S.train_sae(x, S.SaeTrainConfig(width=32, k_act=4), np.random.default_rng(0))


def test_dead_latent_counts():
    x = np.random.default_rng(13).normal(size=(200, 16))
    sae = make_sae()
    assert S.dead_latent_count(sae, x, 0) == 0
    assert S.dead_latent_count(sae, x, len(x) + 1) == sae.width
    counts = np.zeros(sae.width, dtype=int)
    for row in x:
        counts[np.flatnonzero(S.encode(sae, row))] += 1
    assert S.dead_latent_count(sae, x, 15) == int((counts < 15).sum())
    with pytest.raises(ValueError):
        S.dead_latent_count(sae, np.zeros((0, 16)), 1)


# ---------------------------------------------------------------- harvesting and persistence


def test_select_positions():
    mask = np.array([True, False, True, True])
    assert list(S.select_positions(mask, "mask")) == [0, 2, 3]
    assert list(S.select_positions(mask, "unmask")) == [1]
    assert list(S.select_positions(np.ones(5, bool), "mask")) == list(range(5))
    assert list(S.select_positions(mask, "all")) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        S.select_positions(mask, "bogus")


def test_harvest_mask_unmask_partition(tiny_model):
    corpus = np.random.default_rng(0).integers(0, 10, size=500)
    stores = S.harvest_layers(tiny_model, corpus, [0, 1], ["mask", "unmask", "all"], 400,
                              np.random.default_rng(1))
    m, u, a = stores[(1, "mask")], stores[(1, "unmask")], stores[(1, "all")]
    last = min(m.sample_ids.max(), u.sample_ids.max(), a.sample_ids.max())
    for sid in range(last):
        pm = set(m.positions[m.sample_ids == sid])
        pu = set(u.positions[u.sample_ids == sid])
        assert not pm & pu
        assert pm | pu == set(range(8))
        assert sorted(a.positions[a.sample_ids == sid]) == list(range(8))
    assert all(s.count == 400 for s in stores.values())
    assert stores[(0, "mask")].protocol == m.protocol


def test_harvest_vectors_are_residuals(tiny_model):
    from dlmlab import dlm as D

    corpus = np.random.default_rng(2).integers(0, 10, size=300)
    rng = np.random.default_rng(3)
    store = S.harvest(tiny_model, corpus, 1, "mask", 30, rng, batch_size=4)
    rng = np.random.default_rng(3)
    batch = D.sample_windows(corpus, 4, 8, rng)
    draw = D.sample_corruption(batch, rng, tiny_model.config.mask_id)
    res = D.dlm_forward(tiny_model, draw.ids).residuals[1]
    first = store.sample_ids == 0
    expect = res[0, np.flatnonzero(draw.mask[0])]
    assert np.allclose(store.vectors[first], expect.astype(np.float32))
    assert np.allclose(store.rates[first], draw.t[0], atol=1e-7)


def test_harvest_validation(tiny_model):
    with pytest.raises(ValueError):
        S.harvest(tiny_model, np.zeros(100, dtype=int), 5, "mask", 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        S.harvest(tiny_model, np.zeros(100, dtype=int), 0, "mask", 0, np.random.default_rng(0))


def test_store_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    store = S.ActivationStore("bb", 3, 4, "unmask", "abc123", rng.normal(size=(5, 4)), rng.random(5),
                              np.arange(5), np.array([0, 0, 1, 1, 2]))
    p = tmp_path / "a.bin"
    S.save_store(store, p)
    back = S.load_store(p)
    assert (back.backbone, back.layer, back.d, back.selector, back.protocol) == ("bb", 3, 4, "unmask", "abc123")
    assert np.array_equal(back.vectors, store.vectors) and np.array_equal(back.sample_ids, store.sample_ids)
    assert p.read_bytes()[:4] == b"ACTS"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        S.load_store(p)


def test_sae_checkpoint_roundtrip(tmp_path):
    sae = make_sae(k=3)
    sae.meta = {"layer": 2, "selector": "mask", "backbone": "toy"}
    p = tmp_path / "s.bin"
    S.save_sae(sae, p)
    back = S.load_sae(p)
    assert back.k_act == 3 and back.meta == sae.meta
    for a, b in zip(back.parameters(), sae.parameters()):
        assert np.array_equal(a.data, b.data.astype(np.float32))
    assert p.read_bytes()[:4] == b"SAEC"
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(ValueError):
        S.load_sae(p)
