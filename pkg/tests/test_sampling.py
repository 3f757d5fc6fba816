import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyctr import numtensor as nt
from cyctr.sampling import flatten_grid, make_rng, mask_guided_sample, unflatten


def _shots(rng, masks, d=4):
    return [nt.Tensor(rng.normal(size=(m.size, d))) for m in masks]


def test_exhausted_background_gives_short_sample(rng):
    masks = [np.ones((4, 4), dtype=np.uint8)]
    s = mask_guided_sample(_shots(rng, masks), masks, 10, seed=0)
    assert len(s) == 5 and s.short
    assert np.all(s.labels == 1)


def test_three_foreground_pixels_with_default_budget(rng):
    mask = np.zeros((30, 30), dtype=np.uint8)
    mask[0, :3] = 1
    s = mask_guided_sample(_shots(rng, [mask]), [mask], 600, seed=1)
    assert (s.labels == 1).sum() == 3
    assert (s.labels == 0).sum() == 597
    assert not s.short


def test_same_seed_same_sample(rng):
    masks = [(rng.random((6, 6)) < 0.3).astype(np.uint8) for _ in range(2)]
    feats = _shots(rng, masks)
    a, b = (mask_guided_sample(feats, masks, 12, seed=5) for _ in range(2))
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert np.array_equal(a.labels, b.labels) and a.sources == b.sources and a.short == b.short
    c = mask_guided_sample(feats, masks, 12, seed=6)
    assert c.sources != a.sources


def test_labels_and_tokens_match_sources(rng):
    masks = [(rng.random((5, 7)) < 0.4).astype(np.uint8) for _ in range(3)]
    feats = _shots(rng, masks)
    s = mask_guided_sample(feats, masks, 20, seed=2)
    assert len(set(s.sources)) == len(s.sources)
    for t, (k, r, c) in enumerate(s.sources):
        assert s.labels[t] == masks[k][r, c]
        assert np.array_equal(s.tokens.data[t], feats[k].data[r * 7 + c])


def test_foreground_only_mode(rng):
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[:3] = 1
    s = mask_guided_sample(_shots(rng, [mask]), [mask], 8, seed=0, foreground_only=True)
    assert len(s) == 8 and np.all(s.labels == 1)


def test_errors(rng):
    mask = np.ones((2, 2))
    with pytest.raises(ValueError, match="empty"):
        mask_guided_sample([], [], 4, 0)
    with pytest.raises(ValueError, match="does not match"):
        mask_guided_sample([nt.Tensor(np.ones((5, 3)))], [mask], 4, 0)
    with pytest.raises(ValueError):
        mask_guided_sample([nt.Tensor(np.ones((4, 3)))], [mask], 1, 0)


def test_sample_gradient_flows_to_picked_tokens(rng):
    mask = np.zeros((3, 3), dtype=np.uint8)
    mask[1, 1] = 1
    feat = nt.Parameter(rng.normal(size=(9, 2)))
    s = mask_guided_sample([feat], [mask], 4, seed=0)
    s.tokens.sum().backward()
    picked = {r * 3 + c for _, r, c in s.sources}
    assert np.array_equal(feat.grad[:, 0] != 0, np.isin(np.arange(9), list(picked)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(2, 40), st.integers(0, 10**9), st.floats(0.0, 1.0))
def test_foreground_share_contract(k, n_s, seed, p_fg):
    rng = np.random.default_rng(seed)
    masks = [(rng.random((5, 6)) < p_fg).astype(np.uint8) for _ in range(k)]
    s = mask_guided_sample(_shots(rng, masks), masks, n_s, seed)
    n_fg_total = sum(int(m.sum()) for m in masks)
    n_bg_total = sum(m.size for m in masks) - n_fg_total
    assert (s.labels == 1).sum() == min(n_s // 2, n_fg_total)
    assert (s.labels == 0).sum() == min(n_s - min(n_s // 2, n_fg_total), n_bg_total)
    if n_bg_total >= n_s:
        assert (s.labels == 1).sum() <= n_s // 2


def test_stratum_uniformity_frequency():
    mask = np.zeros((20, 10), dtype=np.uint8)
    mask[:10] = 1  # 100 foreground pixels, 100 background
    feats = [nt.Tensor(np.zeros((200, 1)))]
    counts = np.zeros(200)
    for seed in range(10_000):
        s = mask_guided_sample(feats, [mask], 20, seed=seed)
        for _, r, c in s.sources:
            counts[r * 10 + c] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq[:100] - 0.1) <= 0.01)
    assert np.all(np.abs(freq[100:] - 0.1) <= 0.01)


def test_kshot_pooling_ignores_shot_identity():
    # shot 0 has 10 fg pixels, shot 1 has 30: per-pixel rates must agree
    masks = [np.zeros((8, 8), dtype=np.uint8), np.zeros((8, 8), dtype=np.uint8)]
    masks[0].reshape(-1)[:10] = 1
    masks[1].reshape(-1)[:30] = 1
    feats = [nt.Tensor(np.zeros((64, 1))) for _ in masks]
    hits = np.zeros((2, 64))
    for seed in range(4000):
        for k, r, c in mask_guided_sample(feats, masks, 16, seed=seed).sources:
            hits[k, r * 8 + c] += 1
    rate0, rate1 = hits[0, :10].mean() / 4000, hits[1, :30].mean() / 4000
    assert abs(rate0 - 0.2) < 0.01 and abs(rate1 - 0.2) < 0.01


def test_flatten_round_trip_and_index_map(rng):
    x = rng.normal(size=(2, 3, 4))
    seq = flatten_grid(nt.Tensor(x))
    assert (seq.height, seq.width) == (2, 3)
    assert np.array_equal(seq.tokens.data[4], x[1, 1])
    assert np.array_equal(unflatten(seq).data, x)
    one = flatten_grid(nt.Tensor(np.full((1, 1, 3), 2.0)))
    assert one.tokens.shape == (1, 3) and np.all(one.tokens.data == 2.0)


def test_rng_streams_are_independent_and_reproducible():
    a = make_rng(3, 1).random(4)
    assert np.array_equal(a, make_rng(3, 1).random(4))
    assert not np.array_equal(a, make_rng(3, 2).random(4))
    assert isinstance(make_rng(3).bit_generator, np.random.Philox)
