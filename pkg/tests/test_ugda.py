import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semiseg.data import one_hot
from semiseg.ugda import (L2U, U2L, Geometry, PatchGrid, StrongAugConfig, adjust_brightness,
                          copy_paste_mix, patch_uncertainty, sample_geometry, select_topk_patches,
                          strong_augment, weak_augment)

from oracles import patch_means_loop


def _find_identity_seed():
    for seed in range(100):
        if sample_geometry(np.random.default_rng(seed)).identity:
            return seed
    raise AssertionError("no identity seed in range")


def test_identity_geometry_seed_leaves_pair_unchanged():
    seed = _find_identity_seed()
    x = torch.rand(1, 8, 8)
    y = torch.randint(0, 2, (8, 8))
    xa, ya = weak_augment(x, y, seed)
    assert torch.equal(xa, x) and torch.equal(ya, y)


def test_double_flip_is_identity():
    x = torch.rand(1, 6, 6)
    g = Geometry(flip_h=True, flip_v=True)
    assert torch.equal(g.apply(g.apply(x)), x)


def test_weak_augment_preserves_foreground_count():
    x = torch.rand(1, 16, 16)
    y = (torch.rand(16, 16) > 0.7).long()
    for seed in range(100):
        _, ya = weak_augment(x, y, seed)
        assert ya.sum() == y.sum()


def test_weak_augment_moves_image_and_mask_together():
    # image equals the mask, so any misalignment shows up
    y = (torch.rand(12, 12) > 0.5).long()
    for seed in range(20):
        xa, ya = weak_augment(y[None].float(), y, seed)
        assert torch.equal(xa[0].long(), ya)


def test_weak_augment_commutes_with_one_hot():
    y = torch.randint(0, 3, (8, 8))
    for seed in range(10):
        x = torch.rand(1, 8, 8)
        _, ya = weak_augment(x, y, seed)
        _, oh = weak_augment(x, one_hot(y, 3)[0], seed)
        assert torch.equal(one_hot(ya, 3)[0], oh)


def test_strong_augment_output_is_clipped():
    x = torch.rand(1, 16, 16)
    for seed in range(30):
        out = strong_augment(x, seed, StrongAugConfig(brightness=0.9, noise_std=0.5))
        assert out.min() >= 0 and out.max() <= 1


def test_strong_augment_zero_config_is_identity():
    x = torch.rand(1, 16, 16)
    assert torch.equal(strong_augment(x, 3, StrongAugConfig.zero()), x)


def test_strong_augment_is_seeded():
    x = torch.rand(1, 16, 16)
    assert torch.equal(strong_augment(x, 11), strong_augment(x, 11))
    assert not torch.equal(strong_augment(x, 11), strong_augment(x, 12))


def test_brightness_shifts_histogram():
    x = torch.rand(1, 32, 32) * 0.5
    shifted = adjust_brightness(x, 0.2)
    h0 = torch.histc(x, bins=10, min=0, max=1)
    h1 = torch.histc(shifted, bins=10, min=0, max=1)
    assert torch.equal(h0[:5], h1[2:7])


def test_patch_means_constant_map():
    pg = patch_uncertainty(torch.full((16, 16), 0.3))
    assert torch.allclose(pg.means, torch.full((16,), 0.3))


def test_patch_means_single_hot_patch():
    m = torch.zeros(16, 16)
    m[4:8, 8:12] = 1.0
    pg = patch_uncertainty(m)
    expected = torch.zeros(16)
    expected[1 * 4 + 2] = 1.0
    assert torch.equal(pg.means, expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_patch_means_match_loop(ph, pw, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(4 * ph, 4 * pw, generator=g, dtype=torch.float64)
    got = patch_uncertainty(m).means.tolist()
    assert got == pytest.approx(patch_means_loop(m.tolist()), abs=1e-12)


def test_patch_uncertainty_rejects_untileable():
    with pytest.raises(ValueError):
        patch_uncertainty(torch.rand(10, 12))


def _grid(vals):
    return PatchGrid(torch.tensor(vals, dtype=torch.float64), 16, 16)


def test_topk_examples():
    vals = [0.0] * 16
    vals[3], vals[7], vals[12] = 0.9, 0.5, 0.7
    assert select_topk_patches(_grid(vals), 3) == [3, 12, 7]
    assert select_topk_patches(_grid(vals), 1) == [3]


def test_topk_ties_prefer_lower_index():
    assert select_topk_patches(_grid([0.5] * 16), 5) == [0, 1, 2, 3, 4]


def test_topk_rejects_bad_k():
    for k in (0, 17):
        with pytest.raises(ValueError):
            select_topk_patches(_grid([0.0] * 16), k)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=16, max_size=16), st.integers(1, 16))
def test_topk_matches_sort_oracle(vals, k):
    sel = select_topk_patches(_grid(vals), k)
    v = torch.tensor(vals, dtype=torch.float64).tolist()
    oracle = [i for _, i in sorted((-x, i) for i, x in enumerate(v))][:k]
    assert sel == oracle
    rest = [v[i] for i in range(16) if i not in sel]
    assert len(set(sel)) == k
    if rest:
        assert min(v[i] for i in sel) >= max(rest)


def _pair(seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    x_l = torch.rand(1, size, size, generator=g)
    x_u = torch.rand(1, size, size, generator=g) + 2  # disjoint ranges mark provenance
    y_l = torch.ones(size, size, dtype=torch.long)
    y_u = torch.zeros(size, size, dtype=torch.long)
    return (x_l, y_l), (x_u, y_u)


def test_copy_paste_without_patches_returns_host():
    lab, unl = _pair()
    m = copy_paste_mix(lab, unl, [], L2U)
    assert torch.equal(m.image, unl[0]) and torch.equal(m.target, unl[1])
    m = copy_paste_mix(lab, unl, [], U2L)
    assert torch.equal(m.image, lab[0]) and not m.provenance.any()


def test_copy_paste_all_patches_returns_source():
    lab, unl = _pair()
    m = copy_paste_mix(lab, unl, range(16), L2U)
    assert torch.equal(m.image, lab[0]) and torch.equal(m.target, lab[1])
    assert m.provenance.all()


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(0, 15), max_size=16), st.sampled_from([L2U, U2L]), st.integers(0, 99))
def test_copy_paste_provenance_is_pixelwise_exact(patches, direction, seed):
    lab, unl = _pair(seed)
    m = copy_paste_mix(lab, unl, sorted(patches), direction, ids=("l", "u"))
    src, host = (lab, unl) if direction == L2U else (unl, lab)
    prov = m.provenance
    assert torch.equal(m.image[:, prov], src[0][:, prov])
    assert torch.equal(m.image[:, ~prov], host[0][:, ~prov])
    assert torch.equal(m.target[prov], src[1][prov])
    assert torch.equal(m.target[~prov], host[1][~prov])
    assert int(prov.sum()) == 16 * len(patches)
    assert m.source_ids == ("l", "u") and m.direction == direction


def test_copy_paste_rejects_bad_direction_and_shapes():
    lab, unl = _pair()
    with pytest.raises(ValueError):
        copy_paste_mix(lab, unl, [0], "sideways")
    with pytest.raises(ValueError):
        copy_paste_mix(lab, (unl[0][..., :8, :8], unl[1][:8, :8]), [0], L2U)
