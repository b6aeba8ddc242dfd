import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piip import numerics as nx
from piip.config import BranchConfig
from piip.errors import ConfigError, NumericError
from piip.nn import Init
from piip.numerics import Tensor
from piip.vit_branch import (
    BranchFeature,
    VitBranch,
    VitLayer,
    interpolate_pos_embed,
    load_pos_embed,
    multi_head_attention,
    patch_embed,
    vit_layer,
)

TINY = BranchConfig(depth=4, dim=8, heads=2, patch=4, resolution=16)


def naive_attention(q, k, v, heads):
    b, nq, d = q.shape
    hd = d // heads
    out = np.zeros_like(q)
    for bi in range(b):
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            for i in range(nq):
                s = np.array([q[bi, i, sl] @ k[bi, j, sl] for j in range(k.shape[1])]) / math.sqrt(hd)
                w = np.exp(s - s.max())
                w /= w.sum()
                out[bi, i, sl] = sum(w[j] * v[bi, j, sl] for j in range(k.shape[1]))
    return out


def test_multi_head_attention_matches_loop_oracle():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((2, n, 6)) for n in (3, 5, 5))
    got = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads=3).data
    np.testing.assert_allclose(got, naive_attention(q, k, v, 3), rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(heads=st.sampled_from([1, 2, 4]), nq=st.integers(1, 6), nk=st.integers(1, 6),
       scale=st.floats(0.01, 30.0), seed=st.integers(0, 2**16))
def test_attention_rows_sum_to_one(heads, nq, nk, scale, seed):
    rng = np.random.default_rng(seed)
    q = Tensor(scale * rng.standard_normal((1, nq, 8)))
    k = Tensor(scale * rng.standard_normal((1, nk, 8)))
    v = Tensor(rng.standard_normal((1, nk, 8)))
    _, w = multi_head_attention(q, k, v, heads, return_weights=True)
    assert w.shape == (1, heads, nq, nk)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    assert (w.data >= 0).all()


def test_branch_feature_rejects_inconsistent_grid():
    with pytest.raises(ConfigError):
        BranchFeature(Tensor(np.zeros((1, 5, 4))), (2, 2), has_cls=False)
    f = BranchFeature(Tensor(np.zeros((1, 5, 4))), (2, 2), has_cls=True)
    assert f.spatial().shape == (1, 4, 4) and f.cls().shape == (1, 1, 4)


def test_to_map_is_row_major():
    tokens = np.arange(2 * 6 * 3, dtype=float).reshape(2, 6, 3)
    m = BranchFeature(Tensor(tokens), (2, 3)).to_map().data
    assert m.shape == (2, 3, 2, 3)
    assert m[1, 2, 1, 0] == tokens[1, 3, 2]


def test_patch_embed_matches_explicit_patch_loop():
    branch = VitBranch(Init(0, np.float64), TINY, 2)
    img = np.random.default_rng(0).standard_normal((2, 3, 16, 16))
    feat = patch_embed(Tensor(img), branch)
    w, b = branch.patch_embed.weight.data, branch.patch_embed.bias.data
    pos = branch.pos_embed.data
    for bi in range(2):
        for gy in range(4):
            for gx in range(4):
                patch = img[bi, :, gy * 4:(gy + 1) * 4, gx * 4:(gx + 1) * 4].reshape(-1)
                want = patch @ w + b + pos[gy * 4 + gx]
                np.testing.assert_allclose(feat.tokens.data[bi, gy * 4 + gx], want, rtol=1e-12)


def test_patch_embed_rejects_wrong_size_and_accepts_unbatched():
    branch = VitBranch(Init(0), TINY, 2)
    with pytest.raises(ConfigError):
        patch_embed(Tensor(np.zeros((1, 3, 20, 20), np.float32)), branch)
    assert patch_embed(Tensor(np.zeros((3, 16, 16), np.float32)), branch).tokens.shape == (1, 16, 8)


def test_cls_token_is_prepended():
    branch = VitBranch(Init(0), TINY.replace(use_cls_token=True), 1)
    f = branch.embed(Tensor(np.zeros((2, 3, 16, 16), np.float32)))
    assert f.has_cls and f.tokens.shape == (2, 17, 8)
    np.testing.assert_array_equal(f.cls().data[0, 0], branch.cls_token.data[0] + branch.pos_embed.data[0])


def test_segments_compose_to_full_run():
    branch = VitBranch(Init(3, np.float64), TINY, 2)
    img = Tensor(np.random.default_rng(2).standard_normal((1, 3, 16, 16)))
    x = branch.embed(img)
    for i in range(2):
        x = branch.segment(x, i)
    np.testing.assert_array_equal(x.tokens.data, branch.run(img).tokens.data)
    with pytest.raises(ConfigError):
        branch.segment(x, 2)


def test_uneven_block_split_rejected():
    with pytest.raises(ConfigError):
        VitBranch(Init(0), TINY, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_vit_layer_reports_non_finite_layer_index():
    layer = VitLayer(Init(0, np.float64), 8, 2, 32)
    bad = np.zeros((1, 4, 8))
    bad[0, 1, 2] = np.inf
    with pytest.raises(NumericError, match="layer 5"):
        vit_layer(BranchFeature(Tensor(bad), (2, 2)), layer, 5)


def test_interpolate_pos_embed_identity_and_cls_passthrough():
    pos = Tensor(np.random.default_rng(0).standard_normal((1 + 16, 3)))
    assert interpolate_pos_embed(pos, (4, 4), has_cls=True) is pos
    out = interpolate_pos_embed(pos, (8, 8), has_cls=True)
    assert out.shape == (65, 3)
    np.testing.assert_array_equal(out.data[0], pos.data[0])


def test_interpolate_pos_embed_constant_field_stays_constant():
    pos = Tensor(np.full((9, 2), 0.7))
    np.testing.assert_allclose(interpolate_pos_embed(pos, (5, 7)).data, 0.7, rtol=1e-14)


def test_load_pos_embed_resamples_foreign_grid():
    branch = VitBranch(Init(0, np.float64), TINY, 1)
    load_pos_embed(branch, np.ones((64, 8)))
    assert branch.pos_embed.shape == (16, 8)
    np.testing.assert_allclose(branch.pos_embed.data, 1.0)


def test_attention_weights_grad_flows_through_softmax():
    rng = np.random.default_rng(4)
    q, k, v = (Tensor(rng.standard_normal((1, 3, 4))) for _ in range(3))
    params = {"q": q, "k": k, "v": v}
    probe = Tensor(rng.standard_normal((1, 3, 4)))
    err = nx.grad_check(lambda: nx.sum(multi_head_attention(q, k, v, 2) * probe), params)
    assert err < 1e-7
