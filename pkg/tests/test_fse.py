import numpy as np
import pytest
import torch

from pdfnet import fse, reference
from pdfnet.errors import ShapeError


def naive_pool(p: np.ndarray) -> np.ndarray:
    """Replicate-padded stride-1 window mean, one output pixel at a time."""
    h, w = p.shape
    kh, kw = h // 8, w // 8
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros_like(p)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(kh):
                for dx in range(kw):
                    yy = min(max(y - top + dy, 0), h - 1)
                    xx = min(max(x - left + dx, 0), w - 1)
                    acc += p[yy, xx]
            out[y, x] = acc / (kh * kw)
    return out


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)[None, None]


# --------------------------------------------------------------------------- separation math


def test_pool_constant():
    p = torch.full((2, 1, 32, 24), 0.3, dtype=torch.float64)
    np.testing.assert_allclose(fse.pool_prediction(p).numpy(), 0.3, rtol=0, atol=1e-15)


def test_pool_unit_kernel_identity():
    p = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    assert torch.equal(fse.pool_prediction(p), p)


def test_pool_step_matches_naive():
    step = np.zeros((16, 16))
    step[:, 8:] = 1.0
    np.testing.assert_allclose(fse.pool_prediction(t(step))[0, 0].numpy(), naive_pool(step), atol=1e-15)


@pytest.mark.parametrize("shape", [(24, 40), (64, 64), (33, 17)])
def test_pool_random_matches_naive(shape):
    p = np.random.default_rng(0).random(shape)
    np.testing.assert_allclose(fse.pool_prediction(t(p))[0, 0].numpy(), naive_pool(p), atol=1e-14)


def test_pool_too_small():
    with pytest.raises(ShapeError):
        fse.pool_prediction(torch.zeros(1, 1, 7, 16))


def test_boundary_zero_when_equal():
    p = torch.rand(1, 1, 8, 8)
    assert fse.boundary_map(p, p).sum() == 0


def test_boundary_strict_at_tau():
    p = torch.tensor([[[[0.5, 0.6]]]], dtype=torch.float64)
    pp = torch.tensor([[[[0.4, 0.6]]]], dtype=torch.float64)
    diff = (p - pp).abs()[0, 0, 0, 0].item()
    expected = 1.0 if diff > 0.1 else 0.0
    assert fse.boundary_map(p, pp, 0.1)[0, 0, 0, 0].item() == expected
    q = torch.full((1, 1, 1, 1), 0.25)
    assert fse.boundary_map(q + 0.125, q, tau=0.125).item() == 0.0  # exactly representable
    assert fse.boundary_map(q + 0.25, q, tau=0.125).item() == 1.0


def test_boundary_band_on_step():
    step = np.zeros((8, 8))
    step[:, 4:] = 1
    pooled = fse.pool_prediction(t(step))
    b = fse.boundary_map(t(step), pooled)[0, 0].numpy()
    expected = (np.abs(step - pooled[0, 0].numpy()) > 0.1).astype(float)
    np.testing.assert_array_equal(b, expected)


def test_boundary_complement_symmetry():
    g = torch.Generator().manual_seed(3)
    p, pp = torch.rand(2, 1, 16, 16, generator=g), torch.rand(2, 1, 16, 16, generator=g)
    assert torch.equal(fse.boundary_map(p, pp), fse.boundary_map(1 - p, 1 - pp))


def test_boundary_shape_mismatch():
    with pytest.raises(ShapeError):
        fse.boundary_map(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 4))


def test_integrity_cases():
    p = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    assert torch.equal(fse.integrity_map(p, torch.zeros_like(p)), p)
    assert fse.integrity_map(p, torch.ones_like(p)).abs().max() == 0
    b = (torch.rand(1, 1, 8, 8) > 0.5).double()
    assert torch.equal(fse.integrity_map(p, b), p * (1 - b))


def test_separation_invariants_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        p = torch.rand(1, 1, 16, 16, generator=g)
        art = fse.separate_boundary(p, 4)
        assert (art.boundary * art.integrity).abs().max() == 0
        assert bool(((art.integrity + art.boundary) >= p).all())
        assert bool(((art.integrity >= 0) & (art.integrity <= 1)).all())


def test_patch_scores_zero():
    assert fse.patch_boundary_scores(torch.zeros(2, 1, 16, 16), 8).sum() == 0


def test_patch_scores_single_pixel():
    b = torch.zeros(1, 1, 16, 16)
    b[0, 0, 0, 0] = 1
    expected = torch.zeros(1, 64)
    expected[0, 0] = 1
    assert torch.equal(fse.patch_boundary_scores(b, 8), expected)


@pytest.mark.parametrize("g", [2, 4, 8])
def test_patch_scores_match_oracle(g):
    rng = torch.Generator().manual_seed(g)
    for _ in range(20):
        b = (torch.rand(3, 1, 32, 32, generator=rng) > 0.98).double()
        np.testing.assert_array_equal(fse.patch_boundary_scores(b, g).numpy(), reference.patch_scores(b.numpy(), g))


def test_patch_scores_magnitude_invariant():
    b = (torch.rand(1, 1, 16, 16) > 0.9).float()
    assert torch.equal(fse.patch_boundary_scores(b, 4), fse.patch_boundary_scores(b * 0.3, 4))


def test_patch_scores_non_divisible():
    with pytest.raises(ShapeError):
        fse.patch_boundary_scores(torch.zeros(1, 1, 10, 10), 4)


# --------------------------------------------------------------------------- CoA


def test_coa_single_key_weight_is_one():
    block = fse.CoABlock(8, 8, head_count=2, zero_init=False)
    w = block.attention_weights(torch.randn(1, 1, 8), torch.randn(1, 1, 8))
    assert torch.equal(w, torch.ones_like(w))


def test_coa_zero_init_identity():
    block = fse.CoABlock(16, 12, head_count=4)
    q = torch.randn(2, 6, 16)
    assert torch.equal(fse.coa_forward(block, q, torch.randn(2, 10, 12)), q)


def test_coa_shapes_and_finite_gradients():
    torch.manual_seed(0)
    block = fse.CoABlock(16, 16, head_count=4, zero_init=False)
    q = torch.randn(2, 6, 16, requires_grad=True)
    c = torch.randn(2, 10, 16, requires_grad=True)
    out = fse.coa_forward(block, q, c)
    assert out.shape == (2, 6, 16) and torch.isfinite(out).all()
    out.square().sum().backward()
    for p in [q, c, *block.parameters()]:
        assert p.grad is not None and torch.isfinite(p.grad).all()


def test_coa_finite_on_zero_input():
    block = fse.CoABlock(8, 8, head_count=2, zero_init=False)
    q = torch.zeros(1, 3, 8, requires_grad=True)
    out = block(q, torch.zeros(1, 4, 8))
    out.sum().backward()
    assert torch.isfinite(q.grad).all()


def test_coa_matches_explicit_attention():
    torch.manual_seed(1)
    block = fse.CoABlock(8, 8, head_count=2, zero_init=False).double()
    q, c = torch.randn(1, 5, 8, dtype=torch.float64), torch.randn(1, 7, 8, dtype=torch.float64)
    w = block.attention_weights(q, c)
    v = block._heads(block.to_v(block.norm_kv(c)))
    mixed = (w @ v).transpose(1, 2).reshape(q.shape)
    q2 = q + block.norm_attn(block.to_out(mixed))
    expected = q2 + block.ffn(block.norm_ffn(q2))
    np.testing.assert_allclose(block(q, c).detach().numpy(), expected.detach().numpy(), atol=1e-12)


def test_coa_dim_mismatch():
    block = fse.CoABlock(8, 8, head_count=2)
    with pytest.raises(ShapeError):
        block(torch.zeros(1, 3, 6), torch.zeros(1, 3, 8))
    with pytest.raises(ShapeError):
        block(torch.zeros(1, 3, 8), torch.zeros(1, 3, 5))
    with pytest.raises(ShapeError):
        fse.CoABlock(10, 8, head_count=4)


# --------------------------------------------------------------------------- FSE


def feats(c=16, h=32, w=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(2, c, h, w, generator=g) for _ in range(3)]


@pytest.mark.parametrize("prev_size", [None, 16, 32])
def test_fse_zero_init_identity(prev_size):
    f_v, f_d, f_p = feats()
    prev = None if prev_size is None else torch.rand(2, 1, prev_size, prev_size)
    out = fse.FSE(16)(f_v, f_d, f_p, prev, 8)
    assert torch.equal(out.visual, f_v) and torch.equal(out.depth, f_d) and torch.equal(out.patch, f_p)


def test_fse_shapes_random_blocks():
    torch.manual_seed(0)
    f_v, f_d, f_p = feats()
    block = fse.FSE(16, zero_init=False)
    out = block(f_v, f_d, f_p, torch.rand(2, 1, 32, 32), 8)
    for a, b in ((out.visual, f_v), (out.depth, f_d), (out.patch, f_p)):
        assert a.shape == b.shape and torch.isfinite(a).all()
    assert not torch.equal(out.visual, f_v)
    assert out.boundary is not None and out.boundary.patch_scores.shape == (2, 64)


class Spy:
    def __init__(self):
        self.queries = []

    def __call__(self, q, c):
        self.queries.append(q)
        return q


def test_patch_gate_factor_one_vs_two():
    f_v, f_d, f_p = feats(h=32, w=32)
    spies = [Spy() for _ in range(4)]
    flat = torch.full((2, 1, 32, 32), 0.4)  # constant prediction: no boundary, Bd = 0
    fse.fse_forward(f_v, f_d, f_p, flat, spies, 8)
    fse.fse_forward(f_v, f_d, f_p, None, spies, 8)  # bootstrap: Bd = 1
    q_zero, q_one = spies[0].queries
    np.testing.assert_allclose(q_one.numpy(), 2 * q_zero.numpy(), rtol=1e-6)
    tokens = f_p.flatten(2).transpose(1, 2)
    np.testing.assert_allclose(q_zero.numpy(), tokens.numpy(), rtol=1e-6)


def test_depth_query_uses_integrity_map():
    f_v, f_d, f_p = feats(h=32, w=32)
    spies = [Spy() for _ in range(4)]
    prev = torch.rand(2, 1, 32, 32)
    out = fse.fse_forward(f_v, f_d, f_p, prev, spies, 8)
    s = out.boundary.integrity
    expected = (f_d * (1 + s)).flatten(2).transpose(1, 2)
    np.testing.assert_allclose(spies[1].queries[0].numpy(), expected.numpy(), rtol=1e-6)


def test_fse_pools_large_stages():
    f_v, f_d, f_p = feats(c=8, h=64, w=64)
    spies = [Spy() for _ in range(4)]
    out = fse.fse_forward(f_v, f_d, f_p, torch.rand(2, 1, 64, 64), spies, 8, token_limit=32)
    assert out.pooled_visual.shape[-2:] == (32, 32)
    assert spies[0].queries[0].shape == (2, 32 * 32, 8)


def test_token_factor_respects_patches():
    assert fse.token_factor(64, 8, True, 32) == 2
    assert fse.token_factor(48, 8, True, 16) == 3
    assert fse.token_factor(40, 8, True, 16) == 5  # 3 and 4 do not divide the patch side of 5
    with pytest.raises(ShapeError):
        fse.token_factor(36, 8, True)


def test_fse_mismatched_features():
    f_v, f_d, _ = feats()
    with pytest.raises(ShapeError):
        fse.FSE(16)(f_v, f_d, torch.zeros(2, 16, 16, 16), None, 8)


def test_fse_stage_not_divisible_by_grid():
    f_v, f_d, f_p = feats(h=36, w=36)
    with pytest.raises(ShapeError):
        fse.FSE(16)(f_v, f_d, f_p, torch.rand(2, 1, 36, 36), 8)
