import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rcps import losses as L

import oracles


def rand_probs(rng, B, C, n):
    z = rng.normal(size=(B, C, n, n, n)) * 2
    return torch.softmax(torch.from_numpy(z), 1)


def rand_logits(rng, B, C, n):
    return torch.from_numpy(rng.normal(size=(B, C, n, n, n)) * 2)


def voxel_map(*vecs):
    """Tensor of shape (1, C, 1, 1, 1) per vector."""
    return torch.tensor(vecs, dtype=torch.float64).reshape(1, -1, 1, 1, 1)


def finite_difference(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = fn(x).item()
        flat[i] = old - h
        fm = fn(x).item()
        flat[i] = old
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_matches(fn, x, rtol=1e-3):
    x = x.clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(fn(x), x)
    with torch.no_grad():
        gf = finite_difference(fn, x.detach().clone())
    err = (ga - gf).norm() / gf.norm().clamp_min(1e-12)
    assert err < rtol, f"relative gradient error {err:.2e}"


# ---------------------------------------------------------------------------
# hand values
# ---------------------------------------------------------------------------


class TestHandValues:
    def test_kl_example(self):
        d = L.kl_map(voxel_map(0.5, 0.5), voxel_map(0.9, 0.1))
        assert d.item() == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-6)
        assert d.item() == pytest.approx(0.3681, abs=1e-4)

    def test_kl_one_hot(self):
        d = L.kl_map(voxel_map(0.5, 0.5), voxel_map(1.0, 0.0))
        assert d.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_kl_identical_is_zero(self):
        p = rand_probs(np.random.default_rng(0), 2, 3, 3)
        assert L.kl_map(p, p).abs().max().item() < 1e-7

    def test_sharpen(self):
        s = L.sharpen(voxel_map(1.0, 0.0), 0.5).flatten()
        np.testing.assert_allclose(s.numpy(), [0.8808, 0.1192], atol=1e-4)

    def test_sharpen_identity_temperature(self):
        z = rand_logits(np.random.default_rng(1), 1, 3, 2)
        torch.testing.assert_close(L.sharpen(z, 1.0), torch.softmax(z, 1))

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_sharpen_rejects_bad_temperature(self, T):
        with pytest.raises(ValueError):
            L.sharpen(torch.zeros(1, 2, 1, 1, 1), T)

    def test_pseudo_sup_one_hot_target(self):
        # very large logit gap -> sharpened target is one-hot on class 0
        lp = L.pseudo_sup_loss(voxel_map(0.9, 0.1), voxel_map(50.0, 0.0), 0.5)
        assert lp.item() == pytest.approx(-math.log(0.9), abs=1e-6)
        assert lp.item() == pytest.approx(0.1054, abs=1e-4)

    def test_pseudo_sup_uniform(self):
        lp = L.pseudo_sup_loss(voxel_map(0.5, 0.5), voxel_map(0.0, 0.0), 0.5)
        assert lp.item() == pytest.approx(math.log(2), abs=1e-7)

    def test_pseudo_sup_equal_is_entropy(self):
        z = rand_logits(np.random.default_rng(2), 1, 3, 2)
        tgt = L.sharpen(z, 0.5)
        ent = -(tgt * torch.log(tgt)).sum(1)
        torch.testing.assert_close(L.pseudo_sup_loss(tgt, z, 0.5), ent, atol=1e-6, rtol=0)

    def test_urp_composite_example(self):
        # reference (0.9, 0.1) equal to its sharpened target: pick logits with T = 1
        z = voxel_map(math.log(0.9), math.log(0.1))
        loss = L.uncertainty_rectified_loss(voxel_map(0.5, 0.5), z, torch.softmax(z, 1), T=1.0)
        d = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
        assert loss.item() == pytest.approx(math.exp(-d) * math.log(2) + d, abs=1e-6)
        assert loss.item() == pytest.approx(0.8472, abs=1e-3)

    def test_urp_zero_divergence(self):
        z = rand_logits(np.random.default_rng(3), 1, 2, 2)
        p = torch.softmax(z, 1)
        # T=1: target == reference == view
        ent = -(p * torch.log(p + L.EPS)).sum(1).mean()
        assert L.uncertainty_rectified_loss(p, z, p, 1.0).item() == pytest.approx(ent.item(), abs=1e-7)

    def test_consistency_examples(self):
        assert L.consistency_loss(voxel_map(0.8, 0.2), voxel_map(0.6, 0.4)).item() == pytest.approx(
            1 - 0.56 / (math.hypot(0.8, 0.2) * math.hypot(0.6, 0.4)), abs=1e-9)
        assert L.consistency_loss(voxel_map(0.8, 0.2), voxel_map(0.6, 0.4)).item() == pytest.approx(0.0582, abs=1e-4)
        assert L.consistency_loss(voxel_map(1.0, 0.0), voxel_map(0.0, 1.0)).item() == pytest.approx(1.0)
        p = rand_probs(np.random.default_rng(4), 1, 3, 2)
        assert L.consistency_loss(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_seg_loss_perfect(self):
        y = torch.from_numpy(np.random.default_rng(5).integers(0, 3, size=(1, 4, 4, 4)))
        p = torch.nn.functional.one_hot(y, 3).movedim(-1, 1).double()
        assert L.seg_loss(p, y).item() < 1e-6

    def test_seg_loss_uniform_ce(self):
        y = torch.from_numpy(np.random.default_rng(6).integers(0, 2, size=(1, 3, 3, 3)))
        p = torch.full((1, 2, 3, 3, 3), 0.5, dtype=torch.float64)
        assert L.cross_entropy(p, y).item() == pytest.approx(math.log(2), abs=1e-7)

    def test_seg_loss_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.seg_loss(torch.full((1, 2, 3, 3, 3), 0.5, dtype=torch.float64), torch.zeros(1, 3, 3, 4, dtype=torch.long))

    def test_rectified_all_equal(self):
        z = rand_logits(np.random.default_rng(7), 1, 3, 2)
        tgt = L.sharpen(z, 1.0)
        ent = -(tgt * torch.log(tgt + L.EPS)).sum(1).mean()
        val = L.rectified_pseudo_loss(tgt, tgt, z, 1.0)
        assert val.item() == pytest.approx(2 * ent.item(), abs=1e-7)


# ---------------------------------------------------------------------------
# brute-force oracle agreement
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("C", [2, 3])
def test_losses_match_oracles(seed, C):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    B = int(rng.integers(1, 3))
    p1, p2 = rand_probs(rng, B, C, n), rand_probs(rng, B, C, n)
    z = rand_logits(rng, B, C, n)
    y = torch.from_numpy(rng.integers(0, C, size=(B, n, n, n)))
    T = float(rng.uniform(0.3, 1.5))
    P1, P2, Z, Y = p1.numpy(), p2.numpy(), z.numpy(), y.numpy()
    assert L.seg_loss(p1, y).item() == pytest.approx(oracles.ce_dice(P1, Y), abs=1e-6)
    np.testing.assert_allclose(L.pseudo_sup_loss(p1, z, T).numpy(), oracles.pseudo_map(P1, Z, T), atol=1e-6)
    np.testing.assert_allclose(L.kl_map(p1, p2).numpy(), oracles.kl_map(P1, P2), atol=1e-6)
    ref = torch.softmax(z, 1)
    assert L.uncertainty_rectified_loss(p1, z, ref, T).item() == pytest.approx(oracles.urp(P1, Z, T), abs=1e-6)
    assert L.consistency_loss(p1, p2).item() == pytest.approx(oracles.cosine_distance(P1, P2), abs=1e-6)
    assert L.rectified_pseudo_loss(p1, p2, z, T).item() == pytest.approx(
        oracles.rectified_pseudo(P1, P2, Z, T), abs=1e-6)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@pytest.fixture
def small():
    rng = np.random.default_rng(11)
    return dict(
        p1=rand_probs(rng, 1, 3, 2), p2=rand_probs(rng, 1, 3, 2), z=rand_logits(rng, 1, 3, 2),
        y=torch.from_numpy(rng.integers(0, 3, size=(1, 2, 2, 2))),
    )


def test_gradients_match_finite_differences(small):
    p1, p2, z, y = small["p1"], small["p2"], small["z"], small["y"]
    assert_grad_matches(lambda p: L.seg_loss(p, y), p1)
    assert_grad_matches(lambda p: L.pseudo_sup_loss(p, z, 0.5).sum(), p1)
    assert_grad_matches(lambda p: L.kl_map(p, p2).sum(), p1)
    assert_grad_matches(lambda p: L.kl_map(p2, p).sum(), p1)
    assert_grad_matches(lambda p: L.uncertainty_rectified_loss(p, z, torch.softmax(z, 1), 0.5), p1)
    assert_grad_matches(lambda p: L.consistency_loss(p, p2), p1)
    assert_grad_matches(lambda p: L.rectified_pseudo_loss(p, p2, z, 0.5), p1)
    assert_grad_matches(lambda p: L.rectified_pseudo_loss(p1, p, z, 0.5), p2)


def test_gradients_through_softmax(small):
    z, y = small["z"], small["y"]
    z2 = z.flip(1)
    assert_grad_matches(lambda v: L.seg_loss(torch.softmax(v, 1), y), z)
    assert_grad_matches(lambda v: L.rectified_pseudo_loss(torch.softmax(v, 1), torch.softmax(z2, 1), z, 0.5), z2 * 0.3)


def test_stop_gradient_contract(small):
    z = small["z"].clone().requires_grad_(True)
    v1 = small["p1"].clone().requires_grad_(True)
    v2 = small["p2"].clone().requires_grad_(True)
    loss = L.rectified_pseudo_loss(v1, v2, z, 0.5)
    loss.backward()
    assert z.grad is None or z.grad.abs().sum().item() == 0.0
    assert v1.grad.norm() > 0 and v2.grad.norm() > 0


def test_stop_gradient_graph_has_no_path_to_logits(small):
    z = small["z"].clone().requires_grad_(True)
    v1 = small["p1"].clone().requires_grad_(True)
    loss = L.rectified_pseudo_loss(v1, small["p2"], z, 0.5)
    assert torch.autograd.grad(loss, z, allow_unused=True)[0] is None


def test_stop_gradient_finite_difference_probe(small):
    z = small["z"].clone()
    fd = finite_difference(lambda t: L.rectified_pseudo_loss(small["p1"], small["p2"], t, 0.5), z)
    # the objective does depend on z (targets), but no gradient is propagated there
    assert fd.abs().max() > 0
    zg = z.clone().requires_grad_(True)
    v1 = small["p1"].clone().requires_grad_(True)
    L.rectified_pseudo_loss(v1, small["p2"], zg, 0.5).backward()
    assert zg.grad is None
    assert v1.grad.norm() > 0


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_kl_nonnegative_and_urp_bound(seed, C):
    rng = np.random.default_rng(seed)
    p, q = rand_probs(rng, 1, C, 2), rand_probs(rng, 1, C, 2)
    z = rand_logits(rng, 1, C, 2)
    assert L.kl_map(p, q).min().item() >= -10 * L.EPS
    loss, kl = L.uncertainty_rectified_loss(p, z, torch.softmax(z, 1), 0.5, return_kl=True)
    assert loss.item() >= kl.mean().item() - 1e-12
    w = torch.exp(-kl)
    assert (w > 0).all() and (w <= 1).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_consistency_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    val = L.consistency_loss(rand_probs(rng, 1, 3, 2), rand_probs(rng, 1, 3, 2)).item()
    assert 0.0 <= val <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.95))
def test_sharpen_lowers_entropy_keeps_argmax(seed, T):
    z = rand_logits(np.random.default_rng(seed), 1, 3, 2)
    p, s = torch.softmax(z, 1), L.sharpen(z, T)
    ent = lambda q: -(q * torch.log(q)).sum(1)
    assert (ent(s) < ent(p)).all()
    assert torch.equal(p.argmax(1), s.argmax(1))


def test_rectified_symmetric_in_views():
    rng = np.random.default_rng(12)
    p1, p2, z = rand_probs(rng, 2, 3, 3), rand_probs(rng, 2, 3, 3), rand_logits(rng, 2, 3, 3)
    a = L.rectified_pseudo_loss(p1, p2, z, 0.5).item()
    b = L.rectified_pseudo_loss(p2, p1, z, 0.5).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_larger_divergence_gets_smaller_weight():
    ref = voxel_map(0.9, 0.1)
    d_small = L.kl_map(voxel_map(0.8, 0.2), ref).item()
    d_large = L.kl_map(voxel_map(0.3, 0.7), ref).item()
    assert d_large > d_small
    assert math.exp(-d_large) < math.exp(-d_small)


class TestComposition:
    def test_zero_weights_labeled(self):
        r = L.total_losses(rp=2.0, bc=3.0, weights=L.LossWeights(alpha=0, beta=0), seg=1.25, labeled=True)
        assert r.total_supervised == 1.25

    def test_zero_weights_unlabeled(self):
        r = L.total_losses(rp=2.0, bc=3.0, weights=L.LossWeights(alpha=0, beta=0))
        assert r.total_unsupervised == 0.0

    def test_linear_arithmetic(self):
        r = L.total_losses(rp=2.0, bc=3.0, weights=L.LossWeights(alpha=0.1, beta=0.1), seg=1.0, labeled=True)
        assert r.total_supervised == pytest.approx(1.5)

    def test_missing_label(self):
        with pytest.raises(ValueError):
            L.total_losses(rp=1.0, bc=1.0, weights=L.LossWeights(), labeled=True)

    @pytest.mark.parametrize("kw", [dict(alpha=-1), dict(temperature_T=0), dict(epsilon=1e-3)])
    def test_weights_validation(self, kw):
        with pytest.raises(ValueError):
            L.LossWeights(**kw)
