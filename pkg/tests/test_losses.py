"""Loss values against hand-computed oracles; gradients against central
finite differences."""

import math
import warnings

import numpy as np
import pytest

from metriccam.camera import CameraIntrinsics, DepthMap, pixel_rays
from metriccam.errors import DegenerateInputError, DomainError
from metriccam.losses import (DEFAULT_WEIGHTS, PATCH_SIDE_RANGE, PatchSpec,
                              gradcheck, patchnorm, pwn, sample_patches,
                              silog, total_loss, vnl)


def k_of(f=10.0, w=12, h=9):
    return CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)


def random_frame(seed, w=12, h=9):
    rng = np.random.default_rng(seed)
    gt_vals = rng.uniform(2.0, 8.0, (h, w))
    mask = np.ones((h, w), bool)
    mask[0, 0] = False
    gt = DepthMap(np.where(mask, gt_vals, 0.0), mask)
    pred = gt_vals * rng.uniform(0.8, 1.25, (h, w))
    return pred, gt


def tilted_plane_frame(seed, w=12, h=9, f=10.0):
    k = k_of(f, w, h)
    n = np.array([0.2, -0.3, -1.0])
    n /= np.linalg.norm(n)
    depth = 5.0 * n[2] / (pixel_rays(k) @ n)
    gt = DepthMap(depth)
    normals = np.broadcast_to(n, (h, w, 3)).copy()
    plane_id = np.zeros((h, w), np.int32)
    pred = depth * np.random.default_rng(seed).uniform(0.9, 1.1, (h, w))
    return pred, gt, normals, plane_id, k


def fd_pair(result):
    return result.value, result.grad


# -------------------------------------------------------------------- silog


def test_silog_frozen_example():
    gt = DepthMap(np.array([[2.0, 1.0]]))
    res = silog(np.array([[1.0, 2.0]]), gt)
    assert res.value == pytest.approx(math.log(2.0), abs=1e-15)


def test_silog_zero_at_equality():
    _, gt = random_frame(0)
    res = silog(gt.values.copy(), gt)
    assert res.value == 0.0
    assert np.all(res.grad == 0.0)


def test_silog_needs_two_valid():
    gt = DepthMap(np.array([[2.0, 1.0]]), np.array([[True, False]]))
    with pytest.raises(DegenerateInputError):
        silog(np.array([[1.0, 2.0]]), gt)


def test_silog_masks_nonpositive_pred():
    gt = DepthMap(np.array([[2.0, 1.0, 4.0]]))
    res = silog(np.array([[-1.0, 2.0, 8.0]]), gt)
    two = silog(np.array([[9.9, 2.0, 8.0]]),
                DepthMap(np.array([[2.0, 1.0, 4.0]]),
                         np.array([[False, True, True]])))
    assert res.value == two.value
    assert res.grad[0, 0] == 0.0


def test_silog_pred_mask_respected():
    pred, gt = random_frame(1)
    pm = np.ones(pred.shape, bool)
    pm[3, 4] = False
    res = silog(DepthMap(pred, pm), gt)
    spiked = pred.copy()
    spiked[3, 4] *= 50
    res2 = silog(DepthMap(spiked, pm), gt)
    assert res.value == res2.value
    assert res.grad[3, 4] == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_silog_gradient(seed):
    pred, gt = random_frame(seed)
    rep = gradcheck(lambda x: fd_pair(silog(x, gt)), pred)
    assert rep.max_rel_err < 1e-4


# ---------------------------------------------------------------- patchnorm


def test_patchnorm_frozen_example():
    gt = DepthMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
    pred = np.array([[1.0, 1.0], [3.0, 4.0]])
    res = patchnorm(pred, gt, None, patches=[PatchSpec(0, 0, 2, 2)])
    assert res.value == 0.5


def test_patchnorm_affine_invariance_exact():
    # Exactly representable transforms (dyadic scale steps, integer data,
    # power-of-two patch areas) make the invariance hold bitwise; rounding
    # of a*x+b itself is the only thing that can break it.
    rng = np.random.default_rng(13)
    gt = DepthMap(rng.integers(1, 60, (8, 8)).astype(np.float64))
    pred = rng.integers(1, 60, (8, 8)).astype(np.float64)
    patches = [PatchSpec(0, 0, 4, 4), PatchSpec(3, 2, 4, 2),
               PatchSpec(1, 3, 2, 4), PatchSpec(4, 4, 4, 4)]
    base = patchnorm(pred, gt, None, patches=patches).value
    # b must keep a*pred+b positive or the valid mask itself changes
    for a, b in [(3.0, 7.0), (0.5, 2.0), (4.0, 0.25)]:
        assert patchnorm(a * pred + b, gt, None,
                         patches=patches).value == base


def test_patchnorm_affine_invariance_generic():
    pred, gt = random_frame(2)
    v1 = patchnorm(pred, gt, np.random.default_rng(9)).value
    v2 = patchnorm(3.7 * pred + 1.9, gt, np.random.default_rng(9)).value
    assert v2 == pytest.approx(v1, rel=1e-12)


def test_patchnorm_out_of_frame_patch():
    pred, gt = random_frame(3)
    with pytest.raises(DomainError):
        patchnorm(pred, gt, None, patches=[PatchSpec(8, 0, 8, 2)])


def test_patchnorm_empty_patch_contributes_zero():
    # the patch count M stays in the denominator; a fully masked patch
    # adds nothing to the numerator
    vals = np.array([[1.0, 2.0, 1.0, 4.0], [3.0, 4.0, 3.0, 1.0]])
    mask = np.ones((2, 4), bool)
    mask[:, :2] = False
    gt = DepthMap(np.where(mask, vals, 0.0), mask)
    pred = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 3.0, 4.0]])
    full = PatchSpec(2, 0, 2, 2)
    dead = PatchSpec(0, 0, 2, 2)
    alone = patchnorm(pred, gt, None, patches=[full])
    both = patchnorm(pred, gt, None, patches=[dead, full])
    assert alone.value > 0
    assert both.value == alone.value / 2
    assert np.all(both.grad[:, :2] == 0.0)


def test_patchnorm_all_degenerate_warns_zero():
    gt = DepthMap(np.full((4, 4), 3.0))
    pred = np.full((4, 4), 2.0)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = patchnorm(pred, gt, None, patches=[PatchSpec(0, 0, 4, 4)])
    assert res.value == 0.0
    assert np.all(res.grad == 0.0)
    assert len(rec) == 1


def test_sample_patches_bounds_and_determinism():
    specs = sample_patches(np.random.default_rng(5), 9, 12)
    assert len(specs) == 32
    lo, hi = PATCH_SIDE_RANGE
    for p in specs:
        assert 1 <= p.w <= 12 and 1 <= p.h <= 9
        assert 0 <= p.x0 and p.x0 + p.w <= 12
        assert 0 <= p.y0 and p.y0 + p.h <= 9
    again = sample_patches(np.random.default_rng(5), 9, 12)
    assert specs == again


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_patchnorm_gradient(seed):
    pred, gt = random_frame(seed)
    rep = gradcheck(
        lambda x: fd_pair(patchnorm(x, gt, np.random.default_rng(123))), pred)
    assert rep.max_rel_err < 1e-4


# ---------------------------------------------------------------------- vnl


def test_vnl_scale_invariant_zero():
    _, gt = random_frame(4)
    # doubling commutes with every rounding step, so 2x is bitwise zero
    res = vnl(2.0 * gt.values, gt, k_of(), np.random.default_rng(0))
    assert res.value == 0.0
    generic = vnl(3.7 * gt.values, gt, k_of(), np.random.default_rng(0))
    assert generic.value < 1e-12


def test_vnl_positive_when_geometry_differs():
    pred, gt = random_frame(5)
    res = vnl(pred, gt, k_of(), np.random.default_rng(1))
    assert res.value > 0


def test_vnl_needs_three_valid():
    gt = DepthMap(np.array([[1.0, 2.0, 0.0]]),
                  np.array([[True, True, False]]))
    with pytest.raises(DegenerateInputError):
        vnl(np.array([[1.0, 2.0, 3.0]]), gt, k_of(w=3, h=1),
            np.random.default_rng(0))


def test_vnl_degenerate_when_all_triplets_collinear():
    # only one valid row: every triplet is collinear, none survives
    vals = np.full((9, 12), 5.0)
    mask = np.zeros((9, 12), bool)
    mask[4] = True
    gt = DepthMap(np.where(mask, vals, 0.0), mask)
    with pytest.raises(DegenerateInputError):
        vnl(vals.copy(), gt, k_of(), np.random.default_rng(0))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vnl_gradient(seed):
    pred, gt = random_frame(seed)
    rep = gradcheck(
        lambda x: fd_pair(vnl(x, gt, k_of(), np.random.default_rng(5))), pred)
    assert rep.max_rel_err < 1e-4


# ---------------------------------------------------------------------- pwn


def test_pwn_zero_on_exact_plane():
    pred, gt, normals, plane_id, k = tilted_plane_frame(6)
    res = pwn(gt.values.copy(), gt, normals, plane_id, k,
              np.random.default_rng(2))
    assert res.value < 1e-3


def test_pwn_positive_on_warped_plane():
    pred, gt, normals, plane_id, k = tilted_plane_frame(7)
    res = pwn(pred, gt, normals, plane_id, k, np.random.default_rng(3))
    assert res.value > 1e-4


def test_pwn_no_planes_warns_zero():
    pred, gt = random_frame(8)
    normals = np.zeros((*gt.shape, 3))
    plane_id = np.full(gt.shape, -1, np.int32)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = pwn(pred, gt, normals, plane_id, k_of(),
                  np.random.default_rng(4))
    assert res.value == 0.0 and len(rec) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pwn_gradient(seed):
    pred, gt, normals, plane_id, k = tilted_plane_frame(seed)
    rep = gradcheck(
        lambda x: fd_pair(pwn(x, gt, normals, plane_id, k,
                              np.random.default_rng(9))), pred)
    assert rep.max_rel_err < 1e-4


# --------------------------------------------------------------- total loss


def total_setup(seed):
    pred, gt, normals, plane_id, k = tilted_plane_frame(seed)
    mk = np.random.default_rng
    return pred, gt, normals, plane_id, k, mk


def test_total_loss_is_sum_of_components():
    pred, gt, normals, plane_id, k, mk = total_setup(10)
    res = total_loss(pred, gt, k, normals, plane_id, mk(1), mk(2), mk(3))
    parts = (silog(pred, gt).value
             + patchnorm(pred, gt, mk(1)).value
             + vnl(pred, gt, k, mk(2)).value
             + pwn(pred, gt, normals, plane_id, k, mk(3)).value)
    assert res.value == pytest.approx(parts, abs=1e-12)
    assert sorted(res.components) == sorted(DEFAULT_WEIGHTS)


def test_total_loss_weights_and_reliability():
    pred, gt, normals, plane_id, k, mk = total_setup(11)
    base = total_loss(pred, gt, k, normals, plane_id, mk(1), mk(2), mk(3))
    # relative-only supervision drops the metric-anchored term
    rel = total_loss(pred, gt, k, normals, plane_id, mk(1), mk(2), mk(3),
                     metric_reliable=False)
    assert rel.components["silog"] == 0.0
    assert base.value - rel.value == pytest.approx(
        silog(pred, gt).value, abs=1e-12)
    # zero weight skips a loss, missing keys keep their defaults
    part = total_loss(pred, gt, k, normals, plane_id, mk(1), mk(2), mk(3),
                      weights={"patchnorm": 0.0})
    assert part.components["patchnorm"] == 0.0
    assert part.components["silog"] == base.components["silog"]
    with pytest.raises(DomainError):
        total_loss(pred, gt, k, normals, plane_id, mk(1), mk(2), mk(3),
                   weights={"nope": 1.0})
    with pytest.raises(DomainError):
        total_loss(pred, gt, k, normals, plane_id, mk(1), mk(2), mk(3),
                   weights={"silog": -1.0})


def test_total_loss_gradient():
    pred, gt, normals, plane_id, k, mk = total_setup(12)

    def fn(x):
        res = total_loss(x, gt, k, normals, plane_id, mk(1), mk(2), mk(3))
        return res.value, res.grad

    rep = gradcheck(fn, pred, sample=60, rng=np.random.default_rng(0))
    assert rep.max_rel_err < 1e-4


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_accepts_exact_gradient():
    x0 = np.random.default_rng(0).uniform(1, 2, (4, 5))
    rep = gradcheck(lambda x: (float(np.sum(x ** 2)), 2 * x), x0)
    assert rep.max_rel_err < 1e-8
    assert rep.n_checked == 20


def test_gradcheck_flags_wrong_gradient():
    x0 = np.random.default_rng(1).uniform(1, 2, (4, 5))
    rep = gradcheck(lambda x: (float(np.sum(x ** 2)), 3 * x), x0)
    assert rep.max_rel_err > 0.1


def test_gradcheck_sampling_subsets():
    x0 = np.random.default_rng(2).uniform(1, 2, (6, 6))
    rep = gradcheck(lambda x: (float(np.sum(x ** 2)), 2 * x), x0,
                    sample=7, rng=np.random.default_rng(3))
    assert rep.n_checked == 7
