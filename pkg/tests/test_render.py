import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatpuppet import autodiff as ad
from splatpuppet import render as rn
from splatpuppet.autodiff import Var, value_of
from splatpuppet.render import Camera, GaussianCloud

from _fd import assert_grads_close


def logit(p):
    return np.log(p / (1.0 - p))


def sh0_for(color):
    """Degree-0 SH coefficient producing an exact blended color."""
    return (np.asarray(color) - 0.5) / rn.SH_C0


def make_camera(width=5, height=5, focal=10.0):
    return Camera(rot=np.eye(3), trans=np.zeros(3), focal=focal,
                  width=width, height=height)


def point_cloud(mus, colors, opacities, scale=0.05):
    n = len(mus)
    mu = np.asarray(mus, dtype=np.float64)
    log_s = np.full((n, 3), np.log(scale))
    q = np.tile([1.0, 0, 0, 0], (n, 1))
    al = logit(np.asarray(opacities, dtype=np.float64))
    sh = np.stack([sh0_for(c)[None, :] for c in colors])
    return GaussianCloud(mu, log_s, q, al, sh)


# -- projection ---------------------------------------------------------------


def test_projection_hand_computed_jacobian():
    # mu=(0,0,2), Sigma=I, F=2: J = [[1,0,0],[0,1,0]] so cov2d (pre-dilation)=I
    cloud = GaussianCloud(np.array([[0.0, 0.0, 2.0]]), np.zeros((1, 3)),
                          np.array([[1.0, 0, 0, 0]]), np.zeros(1),
                          np.zeros((1, 1, 3)))
    cam = make_camera(width=8, height=6, focal=2.0)
    mean2d, conic, depth, valid = rn.project_cloud(cloud, cam)
    assert valid[0]
    np.testing.assert_allclose(value_of(mean2d)[0], [4.0, 3.0], atol=1e-12)
    a, b, c = value_of(conic)[0]
    cov = np.linalg.inv(np.array([[a, b], [b, c]]))
    np.testing.assert_allclose(cov - rn.COV2D_DILATION * np.eye(2), np.eye(2), atol=1e-9)
    assert value_of(depth)[0] == pytest.approx(2.0)


def test_projection_culls_behind_camera():
    cloud = point_cloud([[0, 0, -1.0]], [[1, 1, 1]], [0.5])
    _, _, _, valid = rn.project_cloud(cloud, make_camera())
    assert not valid[0]


def test_projection_linear_in_focal():
    mu = [[0.3, 0.2, 2.0]]
    cloud = point_cloud(mu, [[1, 1, 1]], [0.5])
    cam1 = make_camera(focal=10.0)
    cam2 = make_camera(focal=20.0)
    m1, _, _, _ = rn.project_cloud(cloud, cam1)
    m2, _, _, _ = rn.project_cloud(cloud, cam2)
    pp = np.array(cam1.principal_point)
    np.testing.assert_allclose(value_of(m2)[0] - pp, 2.0 * (value_of(m1)[0] - pp),
                               rtol=1e-12)


# -- sorting ------------------------------------------------------------------


def test_sort_by_depth():
    assert rn.sort_by_depth(np.array([3.0, 1.0, 2.0])).tolist() == [1, 2, 0]
    assert rn.sort_by_depth(np.array([1.0, 1.0])).tolist() == [0, 1]
    assert rn.sort_by_depth(np.array([])).tolist() == []


# -- blending oracles ---------------------------------------------------------


def test_single_gaussian_blend_values():
    # alpha'=0.7 exactly at the pixel center under the Gaussian mean
    cam = make_camera(width=5, height=5, focal=10.0)
    cloud = point_cloud([[0, 0, 2.0]], [[0.2, 0.4, 0.6]], [0.7])
    out = rn.render(cloud, cam)
    C = value_of(out.color)[2, 2]
    A = value_of(out.opacity)[2, 2]
    np.testing.assert_allclose(C, [0.14, 0.28, 0.42], atol=1e-6)
    assert A == pytest.approx(0.7, abs=1e-6)


def test_two_gaussian_blend_recursion():
    cam = make_camera(width=5, height=5, focal=10.0)
    cloud = point_cloud([[0, 0, 2.0], [0, 0, 3.0]],
                        [[1.0, 0, 0], [0, 1.0, 0]], [0.5, 0.5])
    out = rn.render(cloud, cam)
    C = value_of(out.color)[2, 2]
    A = value_of(out.opacity)[2, 2]
    np.testing.assert_allclose(C, [0.5, 0.25, 0.0], atol=1e-6)
    assert A == pytest.approx(0.75, abs=1e-6)


def test_empty_cloud_renders_zero():
    cloud = GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                          np.zeros(0), np.zeros((0, 1, 3)))
    out = rn.render(cloud, make_camera())
    assert np.all(value_of(out.color) == 0.0)
    assert np.all(value_of(out.opacity) == 0.0)


def random_cloud(rng, n, depth_range=(1.5, 4.0), spread=0.6, sh_degree=1):
    mu = np.column_stack([rng.uniform(-spread, spread, n),
                          rng.uniform(-spread, spread, n),
                          rng.uniform(*depth_range, n)])
    log_s = rng.uniform(np.log(0.05), np.log(0.3), (n, 3))
    q = rng.standard_normal((n, 4))
    al = rng.uniform(-1.0, 2.0, n)
    basis = (sh_degree + 1) ** 2
    sh = rng.uniform(-0.4, 0.4, (n, basis, 3))
    return mu, log_s, q, al, sh


def test_opacity_bounds_and_color_range():
    rng = np.random.default_rng(21)
    mu, log_s, q, al, sh = random_cloud(rng, 30, sh_degree=0)
    sh = rng.uniform(-0.5 / rn.SH_C0 * 0.99, 0.5 / rn.SH_C0 * 0.99, (30, 1, 3))
    cloud = GaussianCloud(mu, log_s, q, al, sh)
    cam = make_camera(width=24, height=20, focal=30.0)
    out = rn.render(cloud, cam)
    A = value_of(out.opacity)
    C = value_of(out.color)
    assert A.min() >= 0.0 and A.max() <= 1.0
    assert C.min() >= 0.0 and C.max() <= 1.0


def test_permutation_invariance_bitwise():
    rng = np.random.default_rng(22)
    mu, log_s, q, al, sh = random_cloud(rng, 25)
    cloud = GaussianCloud(mu, log_s, q, al, sh)
    cam = make_camera(width=20, height=18, focal=25.0)
    ref = value_of(rn.render(cloud, cam).color)
    perm = rng.permutation(25)
    cloud_p = GaussianCloud(mu[perm], log_s[perm], q[perm], al[perm], sh[perm])
    img = value_of(rn.render(cloud_p, cam).color)
    assert np.array_equal(ref, img)


def test_worker_count_bitwise_identical():
    rng = np.random.default_rng(23)
    cloud = GaussianCloud(*random_cloud(rng, 40))
    cam = make_camera(width=40, height=34, focal=40.0)
    a = rn.render(cloud, cam, workers=1)
    b = rn.render(cloud, cam, workers=3)
    assert np.array_equal(value_of(a.color), value_of(b.color))
    assert np.array_equal(value_of(a.opacity), value_of(b.opacity))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 0.999), min_size=1, max_size=12))
def test_transmittance_monotone_property(alphas):
    al = np.array(alphas)
    om = 1.0 - al
    T = np.concatenate([[1.0], np.cumprod(om)])
    assert np.all(np.diff(T) <= 1e-15)
    A = np.sum(al * T[:-1] * (T[:-1] >= rn.MIN_TRANSMITTANCE))
    assert -1e-12 <= A <= 1.0 + 1e-12


# -- backward -----------------------------------------------------------------


def taped_cloud(arrays):
    return GaussianCloud.trainable(*arrays)


def test_zero_upstream_gradient_gives_zero_grads():
    rng = np.random.default_rng(24)
    cloud = taped_cloud(random_cloud(rng, 6))
    cam = make_camera(width=12, height=12, focal=15.0)
    out = rn.render(cloud, cam)
    grads = rn.rasterize_backward(out, np.zeros((12, 12, 3)), np.zeros((12, 12)))
    for g in grads.values():
        assert np.all(g == 0.0)


def test_l1_loss_to_own_render_has_zero_grads():
    rng = np.random.default_rng(25)
    arrays = random_cloud(rng, 4)
    target = value_of(rn.render(GaussianCloud(*arrays), make_camera(12, 12, 15.0)).color)
    cloud = taped_cloud(arrays)
    out = rn.render(cloud, make_camera(12, 12, 15.0))
    loss = ad.vmean(ad.absolute(out.color - target))
    ad.backward(loss)
    for p in cloud.params().values():
        assert p.grad is None or np.all(p.grad == 0.0)


def test_backward_mismatched_dimensions_rejected():
    rng = np.random.default_rng(26)
    cloud = taped_cloud(random_cloud(rng, 3))
    out = rn.render(cloud, make_camera(10, 10, 12.0))
    with pytest.raises(ValueError):
        rn.rasterize_backward(out, np.zeros((4, 4, 3)), np.zeros((4, 4)))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(27)
    mu, log_s, q, al, sh = random_cloud(rng, 4)
    cam = make_camera(width=20, height=18, focal=22.0)
    target = value_of(rn.render(GaussianCloud(mu + 0.02, log_s, q, al, sh), cam).color)

    def fn(mu, log_s, q, al, sh):
        out = rn.render(GaussianCloud(mu, log_s, q, al, sh), cam)
        return ad.vmean(ad.absolute(out.color - target)) + 0.25 * ad.vmean(out.opacity)

    assert_grads_close(fn, [mu, log_s, q, al, sh], rtol=1e-3, atol=1e-6, h=1e-5)


def test_camera_gradients_match_finite_differences():
    rng = np.random.default_rng(28)
    mu, log_s, q, al, sh = random_cloud(rng, 3)
    target = value_of(rn.render(GaussianCloud(mu, log_s, q, al, sh),
                                make_camera(14, 12, 18.0)).color) * 0.9

    def fn(trans, focal):
        cam = Camera(rot=np.eye(3), trans=trans, focal=focal, width=14, height=12)
        out = rn.render(GaussianCloud(mu, log_s, q, al, sh), cam)
        return ad.vmean(ad.absolute(out.color - target))

    assert_grads_close(fn, [np.array([0.01, -0.02, 0.03]), np.asarray(18.0)],
                       rtol=1e-3, atol=1e-6, h=1e-5)


def test_render_is_taped_only_with_vars():
    rng = np.random.default_rng(29)
    arrays = random_cloud(rng, 3)
    out = rn.render(GaussianCloud(*arrays), make_camera())
    assert isinstance(value_of(out.color), np.ndarray)
    with pytest.raises(ValueError):
        rn.rasterize_backward(out, np.zeros((5, 5, 3)), np.zeros((5, 5)))
