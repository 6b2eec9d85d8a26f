import numpy as np
import pytest

from headspan.sphharm import (C0, eval_colors, eval_colors_backward,
                              sh_basis, sh_basis_grad)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_basis_grad_matches_fd(degree):
    rng = np.random.default_rng(degree)
    dirs = rng.normal(0, 1, (6, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    g = sh_basis_grad(degree, dirs)
    h = 1e-6
    for ax in range(3):
        dp = dirs.copy()
        dp[:, ax] += h
        dm = dirs.copy()
        dm[:, ax] -= h
        fd = (sh_basis(degree, dp) - sh_basis(degree, dm)) / (2 * h)
        np.testing.assert_allclose(g[..., ax], fd, atol=1e-6)


def test_dc_only_color_is_view_independent():
    coeffs = np.zeros((2, 4, 3))
    coeffs[:, 0, :] = (np.array([0.8, 0.5, 0.2]) - 0.5) / C0
    d1 = np.array([[0.0, 0, 1], [0, 1, 0.0]])
    d1 /= np.linalg.norm(d1, axis=-1, keepdims=True)
    colors, _ = eval_colors(coeffs, d1)
    np.testing.assert_allclose(colors, [[0.8, 0.5, 0.2]] * 2, atol=1e-12)


@pytest.mark.parametrize("degree", [1, 3])
def test_eval_colors_backward_fd(degree):
    rng = np.random.default_rng(10 + degree)
    k = (degree + 1) ** 2
    coeffs = rng.normal(0, 0.15, (5, k, 3))
    dirs = rng.normal(0, 1, (5, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    w = rng.normal(0, 1, (5, 3))

    colors, cache = eval_colors(coeffs, dirs)
    d_coeffs, d_dirs = eval_colors_backward(cache, w)

    h = 1e-6

    def loss(c, d):
        return float(np.sum(eval_colors(c, d)[0] * w))

    for idx in [(0, 0, 0), (2, k - 1, 1), (4, k // 2, 2)]:
        cp = coeffs.copy()
        cp[idx] += h
        cm = coeffs.copy()
        cm[idx] -= h
        fd = (loss(cp, dirs) - loss(cm, dirs)) / (2 * h)
        assert abs(fd - d_coeffs[idx]) < 1e-6
    # direction gradient (raw, before any unit-norm projection)
    for p, ax in [(0, 0), (3, 2)]:
        dp = dirs.copy()
        dp[p, ax] += h
        dm = dirs.copy()
        dm[p, ax] -= h
        fd = (loss(coeffs, dp) - loss(coeffs, dm)) / (2 * h)
        assert abs(fd - d_dirs[p, ax]) < 1e-5


def test_degree_three_render_gradcheck():
    """The renderer's gradient suite with degree-3 color coefficients."""
    from headspan.gradcheck import check_renderer

    # check_renderer builds 4-coefficient scenes; emulate degree 3 by a
    # direct scene here
    import headspan.gradcheck as gc

    orig = gc._random_surfels
    try:
        gc._random_surfels = lambda n, rng, sh_coeffs=16: orig(n, rng, 16)
        r = gc.check_renderer(seed=2, scenes=1, size=12, n_surfels=6)
    finally:
        gc._random_surfels = orig
    assert r.passed, r.line()
