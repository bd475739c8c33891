import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqprnu import fingerprint as fpmod
from seqprnu import synthcam
from seqprnu.errors import DataError, DegenerateInputError, InsufficientDataError, ShapeError
from seqprnu.fingerprint import Fingerprint, estimate, estimate_mle_quadratic, postprocess
from seqprnu.pixelplane import denoise


def _pairs(rng, n=4, shape=(6, 5)):
    xhat = rng.uniform(20, 200, size=(n, *shape))
    y = xhat * (1 + rng.normal(0, 0.02, size=shape)) + rng.normal(0, 1, size=(n, *shape))
    return list(zip(y, xhat))


class TestEstimate:
    def test_identical_planes_give_zero(self, rng):
        x = rng.uniform(10, 200, size=(3, 4, 4))
        np.testing.assert_array_equal(estimate([(a, a) for a in x]).k, 0.0)

    def test_noiseless_recovers_k(self, rng):
        k = rng.normal(0, 0.03, size=(5, 5))
        xs = rng.uniform(10, 200, size=(3, 5, 5))
        fp = estimate([((1 + k) * x, x) for x in xs])
        np.testing.assert_allclose(fp.k, k, rtol=0, atol=1e-14)
        assert fp.L == 3

    def test_hand_value(self):
        fp = estimate([(np.array([[2.2]]), np.array([[2.0]])), (np.array([[1.2]]), np.array([[1.0]]))])
        assert fp.k[0, 0] == pytest.approx(0.12, abs=1e-12)

    def test_masked_samples_excluded(self):
        y = [np.array([[2.2]]), np.array([[9.0]])]
        x = [np.array([[2.0]]), np.array([[1.0]])]
        fp = estimate(list(zip(y, x)), masks=[np.array([[True]]), np.array([[False]])])
        assert fp.k[0, 0] == pytest.approx(0.1)

    def test_dark_pixel_is_zero(self):
        y = [np.array([[0.0, 3.0]]), np.array([[0.0, 4.0]])]
        fp = estimate([(a, np.array([[0.0, a[0, 1]]])) for a in y])
        assert fp.k[0, 0] == 0.0

    def test_needs_two(self, rng):
        with pytest.raises(InsufficientDataError):
            estimate(_pairs(rng, n=1))

    def test_shape_mismatch(self, rng):
        pairs = _pairs(rng, n=2)
        pairs[1] = (np.ones((3, 3)), np.ones((3, 3)))
        with pytest.raises(ShapeError):
            estimate(pairs)

    @settings(max_examples=25, deadline=None)
    @given(st.permutations(range(5)))
    def test_order_invariant_bitwise(self, perm):
        pairs = _pairs(np.random.default_rng(4), n=5)
        ref = estimate(pairs).k
        assert np.array_equal(estimate([pairs[i] for i in perm]).k, ref)

    def test_immutable(self, rng):
        fp = estimate(_pairs(rng))
        with pytest.raises(ValueError):
            fp.k[0, 0] = 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            Fingerprint(np.array([[np.inf]]), L=2)


class TestQuadratic:
    def test_no_residue_is_ratio(self):
        assert estimate_mle_quadratic([1, 1], [1, 1], 1.0, 0.0) == 1.0

    def test_exact_ratio(self):
        assert estimate_mle_quadratic([1, 0], [2, 0], 1.0, 0.0) == 2.0

    def test_root_of_quadratic(self):
        kappa = estimate_mle_quadratic([1, 1], [1.1, 0.9], 1.0, 0.01)
        # 0.02 k^2 + (2 - 0.0202) k - 2 = 0
        assert abs(0.02 * kappa ** 2 + (2 - 0.0202) * kappa - 2) < 1e-12
        assert kappa == pytest.approx(1.0, abs=0.02)

    def test_zero_correlation_is_linear(self):
        assert estimate_mle_quadratic([1, 1], [1, -1], 1.0, 0.5) == 0.0

    def test_degenerate_xhat(self):
        with pytest.raises(DegenerateInputError):
            estimate_mle_quadratic([0, 0], [1, 1], 1.0, 0.1)

    @pytest.mark.parametrize("args", [([1], [1], 1.0, 0.0), ([1, 2], [1], 1.0, 0.0)])
    def test_bad_vectors(self, args):
        with pytest.raises((InsufficientDataError, ShapeError)):
            estimate_mle_quadratic(*args)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 10), st.floats(1e-6, 1.0))
    def test_root_satisfies_quadratic(self, seed, sn2, sr2):
        rng = np.random.default_rng(seed)
        x = rng.uniform(1, 200, size=8)
        y = x * (1 + rng.normal(0, 0.02)) + rng.normal(0, 1, size=8)
        kappa = estimate_mle_quadratic(x, y, sn2, sr2)
        a, b, c = (x @ y) * sr2, (x @ x) * sn2 - (y @ y) * sr2, -(x @ y) * sn2
        scale = abs(a) * kappa ** 2 + abs(b * kappa) + abs(c)
        assert abs(a * kappa ** 2 + b * kappa + c) <= 1e-10 * scale


class TestPostprocess:
    def test_mean_removal_identity_on_centered(self, rng):
        k = fpmod.zero_mean_rows_cols(rng.normal(size=(8, 8)))
        np.testing.assert_allclose(fpmod.zero_mean_rows_cols(k), k, atol=1e-12)

    def test_constant_vanishes(self):
        out = postprocess(Fingerprint(np.full((6, 6), 0.3), L=2))
        np.testing.assert_allclose(out.k, 0.0, atol=1e-15)

    def test_seeded_16x16_zero_means(self):
        k = np.random.default_rng(16).normal(size=(16, 16))
        step1 = fpmod.zero_mean_rows_cols(k)
        assert np.abs(step1.mean(axis=0)).max() < 1e-9
        assert np.abs(step1.mean(axis=1)).max() < 1e-9
        out = postprocess(Fingerprint(k, L=2))
        assert out.postprocessed
        assert np.abs(out.k.mean(axis=0)).max() < 1e-9
        assert np.abs(out.k.mean(axis=1)).max() < 1e-9

    def test_twice_rejected(self, rng):
        fp = postprocess(Fingerprint(rng.normal(size=(4, 4)), L=2))
        with pytest.raises(ValueError):
            postprocess(fp)

    def test_periodic_peak_suppressed(self, rng):
        n = 64
        noise = rng.normal(0, 1, size=(n, n))
        jj = np.arange(n)
        pattern = 3 * np.cos(2 * np.pi * 8 * jj / n)[None, :] * np.cos(2 * np.pi * 4 * jj / n)[:, None]
        out = fpmod.wiener_dft(noise + pattern, 1.0)
        before = np.abs(np.fft.fft2(noise + pattern))[4, 8]
        after = np.abs(np.fft.fft2(out))[4, 8]
        assert after < 0.2 * before
        # White noise is mostly kept.
        assert np.corrcoef(out.ravel(), noise.ravel())[0, 1] > 0.9

    def test_rfft_matches_full_fft(self, rng):
        k = rng.normal(size=(12, 9))
        floor = 0.7
        F = np.fft.fft2(k)
        energy = np.abs(F) ** 2 / k.size
        from scipy.ndimage import uniform_filter
        excess = np.min([np.maximum(uniform_filter(energy, s, mode="wrap") - floor, 0)
                         for s in fpmod.SPECTRAL_WINDOWS], axis=0)
        ref = np.real(np.fft.ifft2(F * floor / (excess + floor)))
        np.testing.assert_allclose(fpmod.wiener_dft(k, floor), ref, atol=1e-12)


class TestFileFormat:
    def test_round_trip(self, tmp_path, rng):
        fp = Fingerprint(rng.normal(size=(3, 5)), L=7, postprocessed=True, meta={"sources": ["a"]})
        path = fpmod.save(fp, tmp_path / "cam.prnu")
        back = fpmod.load(path)
        assert back == fp
        assert back.meta == {"sources": ["a"]}
        assert (tmp_path / "cam.meta.json").is_file()

    def test_header_layout(self, tmp_path):
        fp = Fingerprint(np.arange(6.0).reshape(2, 3), L=50)
        blob = fpmod.save(fp, tmp_path / "f.bin").read_bytes()
        assert blob[:8] == b"PRNUFP1\0"
        assert blob[8:12] == (3).to_bytes(4, "little")
        assert blob[12:16] == (2).to_bytes(4, "little")
        assert blob[16:20] == (50).to_bytes(4, "little")
        assert blob[20] == 0
        np.testing.assert_array_equal(np.frombuffer(blob[21:], "<f8"), np.arange(6.0))

    def test_truncated(self, tmp_path):
        path = fpmod.save(Fingerprint(np.ones((2, 2)), L=2), tmp_path / "f.bin")
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DataError):
            fpmod.load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"JUNKJUNK" + bytes(20))
        with pytest.raises(DataError):
            fpmod.load(path)


def _corr(a, b):
    return float(np.corrcoef(a.ravel(), b.ravel())[0, 1])


def test_consistency_improves_with_L():
    """Correlation with the true PRNU grows with L and exceeds 0.5 at L = 50."""
    corr = {5: [], 20: [], 50: []}
    for seed in range(20):
        cam = synthcam.make_camera(48, 48, seed=seed)
        shots = [synthcam.shoot(cam, synthcam.SceneConfig("flatfield"), s) for s in range(50)]
        pairs = [(y, denoise(y)) for y in shots]
        for L in corr:
            corr[L].append(_corr(estimate(pairs[:L]).k, cam.k))
    means = [np.mean(corr[L]) for L in (5, 20, 50)]
    assert means[0] <= means[1] <= means[2]
    assert means[2] > 0.5
