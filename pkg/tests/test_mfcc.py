"""FFT, framing, mel filterbank, DCT and the per-segment MFCC tensor."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neoseize.errors import ConfigError, LengthError, ShapeError
from neoseize.mfcc import (
    MfccConfig,
    build_mel_filterbank,
    dct2,
    dct_matrix,
    featurize_segment,
    fft,
    fft_magnitude,
    frame_signal,
    hamming,
    idct2,
    mfcc_channel,
)
from neoseize.preprocess import LabeledSegment

from reference_mfcc import (
    direct_dft_magnitude,
    dct_sums,
    frames_by_index,
    mel_points,
    reference_mfcc,
    triangles,
)

CFG = MfccConfig()


class TestFft:
    def test_impulse(self):
        x = np.zeros(256)
        x[0] = 1
        np.testing.assert_allclose(fft_magnitude(x), np.ones(129), atol=1e-12)

    def test_cosine_bin(self):
        n = np.arange(256)
        mag = fft_magnitude(np.cos(2 * np.pi * 8 * n / 256))
        assert mag[8] == pytest.approx(128)
        assert np.max(np.delete(mag, 8)) < 1e-9

    def test_direct_dft(self):
        x = np.random.default_rng(0).standard_normal((20, 256))
        assert np.max(np.abs(fft_magnitude(x) - direct_dft_magnitude(x))) <= 1e-9

    @pytest.mark.parametrize("n", [1, 2, 8, 64, 1024])
    def test_complex_spectrum(self, n):
        x = np.random.default_rng(n).standard_normal(n)
        k = np.arange(n)
        ref = np.exp(-2j * np.pi * np.outer(k, k) / n) @ x
        np.testing.assert_allclose(fft(x), ref, atol=1e-9)

    @pytest.mark.parametrize("n", [0, 3, 100, 255])
    def test_non_power_of_two(self, n):
        with pytest.raises(ConfigError):
            fft(np.zeros(n))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 64, elements=st.floats(-1e3, 1e3)),
           st.floats(1e-3, 1e3))
    def test_homogeneity(self, x, a):
        np.testing.assert_allclose(fft_magnitude(a * x), a * fft_magnitude(x),
                                   rtol=1e-9, atol=1e-9 * (1 + a * np.abs(x).sum()))


class TestFraming:
    def test_frame_count(self):
        assert frame_signal(np.zeros(1280)).shape == (11, 256)
        assert CFG.n_frames(1280) == 11

    def test_constant_gives_window(self):
        fr = frame_signal(np.ones(1280))
        np.testing.assert_allclose(fr, np.tile(hamming(256), (11, 1)), atol=0)

    def test_hamming_formula(self):
        w = hamming(256)
        assert w[0] == pytest.approx(0.08) and w[-1] == pytest.approx(0.08)
        np.testing.assert_allclose(w, w[::-1])

    def test_index_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = rng.standard_normal(1280)
            np.testing.assert_array_equal(frame_signal(x), frames_by_index(x))

    def test_frame_centre(self):
        x = np.arange(1280.0)
        raw = frame_signal(x, window=False)
        # the last centre (1280) lies past the end and reflects to 1278
        np.testing.assert_array_equal(raw[:, 128], [*range(0, 1280, 128), 1278])

    def test_too_short(self):
        with pytest.raises(LengthError):
            frame_signal(np.zeros(100))


class TestFilterbank:
    fb = build_mel_filterbank(CFG, 256)

    def test_shape_and_sign(self):
        assert self.fb.weights.shape == (20, 129)
        assert np.all(self.fb.weights >= 0)

    def test_single_peak_per_row(self):
        for row in self.fb.weights:
            assert np.sum(row == row.max()) == 1 or row.max() == 0

    def test_centres_within_span(self):
        assert self.fb.center_freqs[0] > 0.5 and self.fb.center_freqs[19] < 100

    def test_mel_points_oracle(self):
        np.testing.assert_allclose(self.fb.center_freqs, mel_points()[1:-1], rtol=1e-12)

    def test_explicit_triangles(self):
        np.testing.assert_allclose(self.fb.weights, triangles(), atol=1e-12)

    def test_fmax_above_nyquist(self):
        with pytest.raises(ConfigError):
            build_mel_filterbank(MfccConfig(fmax=130), 256)

    @pytest.mark.parametrize("kw", [{"frame_len": 200}, {"hop": 0}, {"n_mfcc": 21},
                                    {"fmin": 50, "fmax": 40}])
    def test_config_invariants(self, kw):
        with pytest.raises(ConfigError):
            MfccConfig(**kw).validate(256)


class TestDct:
    def test_matches_sums(self):
        v = np.random.default_rng(2).standard_normal(20)
        np.testing.assert_allclose(dct2(v), dct_sums(v), atol=1e-12)

    def test_orthonormal(self):
        m = dct_matrix(20)
        np.testing.assert_allclose(m @ m.T, np.eye(20), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 20, elements=st.floats(-1e6, 1e6)))
    def test_round_trip(self, v):
        np.testing.assert_allclose(idct2(dct2(v)), v, atol=1e-10 * (1 + np.abs(v).max()))


class TestMfccChannel:
    def test_shape(self):
        assert mfcc_channel(np.random.default_rng(0).standard_normal(1280)).shape == (20, 11)

    def test_zero_input(self):
        c = mfcc_channel(np.zeros(1280))
        np.testing.assert_allclose(c[0], math.sqrt(20) * math.log(1e-10), rtol=1e-12)
        np.testing.assert_allclose(c[1:], 0, atol=1e-9)

    def test_reference_pipeline(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.standard_normal(1280) * 20
            ref = reference_mfcc(x)
            got = mfcc_channel(x)
            # relative to the largest coefficient: individual cepstra cross zero
            assert np.max(np.abs(got - ref)) <= 1e-6 * np.max(np.abs(ref))


def segment(data, label=1):
    return LabeledSegment("S", label, 12.5, data, seizure_index=2)


class TestFeaturize:
    def test_shape_and_metadata(self):
        t = featurize_segment(segment(np.random.default_rng(0).standard_normal((19, 1280))))
        assert t.values.shape == (19, 20, 11)
        assert (t.subject_id, t.label, t.t_start, t.seizure_index) == ("S", 1, 12.5, 2)

    def test_identical_rows(self):
        row = np.random.default_rng(1).standard_normal(1280)
        t = featurize_segment(segment(np.tile(row, (19, 1))))
        np.testing.assert_array_equal(t.values[0], t.values[7])

    def test_row_permutation(self):
        x = np.random.default_rng(2).standard_normal((19, 1280))
        perm = np.random.default_rng(3).permutation(19)
        a = featurize_segment(segment(x)).values
        b = featurize_segment(segment(x[perm])).values
        np.testing.assert_array_equal(b, a[perm])

    def test_deterministic(self):
        x = np.random.default_rng(4).standard_normal((19, 1280))
        a = featurize_segment(segment(x)).values
        b = featurize_segment(segment(x.copy())).values
        assert a.tobytes() == b.tobytes()

    def test_wrong_shape(self):
        bad = segment(np.zeros((19, 1280)))
        bad.data = np.zeros((18, 1280))
        with pytest.raises(ShapeError):
            featurize_segment(bad)
        with pytest.raises(ShapeError):
            featurize_segment(segment(np.zeros((19, 1000))))
