import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softsim.errors import ConfigError
from softsim.material import (MaterialPreset, NonPositiveSingularValueError,
                              StiffnessCurve, builtin_presets, strain_measure,
                              strain_measures)


class TestEvalStiffness:
    def test_constant_curve(self):
        curve = StiffnessCurve(np.array([0.0, 10.0]), np.array([0.5, 0.5]))
        for eps in (0.0, 0.3, 5.0, 100.0):
            assert curve.evaluate(eps) == 0.5

    def test_linear_midpoint(self):
        curve = StiffnessCurve(np.array([0.0, 1.0]), np.array([0.3, 0.7]))
        assert curve.evaluate(0.5) == pytest.approx(0.5)

    def test_clamps_past_last_knot(self):
        curve = StiffnessCurve(np.array([0.0, 1.0]), np.array([0.3, 0.7]))
        assert curve.evaluate(2.5) == 0.7
        assert curve.evaluate(-1.0) == 0.3

    def test_vector_evaluation(self):
        curve = StiffnessCurve(np.array([0.0, 1.0]), np.array([0.3, 0.7]))
        out = curve.evaluate(np.array([0.0, 0.5, 1.0, 9.0]))
        assert np.allclose(out, [0.3, 0.5, 0.7, 0.7])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_continuity_at_knots(self, seed):
        rng = np.random.default_rng(seed)
        strains = np.sort(rng.uniform(0.0, 5.0, size=4))
        strains += np.arange(4) * 1e-3  # keep strictly increasing
        values = rng.uniform(0.01, 0.99, size=4)
        curve = StiffnessCurve(strains, values)
        for s in strains:
            left = curve.evaluate(np.nextafter(s, -np.inf))
            right = curve.evaluate(np.nextafter(s, np.inf))
            assert abs(left - curve.evaluate(s)) < 1e-9
            assert abs(right - curve.evaluate(s)) < 1e-9

    def test_monotone_knots_give_monotone_curve(self):
        curve = StiffnessCurve(np.array([0.0, 1.0, 2.0]), np.array([0.2, 0.5, 0.9]))
        xs = np.linspace(-0.5, 3.0, 200)
        ys = curve.evaluate(xs)
        assert np.all(np.diff(ys) >= -1e-15)

    def test_invalid_curves_rejected(self):
        with pytest.raises(ConfigError):
            StiffnessCurve(np.array([0.0, 0.0]), np.array([0.5, 0.6]))
        with pytest.raises(ConfigError):
            StiffnessCurve(np.array([0.0, 1.0]), np.array([0.5, 1.0]))
        with pytest.raises(ConfigError):
            StiffnessCurve(np.array([]), np.array([]))


class TestStrainMeasure:
    def test_undeformed(self):
        assert strain_measure((1.0, 1.0, 1.0)) == 0.0

    def test_single_stretch(self):
        assert strain_measure((1.5, 1.0, 1.0)) == pytest.approx(0.5)

    def test_compression_dominates(self):
        assert strain_measure((0.6, 1.0, 1.2)) == pytest.approx(0.4)

    @given(st.permutations([0.7, 1.1, 1.9]))
    @settings(deadline=None)
    def test_permutation_invariant(self, perm):
        assert strain_measure(perm) == strain_measure([0.7, 1.1, 1.9])

    def test_nonpositive_rejected(self):
        with pytest.raises(NonPositiveSingularValueError):
            strain_measure((0.0, 1.0, 1.0))
        with pytest.raises(NonPositiveSingularValueError):
            strain_measure((-0.5, 1.0, 1.0))

    def test_batch_matches_scalar(self, rng):
        sig = rng.uniform(0.2, 3.0, size=(20, 3))
        batch = strain_measures(sig)
        for row, expected in zip(sig, batch):
            assert strain_measure(row) == pytest.approx(float(expected))


class TestPresets:
    def test_builtin_names_and_constants(self):
        presets = builtin_presets()
        assert presets["ecoflex-0030"].mooney_c1 == pytest.approx(0.0418)
        assert presets["ecoflex-0030"].mooney_c2 == pytest.approx(0.0106)
        assert presets["dragon-skin-20"].mooney_c1 == pytest.approx(0.119)
        assert presets["dragon-skin-20"].mooney_c2 == pytest.approx(0.023)

    def test_default_curve_is_constant_half(self):
        curve = builtin_presets()["default"].curve
        assert curve.evaluate(0.0) == 0.5
        assert curve.evaluate(3.0) == 0.5

    def test_nonpositive_constants_rejected(self):
        with pytest.raises(ConfigError):
            MaterialPreset("bad", mooney_c1=0.0, mooney_c2=0.1)
