"""MI estimator correctness against brute-force oracles, and the
translation + sigmoid coefficient arithmetic."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckmerge import (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    LayerCoefficients,
    compute_coefficients,
    estimate_mi,
    layer_mi,
    mi_from_joint,
    read_coefficients,
    write_coefficients,
)
from ckmerge.activation import ActivationTrace
from ckmerge.mi import MIEstimate, entropy_from_counts, estimate_mi_detail


def mi_brute_force(table) -> float:
    """Plain double-sum plug-in MI in scalar Python, independent of numpy."""
    rows = [[float(c) for c in row] for row in table]
    n = sum(sum(row) for row in rows)
    row_sums = [sum(row) for row in rows]
    col_sums = [sum(row[j] for row in rows) for j in range(len(rows[0]))]
    mi = 0.0
    for i, row in enumerate(rows):
        for j, c in enumerate(row):
            if c > 0:
                pxy = c / n
                mi += pxy * math.log(pxy / ((row_sums[i] / n) * (col_sums[j] / n)))
    return mi


class TestJointTableMI:
    def test_fixed_2x2_table_value(self):
        # (2/3) ln(4/3) + (1/3) ln(2/3), evaluated by hand
        expected = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
        got = mi_from_joint([[2, 1], [1, 2]])
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.0566330122651, abs=1e-9)

    def test_randomized_tables_match_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            shape = (rng.integers(1, 9), rng.integers(1, 9))
            table = rng.integers(0, 20, size=shape)
            assert mi_from_joint(table) == pytest.approx(
                max(mi_brute_force(table), 0.0), abs=1e-9
            )

    def test_independent_factorized_table_is_zero(self):
        row = np.array([1, 2, 3, 4])
        col = np.array([5, 1, 4])
        assert mi_from_joint(np.outer(row, col)) == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_table_equals_entropy(self):
        counts = [7, 3, 5, 5]
        assert mi_from_joint(np.diag(counts)) == pytest.approx(
            entropy_from_counts(counts), abs=1e-12
        )

    def test_empty_table_is_zero(self):
        assert mi_from_joint([[0, 0], [0, 0]]) == 0.0


class TestEstimateMI:
    def test_self_mi_two_bins_is_ln2(self):
        rng = np.random.default_rng(0)
        x = rng.random(10_000)
        assert estimate_mi(x, x, bins=2) == pytest.approx(math.log(2), abs=0.01)

    def test_independent_uniforms_near_zero(self):
        rng = np.random.default_rng(1)
        x, y = rng.random(10_000), rng.random(10_000)
        assert estimate_mi(x, y, bins=8) < 0.02

    def test_constant_input_degenerate_flag(self):
        x = np.zeros(100)
        y = np.arange(100.0)
        detail = estimate_mi_detail(x, y, bins=4)
        assert detail.mi == 0.0 and detail.degenerate

    def test_too_few_samples_rejected(self):
        with pytest.raises(InsufficientDataError):
            estimate_mi(np.arange(7.0), np.arange(7.0), bins=4)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InsufficientDataError):
            estimate_mi(np.arange(64.0), np.arange(65.0), bins=4)

    def test_bins_below_two_rejected(self):
        with pytest.raises(ConfigurationError):
            estimate_mi(np.arange(64.0), np.arange(64.0), bins=1)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), bins=st.integers(2, 16))
    def test_symmetry_and_bounds(self, seed, bins):
        rng = np.random.default_rng(seed)
        n = 2 * bins + int(rng.integers(0, 200))
        x = rng.standard_normal(n)
        y = 0.5 * x + rng.standard_normal(n)
        mxy, myx = estimate_mi(x, y, bins), estimate_mi(y, x, bins)
        assert abs(mxy - myx) < 1e-12
        assert mxy >= 0.0
        from ckmerge.mi import _quantile_bin

        bx, nx = _quantile_bin(x, bins)
        by, ny = _quantile_bin(y, bins)
        hx = entropy_from_counts(np.bincount(bx, minlength=nx))
        hy = entropy_from_counts(np.bincount(by, minlength=ny))
        assert mxy <= min(hx, hy) + 1e-12


def make_trace(model_id, calib_id, layers):
    return ActivationTrace(model_id=model_id, calib_id=calib_id, layers=layers)


class TestLayerMI:
    def _paired_traces(self, noise, seed=0, pieces=2, positions=16, hidden=8):
        rng = np.random.default_rng(seed)
        pt_layers, ft_layers = {}, {}
        for layer in ("embed", "layer.0"):
            pt_pieces, ft_pieces = [], []
            for _ in range(pieces):
                a = rng.standard_normal((positions, hidden)).astype(np.float32)
                b = a + noise * rng.standard_normal(a.shape).astype(np.float32)
                pt_pieces.append(a)
                ft_pieces.append(b.astype(np.float32))
            pt_layers[layer] = pt_pieces
            ft_layers[layer] = ft_pieces
        return (
            make_trace("pt", "calib-1", pt_layers),
            make_trace("ft", "calib-1", ft_layers),
        )

    def test_identical_traces_reach_self_mi_ceiling(self):
        pt, _ = self._paired_traces(noise=0.0, positions=32, hidden=16)
        est = layer_mi(pt, pt, bins=8)
        for layer, mean in est.per_layer_mean.items():
            assert mean == pytest.approx(math.log(8), abs=0.05)

    def test_heavy_noise_drives_mi_down(self):
        pt, ft = self._paired_traces(noise=100.0, positions=64, hidden=16)
        est = layer_mi(pt, ft, bins=4)
        for mean in est.per_layer_mean.values():
            assert mean < 0.1

    def test_identical_pieces_get_identical_values(self):
        rng = np.random.default_rng(5)
        piece = rng.standard_normal((16, 8)).astype(np.float32)
        pt = make_trace("pt", "c", {"l": [piece, piece.copy()]})
        ft = make_trace("ft", "c", {"l": [piece, piece.copy()]})
        est = layer_mi(pt, ft, bins=4)
        values = est.per_layer_per_piece["l"]
        assert values[0] == values[1]

    def test_mean_is_mean_of_pieces(self):
        pt, ft = self._paired_traces(noise=0.5, pieces=3)
        est = layer_mi(pt, ft, bins=4)
        for layer, values in est.per_layer_per_piece.items():
            assert est.per_layer_mean[layer] == pytest.approx(np.mean(values))

    def test_pooled_mode_single_value_per_layer(self):
        pt, ft = self._paired_traces(noise=0.5, pieces=3)
        est = layer_mi(pt, ft, bins=4, pooled=True)
        for values in est.per_layer_per_piece.values():
            assert len(values) == 1


def make_estimate(layer_values, bins=32):
    return MIEstimate(
        per_layer_per_piece={k: list(v) for k, v in layer_values.items()},
        per_layer_mean={k: float(np.mean(v)) for k, v in layer_values.items()},
        bins=bins,
    )


class TestComputeCoefficients:
    def test_zero_translated_mi_gives_half(self):
        est = make_estimate({"a": [2.0, 2.0]})
        coeffs = compute_coefficients(est, t=0.7)
        assert coeffs.shift == 2.0
        assert coeffs.lambdas["a"] == 0.5

    def test_known_sigmoid_value(self):
        # lambda = 1 - 1/(1 + e^{-0.7 * -1.5}); frozen from a 30-digit
        # mpmath evaluation: 0.740774899182153959679968579858
        est = make_estimate({"low": [0.5], "top": [2.0]})
        coeffs = compute_coefficients(est, t=0.7)
        assert coeffs.lambdas["low"] == pytest.approx(0.740774899182154, abs=1e-12)
        assert coeffs.lambdas["low"] == pytest.approx(0.74078, abs=1e-5)

    def test_figure_pattern_magnitudes(self):
        # layer means 4.0 and 2.5: the high-MI layer lands on 0.5, the
        # other on ~0.7408, strictly higher
        est = make_estimate({"edge": [4.0], "middle": [2.5]})
        coeffs = compute_coefficients(est, t=0.7)
        assert coeffs.shift == 4.0
        assert coeffs.lambdas["edge"] == 0.5
        assert coeffs.lambdas["middle"] == pytest.approx(0.74078, abs=1e-5)
        assert coeffs.lambdas["edge"] < coeffs.lambdas["middle"]

    def test_strictly_decreasing_in_mi_for_positive_t(self):
        means = np.linspace(0.0, 4.0, 100)
        est = make_estimate({f"l{i:03d}": [float(m)] for i, m in enumerate(means)})
        coeffs = compute_coefficients(est, t=0.7)
        lams = [coeffs.lambdas[f"l{i:03d}"] for i in range(100)]
        assert all(a > b for a, b in zip(lams, lams[1:]))

    def test_strictly_increasing_in_mi_for_negative_t(self):
        means = np.linspace(0.0, 4.0, 50)
        est = make_estimate({f"l{i:03d}": [float(m)] for i, m in enumerate(means)})
        coeffs = compute_coefficients(est, t=-1.8)
        lams = [coeffs.lambdas[f"l{i:03d}"] for i in range(50)]
        assert all(a < b for a, b in zip(lams, lams[1:]))

    def test_shift_invariance(self):
        base = {"a": [1.0, 1.5], "b": [2.5], "c": [0.2, 0.9, 0.4]}
        est = make_estimate(base)
        shifted = make_estimate({k: [x + 11.25 for x in v] for k, v in base.items()})
        ca = compute_coefficients(est, t=0.7)
        cb = compute_coefficients(shifted, t=0.7)
        for layer in base:
            assert abs(ca.lambdas[layer] - cb.lambdas[layer]) < 1e-12

    def test_positive_t_range_after_translation(self):
        rng = np.random.default_rng(2)
        est = make_estimate({f"l{i}": rng.random(3) * 4 for i in range(20)})
        coeffs = compute_coefficients(est, t=0.7)
        for lam in coeffs.lambdas.values():
            assert 0.5 <= lam < 1.0

    def test_empty_estimate_rejected(self):
        with pytest.raises(ConfigurationError):
            compute_coefficients(make_estimate({}), t=0.7)


class TestCoefficientIO:
    def test_round_trip_preserves_full_precision(self, tmp_path):
        coeffs = LayerCoefficients(
            model_id="sha256:abc",
            lambdas={"a": 0.5000000000000001, "b": 1 / 3, "c": 0.9999999999999},
            t=-1.8, shift=3.141592653589793,
        )
        path = tmp_path / "coeffs.json"
        write_coefficients(coeffs, path)
        loaded = read_coefficients(path)
        assert loaded.model_id == coeffs.model_id
        assert loaded.t == coeffs.t and loaded.shift == coeffs.shift
        assert loaded.lambdas == coeffs.lambdas

    def test_out_of_range_lambda_rejected_on_read(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(
            '{"model_id": "m", "t": 0.7, "shift": 1.0, "lambdas": {"a": 1.5}}'
        )
        with pytest.raises(FormatError):
            read_coefficients(path)

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            read_coefficients(path)
