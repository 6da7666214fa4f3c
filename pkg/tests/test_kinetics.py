import numpy as np
import pytest

from stiffonet import kinetics as K
from stiffonet.errors import ConfigError, DataValidationError, DomainError
from stiffonet.operator import StateSchema


def linear_decay():
    return K.custom_mechanism(
        "lin", StateSchema(("y",), log_flags=(False,)),
        rhs=lambda y: -y, jac=lambda y: -np.eye(1),
    )


class TestRhs:
    def test_rober_initial_slope(self):
        m = K.rober()
        np.testing.assert_allclose(m.rhs(np.array([1.0, 0.0, 0.0])), [-0.04, 0.04, 0.0])

    def test_rober_absorbing_state(self):
        m = K.rober()
        np.testing.assert_allclose(m.rhs(np.array([0.0, 0.0, 1.0])), [0.0, 0.0, 0.0])

    def test_rober_mass_rate_sums_to_zero(self):
        m = K.rober()
        rng = np.random.default_rng(0)
        for _ in range(50):
            y = rng.dirichlet([1, 1, 1])
            f = m.rhs(y)
            # exact in real arithmetic; float rounding scales with the rates
            assert abs(f.sum()) < 1e-14 * max(1.0, np.abs(f).max())

    def test_toy_combustion_zero_enthalpy_freezes_temperature(self):
        m = K.toy_combustion({"h": [0.0, 0.0, 0.0]})
        y = np.array([1200.0, 0.7, 0.1, 0.2])
        assert m.rhs(y)[0] == 0.0

    def test_toy_combustion_mass_rate_sums_to_zero(self):
        m = K.toy_combustion()
        y = np.array([1300.0, 0.6, 0.3, 0.1])
        assert abs(m.rhs(y)[1:].sum()) < 1e-14

    @pytest.mark.parametrize("mech", ["rober", "toy-combustion"])
    def test_jacobian_matches_finite_differences(self, mech):
        m = K.make_mechanism(mech)
        rng = np.random.default_rng(1)
        for _ in range(100):
            if mech == "rober":
                y = rng.dirichlet([1, 1, 1])
            else:
                fr = rng.dirichlet([1, 1, 1])
                y = np.concatenate([[rng.uniform(1000, 1500)], fr])
            jac = m.jac(y)
            fd = np.zeros_like(jac)
            for k in range(y.size):
                h = 1e-6 * max(abs(y[k]), 1e-3)
                yp, ym = y.copy(), y.copy()
                yp[k] += h
                ym[k] -= h
                fd[:, k] = (m.rhs(yp) - m.rhs(ym)) / (2 * h)
            scale = np.maximum(np.abs(fd), 1e-3 * np.abs(jac).max() + 1e-12)
            assert np.max(np.abs(jac - fd) / scale) < 1e-5


class TestIntegrate:
    def test_backward_euler_closed_form(self):
        m = linear_decay()
        y1 = K.backward_euler_step(m.clipped_rhs, m.jac, np.array([1.0]), 0.1)
        np.testing.assert_allclose(y1, [1.0 / 1.1], rtol=1e-12)

    def test_rober_at_t40_matches_richardson_oracle(self):
        m = K.rober()
        y0 = np.array([1.0, 0.0, 0.0])
        got = K.integrate(m, y0, 40.0, 1)[-1]  # default tolerance
        # oracle: same scheme at tol 1e-12, confirmed by a halved-tolerance run
        ref = K.integrate(m, y0, 40.0, 1, tol=1e-12)[-1]
        confirm = K.integrate(m, y0, 20.0, 2, tol=1e-12)[-1]
        assert np.max(np.abs(ref - confirm) / ref) < 1e-8
        assert np.max(np.abs(got - ref) / ref) < 1e-6

    def test_mass_sum_drift_bounded(self):
        m = K.rober()
        traj = K.integrate(m, np.array([1.0, 0.0, 0.0]), 1e-3, 990)
        assert np.abs(traj.sum(axis=1) - 1.0).max() < 1e-10

    def test_second_order_convergence(self):
        m = linear_decay()
        errs = []
        for sub in (4, 8, 16, 32, 64, 128):
            out = K.integrate_fixed(m, np.array([1.0]), 1.0, 1, substeps=sub)
            errs.append(abs(out[-1, 0] - np.exp(-1.0)))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios > 3.4) and np.all(ratios < 4.6)

    def test_outputs_on_uniform_grid(self):
        m = linear_decay()
        out = K.integrate(m, np.array([2.0]), 0.25, 8, tol=1e-10)
        np.testing.assert_allclose(out[:, 0], 2.0 * np.exp(-0.25 * np.arange(9)), rtol=1e-6)


class TestGenerateAndSplit:
    def test_single_ic_grid_matches_direct_integration(self):
        m = K.rober()
        raw = K.generate_trajectories(m, (1, 1), 1e-3, 50)
        direct = K.integrate(m, m.ic_from_params(0.0, 0.0), 1e-3, 51)
        np.testing.assert_array_equal(raw[0], direct[1:])

    def test_grid_is_mass_conserving_and_positive(self):
        m = K.rober()
        raw = K.generate_trajectories(m, (4, 3), 1e-3, 99)
        assert raw.shape == (12, 100, 3)
        assert np.abs(raw.sum(axis=2) - 1.0).max() < 1e-8
        assert raw.min() > 0.0  # shifted origin keeps log-normalization valid

    def test_split_determinism(self):
        m = K.rober()
        raw = K.generate_trajectories(m, (5, 2), 1e-3, 20)
        _, _, tr1, te1 = K.split_dataset(raw, 1e-3, m.schema, seed=11)
        _, _, tr2, te2 = K.split_dataset(raw, 1e-3, m.schema, seed=11)
        np.testing.assert_array_equal(tr1, tr2)
        np.testing.assert_array_equal(te1, te2)
        assert len(set(tr1) & set(te1)) == 0
        assert len(tr1) + len(te1) == 10

    def test_toy_combustion_generates(self):
        m = K.toy_combustion()
        raw = K.generate_trajectories(m, (2, 2), 1e-6, 40)
        assert np.all(np.isfinite(raw))
        assert np.abs(raw[..., 1:].sum(axis=2) - 1.0).max() < 1e-8
        # exothermic: temperature must not decrease anywhere
        assert np.all(np.diff(raw[..., 0], axis=1) >= -1e-9)


class TestTimeDecompose:
    def _dataset(self, bs=3, steps=12, j=2):
        rng = np.random.default_rng(0)
        raw = np.abs(rng.normal(size=(bs, steps + 1, j))) + 0.5
        schema = StateSchema(tuple(f"s{i}" for i in range(j)), log_flags=(False,) * j)
        from stiffonet.operator import compute_norm_params
        return K.TrajectoryDataset(raw, 0.1, schema, compute_norm_params(raw, schema), "train")

    def test_single_segment_is_identity(self):
        ds = self._dataset(steps=12)
        seg = K.time_decompose(ds, 13)
        assert seg.segments.shape == (3, 13, 2)
        np.testing.assert_array_equal(seg.segments, ds.raw)

    def test_paper_style_segment_count(self):
        ds = self._dataset(bs=2, steps=9900)
        seg = K.time_decompose(ds, 101)
        assert seg.segments.shape == (2 * 99, 101, 2)
        assert seg.n_seg == 99

    def test_shared_endpoints(self):
        ds = self._dataset(steps=12)
        seg = K.time_decompose(ds, 5)  # 3 segments of 4 steps
        for i in range(3):
            for s in range(seg.n_seg - 1):
                a = seg.segments[i * seg.n_seg + s]
                b = seg.segments[i * seg.n_seg + s + 1]
                np.testing.assert_array_equal(a[-1], b[0])

    def test_branch_inputs_are_first_rows(self):
        ds = self._dataset(steps=8)
        seg = K.time_decompose(ds, 5)
        np.testing.assert_array_equal(seg.branch_inputs, seg.segments[:, 0, :])

    def test_reconstruction_inverts_decomposition(self):
        ds = self._dataset(steps=12)
        seg = K.time_decompose(ds, 4)
        recon = K.reconstruct_series(seg.segments, seg.n_originals)
        # dropping the duplicated boundary points recovers the original series
        n_seg, seg_len = seg.n_seg, seg.seg_len
        for i in range(ds.raw.shape[0]):
            rebuilt = [recon[i, 0]]
            for s in range(n_seg):
                rebuilt.extend(recon[i, s * seg_len + 1 : (s + 1) * seg_len])
            np.testing.assert_array_equal(np.array(rebuilt), ds.raw[i])

    def test_indivisible_horizon_reports_nearest(self):
        ds = self._dataset(steps=13)
        with pytest.raises(ConfigError, match="12"):
            K.time_decompose(ds, 5)


class TestDatasetIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = K.rober()
        raw = K.generate_trajectories(m, (3, 2), 1e-3, 20)
        train, test, tri, tei = K.split_dataset(raw, 1e-3, m.schema, seed=3)
        K.save_dataset(tmp_path / "ds", train, test, m, tri, tei, seg_len=11)
        loaded = K.load_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(loaded["train"].raw, train.raw)
        np.testing.assert_array_equal(loaded["test"].raw, test.raw)
        assert loaded["train"].schema == m.schema
        assert loaded["segment_len"] == 11
        np.testing.assert_array_equal(loaded["train"].norm.mins, train.norm.mins)

    def test_rewrite_is_byte_identical(self, tmp_path):
        m = K.rober()
        raw = K.generate_trajectories(m, (2, 2), 1e-3, 10)
        train, test, tri, tei = K.split_dataset(raw, 1e-3, m.schema, seed=3)
        K.save_dataset(tmp_path / "a", train, test, m, tri, tei, seg_len=6)
        K.save_dataset(tmp_path / "b", train, test, m, tri, tei, seg_len=6)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_wrong_directory_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(DataValidationError):
            K.load_dataset(tmp_path)
