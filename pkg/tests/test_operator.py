import numpy as np
import pytest

from stiffonet import operator as O
from stiffonet import networks as N
from stiffonet import training as TR
from stiffonet.autodiff import Var, grad
from stiffonet.errors import ConfigError, DomainError, InvalidModeError, RolloutDivergenceError
from stiffonet.seeding import stream


SCHEMA = O.StateSchema(("T", "a", "b"), temperature_index=0, mass_group=(1, 2),
                       log_flags=(False, True, True))
LOG_SCHEMA = O.StateSchema(("x", "y"), log_flags=(True, True))


def small_model(j=3, p=4, n_t1=10, seed=0, **kw):
    schema = kw.pop("schema", O.StateSchema(tuple(f"s{i}" for i in range(j))))
    norm = kw.pop("norm", O.NormalizationParams(-np.ones(j), np.ones(j)))
    bcfg, bp = TR.build_networks("resnet", j, j * p, 8, 2, seed, "branch_init")
    tcfg, tp = TR.build_networks("kan", 1, j * p, 6, 1, seed, "trunk_init")
    return O.DeepONetModel(schema, norm, bcfg, bp, tcfg, tp, p=p,
                           t_norm=O.time_grid(n_t1), **kw)


class TestSchema:
    def test_temperature_cannot_join_mass_group(self):
        with pytest.raises(ConfigError):
            O.StateSchema(("T", "a"), temperature_index=0, mass_group=(0, 1))

    def test_defaults_log_everything(self):
        s = O.StateSchema(("a", "b"))
        assert s.log_flags == (True, True)

    def test_roundtrip_dict(self):
        s2 = O.StateSchema.from_dict(SCHEMA.to_dict())
        assert s2 == SCHEMA


class TestNormalization:
    def test_extremes_map_to_unit_interval_bounds(self):
        params = O.NormalizationParams(np.array([np.log(2.0)] * 2), np.array([np.log(8.0)] * 2))
        lo = O.normalize(np.array([[2.0, 2.0]]), LOG_SCHEMA, params)
        hi = O.normalize(np.array([[8.0, 8.0]]), LOG_SCHEMA, params)
        np.testing.assert_allclose(lo, -1.0)
        np.testing.assert_allclose(hi, 1.0)

    def test_roundtrip_random_dataset(self):
        rng = np.random.default_rng(0)
        raw = np.abs(rng.normal(size=(5, 7, 3))) + 1e-6
        raw[..., 0] = rng.normal(size=(5, 7)) * 100  # linear state may be negative
        params = O.compute_norm_params(raw, SCHEMA)
        norm = O.normalize(raw, SCHEMA, params)
        back = O.denormalize(norm, SCHEMA, params)
        assert np.max(np.abs(back - raw) / np.maximum(np.abs(raw), 1e-12)) < 1e-12

    def test_nonpositive_under_log_flag_raises(self):
        params = O.NormalizationParams(np.zeros(3), np.ones(3))
        bad = np.ones((2, 2, 3))
        bad[1, 0, 2] = 0.0
        with pytest.raises(DomainError, match="b"):
            O.normalize(bad, SCHEMA, params)

    def test_degenerate_params_rejected(self):
        with pytest.raises(DomainError):
            O.NormalizationParams(np.zeros(2), np.zeros(2))

    def test_denormalize_var_matches_plain(self):
        rng = np.random.default_rng(1)
        params = O.NormalizationParams(np.array([-2.0, -3.0, -1.0]), np.array([5.0, 2.0, 1.0]))
        norm = rng.uniform(-1, 1, size=(4, 6, 3))
        plain = O.denormalize(norm, SCHEMA, params)
        taped = O.denormalize_var(Var(norm), SCHEMA, params)
        np.testing.assert_allclose(taped.value, plain, rtol=1e-14)
        # gradient flows through and stays finite
        x = Var(norm)
        (gx,) = grad(O.denormalize_var(x, SCHEMA, params).sum(), [x])
        assert np.all(np.isfinite(gx)) and np.abs(gx).max() > 0


class TestOneStepForward:
    def test_pou_trunk_rows_sum_to_one(self):
        model = small_model()
        c = O.trunk_bases(model).value
        np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(c > 0) and np.all(c < 1)

    def test_equal_branch_blocks_give_constant_prediction(self):
        # with PoU, equal coefficients per state make the convex combination constant
        model = small_model(bound_factor=0.0)
        y0 = np.zeros((2, 3))
        b = O.branch_coefficients(model, y0).value
        const = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, -1.0]])

        class Fixed:
            pass

        # patch branch output: replace coefficients with per-state constants
        c = O.trunk_bases(model)
        b_fixed = np.repeat(const[:, :, None], model.p, axis=2)
        from stiffonet.autodiff import einsum
        out = einsum("ijk,ljk->ilj", Var(b_fixed), c).value
        for i in range(2):
            for a in range(3):
                np.testing.assert_allclose(out[i, :, a], const[i, a], atol=1e-12)

    def test_bound_keeps_output_inside_factor(self):
        model = small_model()
        for p in model.branch_params.values():
            p.value = p.value * 100.0
        out = O.forward_one_step(model, np.random.default_rng(0).normal(size=(4, 3))).value
        # tanh saturates to exactly +-1 in float64, so the closed bound is the limit
        assert np.all(np.abs(out) <= 1.05)
        assert np.abs(out).max() > 1.0  # the bound actually engaged

    def test_block_independence(self):
        # perturbing branch outputs of one state's block leaves other states unchanged
        model = small_model(bound_factor=0.0)
        y0 = np.random.default_rng(3).normal(size=(2, 3))
        base = O.forward_one_step(model, y0).value
        b = O.branch_coefficients(model, y0).value.copy()
        b[:, 1, :] += 10.0
        c = O.trunk_bases(model)
        from stiffonet.autodiff import einsum
        out = einsum("ijk,ljk->ilj", Var(b), c).value
        np.testing.assert_allclose(out[:, :, 0], base[:, :, 0], atol=1e-12)
        np.testing.assert_allclose(out[:, :, 2], base[:, :, 2], atol=1e-12)
        assert np.abs(out[:, :, 1] - base[:, :, 1]).max() > 1.0

    def test_two_step_forward_requires_q_star(self):
        model = small_model()
        with pytest.raises(InvalidModeError):
            O.forward_two_step(model, np.zeros((1, 3)))


class TestRecursivePredict:
    def _constant_model(self):
        """A model whose prediction is constant over time = its branch input."""
        model = small_model(j=2, p=2, n_t1=5,
                            schema=O.StateSchema(("x", "y"), log_flags=(False, False)),
                            norm=O.NormalizationParams(np.array([-4.0, -4.0]),
                                                       np.array([4.0, 4.0])),
                            bound_factor=0.0, pou=True)
        return model

    def test_single_segment_equals_forward(self):
        model = small_model(bound_factor=1.05)
        schema, params = model.schema, model.norm
        y0 = np.array([0.5, 0.4, 0.3])
        roll = O.recursive_predict(model, y0, 1)
        y0n = O.normalize(y0[None], schema, params)
        direct = O.denormalize(O.forward_one_step(model, y0n).value, schema, params)[0]
        np.testing.assert_allclose(roll, direct)

    def test_fixed_point_surrogate_stays_flat(self):
        # zero branch weights + per-state-constant output bias: with PoU the
        # prediction is the same constant at every time, so the rollout is flat
        model = self._constant_model()
        for name, p in model.branch_params.items():
            p.value = np.zeros_like(p.value)
        const = np.array([0.6, -0.3])
        model.branch_params["out.b"].value = np.repeat(const, model.p)
        roll = O.recursive_predict(model, np.array([0.25, -0.5]), 4)
        assert roll.shape == (4 * 4 + 1, 2)
        np.testing.assert_allclose(roll, np.broadcast_to(roll[0], roll.shape), atol=1e-12)
        np.testing.assert_allclose(
            roll[0], O.denormalize(const, model.schema, model.norm), atol=1e-12
        )

    def test_shapes_and_endpoint_dedup(self):
        model = small_model()
        y0 = np.full(3, 0.5)
        roll = O.recursive_predict(model, y0, 3)
        assert roll.shape == (3 * 9 + 1, 3)
        batch = O.recursive_predict(model, np.tile(y0, (2, 1)), 3)
        assert batch.shape == (2, 3 * 9 + 1, 3)
        np.testing.assert_allclose(batch[0], roll)

    def test_divergence_reports_segment(self):
        model = small_model(j=2, p=2, n_t1=5,
                            schema=O.StateSchema(("x", "y"), log_flags=(True, True)),
                            norm=O.NormalizationParams(np.array([-1.0, -1.0]),
                                                       np.array([1.0, 1.0])))
        with pytest.raises(RolloutDivergenceError) as err:
            O.recursive_predict(model, np.array([-0.5, 0.5]), 2)  # negative under log
        assert err.value.segment == 0


class TestModelValidation:
    def test_width_must_equal_j_times_p(self):
        schema = O.StateSchema(("a", "b", "c"))
        norm = O.NormalizationParams(-np.ones(3), np.ones(3))
        bcfg, bp = TR.build_networks("resnet", 3, 12, 8, 2, 0, "branch_init")
        tcfg, tp = TR.build_networks("kan", 1, 12, 6, 1, 0, "trunk_init")
        with pytest.raises(ConfigError, match="output width"):
            O.DeepONetModel(schema, norm, bcfg, bp, tcfg, tp, p=5, t_norm=O.time_grid(10))

    def test_two_step_forbids_pou_and_bound(self):
        with pytest.raises(ConfigError):
            small_model(mode=O.TWO_STEP, pou=True, bound_factor=0.0)
        with pytest.raises(ConfigError):
            small_model(mode=O.TWO_STEP, pou=False, bound_factor=1.05)


class TestCheckpointIO:
    def test_roundtrip_one_step(self, tmp_path):
        model = small_model(schema=SCHEMA,
                            norm=O.NormalizationParams(np.array([-1.0, -2.0, -3.0]),
                                                       np.array([1.0, 2.0, 3.0])))
        O.save_model(model, tmp_path / "ckpt")
        loaded = O.load_model(tmp_path / "ckpt")
        assert loaded.schema == model.schema
        assert loaded.mode == model.mode
        y0 = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(
            O.forward_one_step(loaded, y0).value, O.forward_one_step(model, y0).value
        )

    def test_roundtrip_two_step_with_q_star(self, tmp_path):
        rng = np.random.default_rng(5)
        model = small_model(mode=O.TWO_STEP, pou=False, bound_factor=0.0,
                            q_star=rng.normal(size=(3, 10, 4)))
        O.save_model(model, tmp_path / "ckpt2")
        loaded = O.load_model(tmp_path / "ckpt2")
        np.testing.assert_array_equal(loaded.q_star, model.q_star)
        y0 = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(
            O.forward_two_step(loaded, y0).value, O.forward_two_step(model, y0).value
        )

    def test_byte_identical_rewrite(self, tmp_path):
        model = small_model()
        O.save_model(model, tmp_path / "a")
        O.save_model(model, tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
