import dataclasses
import math

import numpy as np
import pytest

from condlab import autodiff as ad
from condlab import control as ctl
from condlab import htransform as ht
from condlab import oracle as orc
from condlab import problems as prb
from condlab.model import EpsilonModel
from condlab.schedule import build_linear, build_time_grid, TimeGrid


class ExactGauss:
    """Bayes-optimal noise predictor for x0 ~ N(m, I_d)."""

    def __init__(self, m, schedule):
        self.m = np.atleast_1d(np.asarray(m, dtype=np.float64))
        self.data_dim = self.m.size
        self.schedule = schedule
        self.params = []

    def forward(self, x, k, params=None, cond=None):
        ab = self.schedule.abar(k)
        c = math.sqrt(1.0 - ab)
        if isinstance(x, ad.Tensor):
            return ad.sub(ad.mul(x, c), c * math.sqrt(ab) * self.m)
        return c * x - c * math.sqrt(ab) * self.m


S1000 = build_linear(1e-4, 2e-2, 1000)
SIGMA_Y = 0.5
Y = np.array([1.2])
CHAIN = orc.LinearGaussianChain(m=np.zeros(1), S=np.eye(1),
                                A=np.eye(1), sigma_y=SIGMA_Y, schedule=S1000)
MU_P, S_P, EVIDENCE = orc.lg_posterior(CHAIN, Y)
MEAS = prb.Measurement(y=Y, operator=prb.LinearMatrix(np.eye(1)),
                       noise=prb.NoiseModel("gaussian", SIGMA_Y))
BASE = ExactGauss(np.zeros(1), S1000)


def hstar(x, k, params=None, eps_hat=None):
    xv = x.data if isinstance(x, ad.Tensor) else x
    return orc.lg_h_star(CHAIN, np.atleast_2d(xv), k, Y)


def zero_ctrl(x, k, params=None, eps_hat=None):
    xv = x.data if isinstance(x, ad.Tensor) else np.atleast_2d(x)
    return np.zeros_like(np.atleast_2d(xv))


def scaled_hstar(scale):
    def fn(x, k, params=None, eps_hat=None):
        return scale * hstar(x, k)
    return fn


def linear_ctrl(theta):
    """h = a x + b; live in both the parameters and the state."""
    def fn(x, k, params=None, eps_hat=None):
        p = params if params is not None else theta
        if isinstance(p[0], ad.Tensor):
            xv = x if isinstance(x, ad.Tensor) else ad.tensor(x)
            return ad.add(ad.mul(xv, p[0]), p[1])
        xv = x.data if isinstance(x, ad.Tensor) else x
        return p[0] * xv + p[1]
    return fn


def taped_const(values_fn):
    """Wrap an analytic control so rnd_log_taped sees a tensor output."""
    def fn(x, k, params=None, eps_hat=None):
        v = values_fn(x, k)
        return ad.add(ad.tensor(v), ad.mul(params[0], 0.0))
    return fn


class TestObjectiveConfig:
    def test_defaults(self):
        obj = ctl.ControlObjective()
        assert obj.kind == "kl" and obj.subsample == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            ctl.ControlObjective(kind="elbo")

    @pytest.mark.parametrize("rho", [0.0, -0.5, 1.5])
    def test_subsample_range(self, rho):
        with pytest.raises(ValueError, match="subsample"):
            ctl.ControlObjective(subsample=rho)

    def test_variance_needs_pairs(self):
        with pytest.raises(ValueError, match="batch"):
            ctl.ControlObjective(kind="vargrad", batch_size=1)


class TestGrid:
    def test_int_grid_spans_schedule(self):
        traj = ctl.simulate_controlled(BASE, zero_ctrl, S1000, 10, MEAS,
                                       np.random.default_rng(0), n=2)
        assert traj.ks[0] == 1000 and traj.ks[-1] == 0
        assert traj.n_steps == 10

    def test_time_grid_object(self):
        grid = build_time_grid(9, "uniform")
        traj = ctl.simulate_controlled(BASE, zero_ctrl, S1000, grid, MEAS,
                                       np.random.default_rng(0), n=2)
        assert traj.n_steps == 8

    def test_int_grid_out_of_range(self):
        with pytest.raises(ValueError):
            ctl.simulate_controlled(BASE, zero_ctrl, S1000, 0, MEAS,
                                    np.random.default_rng(0), n=2)
        with pytest.raises(ValueError):
            ctl.simulate_controlled(BASE, zero_ctrl, S1000, 1001, MEAS,
                                    np.random.default_rng(0), n=2)

    def test_partial_grid_rejected(self):
        bad = TimeGrid(K=2, points=np.array([0.0, 0.5]), spacing="uniform")
        with pytest.raises(ValueError, match="spanning"):
            ctl.simulate_controlled(BASE, zero_ctrl, S1000, bad, MEAS,
                                    np.random.default_rng(0), n=2)

    def test_duplicate_indices_rejected(self):
        sched = build_linear(1e-3, 2e-2, 4)
        with pytest.raises(ValueError):
            # 9 stops on a 4-step schedule must collide after rounding
            ctl.simulate_controlled(ExactGauss(np.zeros(1), sched), zero_ctrl,
                                    sched, build_time_grid(9, "uniform"), MEAS,
                                    np.random.default_rng(0), n=2)


class TestSimulate:
    def test_shapes(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 12, MEAS,
                                       np.random.default_rng(1), n=5)
        assert traj.states.shape == (13, 5, 1)
        assert traj.controls.shape == (12, 5, 1)
        assert traj.ref_controls.shape == (12, 5, 1)
        assert traj.noises.shape == (12, 5, 1)
        assert traj.quad.shape == (12, 5)
        assert traj.terminal_loglik.shape == (5,)
        assert traj.alphas.shape == (12,)
        assert traj.batch == 5

    def test_rng_required(self):
        with pytest.raises(ValueError, match="rng"):
            ctl.simulate_controlled(BASE, zero_ctrl, S1000, 10, MEAS, None, n=2)

    def test_alpha_matches_schedule_ratio(self):
        traj = ctl.simulate_controlled(BASE, zero_ctrl, S1000, 10, MEAS,
                                       np.random.default_rng(2), n=1)
        for i in range(traj.n_steps):
            k_hi, k_lo = traj.ks[i], traj.ks[i + 1]
            expect = 1.0 - S1000.abar(int(k_hi)) / S1000.abar(int(k_lo))
            assert traj.alphas[i] == pytest.approx(expect, abs=0)

    def test_unit_gaussian_is_stationary_unconditioned(self):
        traj = ctl.simulate_controlled(BASE, zero_ctrl, S1000, 100, MEAS,
                                       np.random.default_rng(3), n=20000)
        h0 = traj.states[-1][:, 0]
        assert abs(h0.mean()) < 0.025
        assert abs(h0.var() - 1.0) < 0.03

    def test_exact_control_reaches_posterior(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 200, MEAS,
                                       np.random.default_rng(4), n=20000)
        h0 = traj.states[-1][:, 0]
        assert abs(h0.mean() - MU_P[0]) < 0.02
        assert abs(h0.var() / S_P[0, 0] - 1.0) < 0.07

    def test_exact_control_terminal_law(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 200, MEAS,
                                       np.random.default_rng(5), n=10000)
        ref = MU_P[0] + math.sqrt(S_P[0, 0]) * \
            np.random.default_rng(6).normal(size=(10000, 1))
        metrics = orc.distribution_metrics(traj.states[-1], ref, seed=0)
        assert metrics["sliced_wasserstein"] < 0.05

    def test_non_finite_state_aborts_with_step(self):
        def blowup(x, k, params=None, eps_hat=None):
            xv = x.data if isinstance(x, ad.Tensor) else x
            return np.full_like(xv, np.inf)

        with pytest.raises(RuntimeError, match="step index 0"):
            ctl.simulate_controlled(BASE, blowup, S1000, 10, MEAS,
                                    np.random.default_rng(7), n=2)

    def test_replay_is_bit_exact(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 16, MEAS,
                                       np.random.default_rng(8), n=4)
        again = ctl.simulate_controlled(BASE, hstar, S1000, 16, MEAS, None,
                                        replay=traj)
        assert np.array_equal(again.states, traj.states)
        assert np.array_equal(again.controls, traj.controls)
        assert np.array_equal(again.terminal_loglik, traj.terminal_loglik)

    def test_replay_grid_mismatch(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 16, MEAS,
                                       np.random.default_rng(9), n=4)
        with pytest.raises(ValueError, match="replay"):
            ctl.simulate_controlled(BASE, hstar, S1000, 8, MEAS, None,
                                    replay=traj)

    def test_taped_with_reference_rejected(self):
        tape = ad.Tape()
        leaves = [tape.leaf(np.zeros(1)), tape.leaf(np.zeros(1))]
        with pytest.raises(ValueError, match="reference"):
            ctl.simulate_controlled(BASE, linear_ctrl(None), S1000, 8, MEAS,
                                    np.random.default_rng(10), n=2,
                                    params=leaves, ref_fn=zero_ctrl)

    def test_reference_drives_the_chain(self):
        ref = scaled_hstar(0.8)
        rng = np.random.default_rng(11)
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 32, MEAS, rng,
                                       n=64, ref_fn=ref)
        assert np.allclose(traj.ref_controls, 0.8 * traj.controls)
        # cross = alpha g.h with g = 0.8 h, quad = -(alpha/2)|h|^2
        assert np.allclose(traj.cross, -1.6 * traj.quad)
        driven = ctl.simulate_controlled(
            BASE, hstar, S1000, 32, MEAS, None,
            replay=dataclasses.replace(traj, ref_controls=None))
        assert not np.allclose(driven.states[-1], traj.states[-1])


class TestDensityRatio:
    def test_zero_control_reduces_to_terminal(self):
        traj = ctl.simulate_controlled(BASE, zero_ctrl, S1000, 50, MEAS,
                                       np.random.default_rng(12), n=128)
        r = ctl.rnd_log(traj)
        assert np.allclose(r, -traj.terminal_loglik, atol=0, rtol=0)

    def test_missing_reference_raises(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 10, MEAS,
                                       np.random.default_rng(13), n=4)
        bare = dataclasses.replace(traj, ref_controls=None)
        with pytest.raises(ValueError, match="reference"):
            ctl.rnd_log(bare)
        # forcing g = h works without the stored reference
        forced = ctl.rnd_log(bare, g_is_reference=False)
        assert np.allclose(forced, ctl.rnd_log(traj), atol=0, rtol=0)

    def test_matched_controls_give_half_quadratic(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 40, MEAS,
                                       np.random.default_rng(14), n=32)
        # with g = h the quad and cross terms combine to +alpha/2 |h|^2
        assert np.allclose(traj.quad + traj.cross, -traj.quad, atol=1e-12)

    def test_pathwise_near_constant_at_exact_control(self):
        stds = {}
        # the discretisation bias of the mean shrinks with the step count
        for K, mean_tol in ((100, 0.035), (400, 0.012)):
            traj = ctl.simulate_controlled(BASE, hstar, S1000, K, MEAS,
                                           np.random.default_rng(15), n=4000)
            r = ctl.rnd_log(traj)
            stds[K] = r.std(ddof=1)
            assert abs(r.mean() - (-EVIDENCE)) < mean_tol
        assert stds[400] < 0.55 * stds[100]

    def test_batch_mean_matches_kl_loss(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 100, MEAS,
                                       np.random.default_rng(16), n=512)
        lhs = np.mean(ctl.rnd_log(traj) - traj.mart.sum(axis=0))
        assert abs(lhs - ctl.kl_control_loss(traj)) < 1e-10

    def test_kl_loss_bounds_evidence(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 100, MEAS,
                                       np.random.default_rng(17), n=2048)
        per = -traj.quad.sum(axis=0) - traj.terminal_loglik
        se = per.std(ddof=1) / math.sqrt(per.size)
        assert ctl.kl_control_loss(traj) >= -EVIDENCE - 3 * se

    def test_kl_ordering_around_exact_control(self):
        losses = {}
        for scale in (0.0, 1.0, 2.0):
            traj = ctl.simulate_controlled(BASE, scaled_hstar(scale), S1000,
                                           100, MEAS,
                                           np.random.default_rng(18), n=4096)
            per = -traj.quad.sum(axis=0) - traj.terminal_loglik
            losses[scale] = (per.mean(), per.std(ddof=1) / math.sqrt(per.size))
        for other in (0.0, 2.0):
            gap = losses[other][0] - losses[1.0][0]
            se = math.hypot(losses[other][1], losses[1.0][1])
            assert gap > 3 * se

    def test_empty_batch_rejected(self):
        traj = ctl.simulate_controlled(BASE, zero_ctrl, S1000, 10, MEAS,
                                       np.random.default_rng(19), n=0)
        with pytest.raises(ValueError, match="empty"):
            ctl.kl_control_loss(traj)


class TestTapedLosses:
    def test_kl_gradient_matches_finite_differences(self):
        sched = build_linear(1e-3, 2e-2, 8)
        base = ExactGauss(np.zeros(1), sched)
        theta = [np.array([0.3]), np.array([-0.2])]
        ref = ctl.simulate_controlled(base, linear_ctrl(theta), sched, 4,
                                      MEAS, np.random.default_rng(20), n=16)

        def kl_at(th):
            traj = ctl.simulate_controlled(base, linear_ctrl(th), sched, 4,
                                           MEAS, None, replay=ref)
            return ctl.kl_control_loss(traj)

        tape = ad.Tape()
        leaves = [tape.leaf(theta[0]), tape.leaf(theta[1])]
        traj_t = ctl.simulate_controlled(base, linear_ctrl(theta), sched, 4,
                                         MEAS, None, params=leaves, replay=ref)
        loss = ctl.kl_control_loss(traj_t)
        assert isinstance(loss, ad.Tensor)
        assert loss.item() == pytest.approx(kl_at(theta), abs=1e-12)
        grads = ad.backward(loss)
        eps = 1e-6
        for i in range(2):
            tp = [t.copy() for t in theta]
            tm = [t.copy() for t in theta]
            tp[i] = tp[i] + eps
            tm[i] = tm[i] - eps
            fd = (kl_at(tp) - kl_at(tm)) / (2 * eps)
            an = grads[leaves[i]][0]
            assert abs(fd - an) <= 1e-6 * max(1.0, abs(fd))

    def test_taped_terminal_matches_plain_loglik(self):
        tape = ad.Tape()
        x0 = tape.leaf(np.random.default_rng(21).normal(size=(6, 1)))
        live = ctl.loglik_taped(MEAS, x0)
        assert np.allclose(live.data, prb.loglik(MEAS, x0.data), atol=1e-12)
        grads = ad.backward(ad.tsum(live))
        assert np.all(np.isfinite(grads[x0]))

    def test_vargrad_needs_pairs(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 10, MEAS,
                                       np.random.default_rng(22), n=1)
        tape = ad.Tape()
        dummy = [tape.leaf(np.zeros(1))]
        with pytest.raises(ValueError, match="batch"):
            ctl.vargrad_loss(traj, taped_const(hstar), dummy)

    def test_vargrad_small_and_shrinking_at_exact_control(self):
        vals = {}
        for K in (100, 400):
            traj = ctl.simulate_controlled(BASE, hstar, S1000, K, MEAS,
                                           np.random.default_rng(23), n=256)
            tape = ad.Tape()
            dummy = [tape.leaf(np.zeros(1))]
            vals[K] = ctl.vargrad_loss(traj, taped_const(hstar), dummy).item()
        assert vals[400] < vals[100] < 0.06

    def test_vargrad_ignores_constant_shift(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 20, MEAS,
                                       np.random.default_rng(24), n=64)
        shifted = dataclasses.replace(
            traj, terminal_loglik=traj.terminal_loglik + 5.0)
        tape = ad.Tape()
        d1 = [tape.leaf(np.zeros(1))]
        v1 = ctl.vargrad_loss(traj, taped_const(hstar), d1).item()
        tape2 = ad.Tape()
        d2 = [tape2.leaf(np.zeros(1))]
        v2 = ctl.vargrad_loss(shifted, taped_const(hstar), d2).item()
        assert v1 == pytest.approx(v2, abs=1e-10)

    def test_vargrad_requires_tensor_control(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 10, MEAS,
                                       np.random.default_rng(25), n=4)
        tape = ad.Tape()
        dummy = [tape.leaf(np.zeros(1))]
        with pytest.raises(TypeError, match="taped"):
            ctl.vargrad_loss(traj, hstar, dummy)

    def test_tb_scalar_gradient_formula(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 20, MEAS,
                                       np.random.default_rng(26), n=64)
        tape = ad.Tape()
        dummy = [tape.leaf(np.zeros(1))]
        k_leaf = tape.leaf(np.array([0.7]))
        loss = ctl.tb_loss(traj, taped_const(hstar), dummy, k_leaf)
        rnd = ctl.rnd_log(traj)
        grads = ad.backward(loss)
        expect = 2.0 * (0.7 - rnd.mean())
        assert grads[k_leaf][0] == pytest.approx(expect, rel=1e-10)

    def test_tb_at_batch_mean_equals_population_variance(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 20, MEAS,
                                       np.random.default_rng(27), n=50)
        rnd = ctl.rnd_log(traj)
        tape = ad.Tape()
        dummy = [tape.leaf(np.zeros(1))]
        k_leaf = tape.leaf(np.array([rnd.mean()]))
        tb = ctl.tb_loss(traj, taped_const(hstar), dummy, k_leaf).item()
        tape2 = ad.Tape()
        d2 = [tape2.leaf(np.zeros(1))]
        vg = ctl.vargrad_loss(traj, taped_const(hstar), d2).item()
        assert tb == pytest.approx(vg * (50 - 1) / 50, rel=1e-10)


@pytest.fixture(scope="module")
def fixed():
    sched = build_linear(1e-3, 2e-2, 40)
    base = ExactGauss(np.zeros(1), sched)
    theta = [np.array([0.25]), np.array([-0.1])]
    traj = ctl.simulate_controlled(base, linear_ctrl(theta), sched, 20,
                                   MEAS, np.random.default_rng(28), n=16)
    return traj, theta


class TestSubsampling:
    @staticmethod
    def _grad(traj, theta):
        tape = ad.Tape()
        leaves = [tape.leaf(theta[0]), tape.leaf(theta[1])]
        loss = ctl.vargrad_loss(traj, linear_ctrl(None), leaves)
        g = ad.backward(loss)
        return np.array([g[leaves[0]][0], g[leaves[1]][0]]), loss.item()

    @pytest.mark.parametrize("rho", [0.0, 1.0001, -0.2])
    def test_fraction_validated(self, fixed, rho):
        traj, _ = fixed
        with pytest.raises(ValueError, match="fraction"):
            ctl.subsample_gradients(traj, rho, np.random.default_rng(0))

    def test_full_fraction_is_identity(self, fixed):
        traj, theta = fixed
        g_full, v_full = self._grad(traj, theta)
        masked = ctl.subsample_gradients(traj, 1.0, np.random.default_rng(29))
        g1, v1 = self._grad(masked, theta)
        assert np.array_equal(g_full, g1)
        assert v_full == v1

    def test_loss_value_is_mask_independent(self, fixed):
        traj, theta = fixed
        _, v_full = self._grad(traj, theta)
        for seed in range(5):
            masked = ctl.subsample_gradients(traj, 0.2,
                                             np.random.default_rng(seed))
            _, v = self._grad(masked, theta)
            assert v == pytest.approx(v_full, abs=1e-12)

    def test_scale_hits_selected_steps_only(self, fixed):
        traj, _ = fixed
        masked = ctl.subsample_gradients(traj, 0.25,
                                         np.random.default_rng(30))
        K = traj.n_steps
        m = math.ceil(0.25 * K)
        assert masked.grad_scale.shape == (K,)
        assert (masked.grad_scale > 0).sum() == m
        assert np.allclose(masked.grad_scale[masked.grad_scale > 0], K / m)

    def test_masked_gradient_is_unbiased(self, fixed):
        traj, theta = fixed
        g_full, _ = self._grad(traj, theta)
        mrng = np.random.default_rng(31)
        acc = np.zeros(2)
        draws = 1200
        for _ in range(draws):
            masked = ctl.subsample_gradients(traj, 0.2, mrng)
            g, _ = self._grad(masked, theta)
            acc += g
        acc /= draws
        rel = np.abs(acc - g_full) / np.maximum(np.abs(g_full), 1e-12)
        assert np.all(rel < 0.08)


class TestValueBiasProbe:
    def test_slope_recovers_rate(self):
        out = ctl.value_bias_probe(beta=0.8, horizons=np.linspace(2, 9, 8),
                                   sigma0=1.4)
        assert abs(out["slope"] - 0.8) / 0.8 < 0.05

    def test_tv_monotone_decreasing(self):
        out = ctl.value_bias_probe(beta=0.5, horizons=np.linspace(1, 12, 10),
                                   sigma0=1.4)
        assert np.all(np.diff(out["tv"]) < 0)

    def test_already_stationary_target_has_zero_gap(self):
        out = ctl.value_bias_probe(beta=0.8, horizons=[1.0, 4.0], sigma0=1.0)
        assert np.allclose(out["tv"], 0.0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="beta"):
            ctl.value_bias_probe(beta=0.0, horizons=[1.0, 2.0])
        with pytest.raises(ValueError, match="horizons"):
            ctl.value_bias_probe(beta=0.5, horizons=[2.0])

    def test_nonzero_mean_target_decays_too(self):
        out = ctl.value_bias_probe(beta=1.0, horizons=np.linspace(2, 8, 6),
                                   sigma0=1.0, mu0=0.9)
        assert np.all(out["tv"] > 0)
        assert abs(out["slope"] - 0.5) / 0.5 < 0.08  # mean decays at beta/2


class TestAdapterAndDump:
    def test_score_adapter_rescales_noise_correction(self):
        sched = build_linear(1e-4, 2e-2, 100)
        eps_model = EpsilonModel(2, sched, hidden=(16, 16), seed=3)
        mask = prb.Mask(np.array([1.0, 0.0]))
        meas = prb.Measurement(y=np.array([0.4]), operator=mask,
                               noise=prb.NoiseModel("gaussian", 0.3))
        h = ht.HTransformModel(2, sched, mask, hidden=(16, 16), seed=4)
        fn = ctl.score_control_from_h(h, eps_model, meas)
        x = np.random.default_rng(32).normal(size=(5, 2))
        k = 40
        raw = ht.h_forward(h, eps_model, x, k, meas)
        got = fn(x, k)
        expect = -raw / math.sqrt(1.0 - sched.abar(k))
        assert np.allclose(got, expect, atol=1e-12)

    def test_score_adapter_taped_path(self):
        sched = build_linear(1e-4, 2e-2, 100)
        eps_model = EpsilonModel(1, sched, hidden=(8, 8), seed=5)
        mask = prb.Mask(np.array([1.0]))
        meas = prb.Measurement(y=np.array([0.2]), operator=mask,
                               noise=prb.NoiseModel("gaussian", 0.4))
        h = ht.HTransformModel(1, sched, mask, hidden=(8, 8), seed=6)
        fn = ctl.score_control_from_h(h, eps_model, meas)
        tape = ad.Tape()
        leaves = [tape.leaf(p) for p in h.params]
        out = fn(np.zeros((3, 1)), 10, params=leaves)
        assert isinstance(out, ad.Tensor)
        grads = ad.backward(ad.tsum(out))
        assert any(np.any(grads[p] != 0) for p in leaves)

    def test_csv_dump_layout(self):
        traj = ctl.simulate_controlled(BASE, hstar, S1000, 6, MEAS,
                                       np.random.default_rng(33), n=8)
        text = ctl.trajectory_csv(traj)
        lines = text.strip().split("\n")
        assert lines[0].startswith("step,k,alpha")
        assert len(lines) == 6 + 2  # header + steps + terminal row
        first = lines[1].split(",")
        assert int(first[1]) == traj.ks[0]
        assert float(first[2]) == pytest.approx(traj.alphas[0])
