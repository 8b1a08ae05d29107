"""Walker initialization and the Metropolis kernel: exactness and statistics."""

import numpy as np
import pytest
from scipy import stats

from fermivmc import sampler
from fermivmc.charge_init import ElectronAssignment
from fermivmc.molecule import Atom, Molecule
from fermivmc.sampler import (
    SamplerConfig,
    WalkerBatch,
    init_walkers,
    make_rngs,
    metropolis_step,
    refresh_log_prob,
    run_chain,
)


def _h_assignment():
    return ElectronAssignment((1,), (1,), (0,))


def _h_atom():
    return Molecule((Atom("H", (0.0, 0.0, 0.0)),))


class TestConfigValidation:
    def test_defaults_valid(self):
        cfg = SamplerConfig()
        assert cfg.batch_size == 8
        assert cfg.steps_between_updates == 10

    @pytest.mark.parametrize("field", ["batch_size", "steps_between_updates",
                                       "proposal_std", "init_std"])
    def test_positive_fields_enforced(self, field):
        with pytest.raises(ValueError, match=field):
            SamplerConfig(**{field: 0})

    def test_negative_burn_in_rejected(self):
        with pytest.raises(ValueError, match="burn_in"):
            SamplerConfig(burn_in_steps=-1)


class TestInitWalkers:
    def test_mean_near_nucleus(self):
        cfg = SamplerConfig(batch_size=100_000, init_std=1.0, seed=10)
        rngs = make_rngs(cfg.seed, cfg.batch_size)
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs)
        mean = batch.positions.mean(axis=0).ravel()
        tol = 5.0 * cfg.init_std / np.sqrt(cfg.batch_size)
        assert np.abs(mean).max() < tol

    def test_spread_matches_init_std(self):
        cfg = SamplerConfig(batch_size=100_000, init_std=0.7, seed=11)
        rngs = make_rngs(cfg.seed, cfg.batch_size)
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs)
        std = batch.positions.std(axis=0).ravel()
        np.testing.assert_allclose(std, 0.7, atol=0.02)

    def test_zero_electron_atom_contributes_nothing(self):
        # H2+ with both electrons... rather: one electron assigned to atom 0 only
        mol = Molecule((Atom("H", (0, 0, 0)), Atom("H", (0, 0, 20.0))), charge=1)
        assignment = ElectronAssignment((1, 0), (1, 0), (0, 0))
        cfg = SamplerConfig(batch_size=64, init_std=0.5, seed=1)
        batch = init_walkers(mol, assignment, cfg, make_rngs(1, 64))
        # every electron starts near atom 0, far from atom 1
        dist0 = np.linalg.norm(batch.positions.reshape(-1, 3), axis=1)
        assert dist0.max() < 10.0

    def test_up_block_precedes_down_block(self):
        mol = Molecule((Atom("Li", (0, 0, 0)), Atom("H", (0, 0, 30.0))))
        assignment = ElectronAssignment((3, 1), (2, 0), (1, 1))
        cfg = SamplerConfig(batch_size=16, init_std=0.3, seed=2)
        batch = init_walkers(mol, assignment, cfg, make_rngs(2, 16))
        # up block: electrons 0,1 near Li; electron at index 2 (down, Li) near Li;
        # index 3 (down, H) near H
        z = batch.positions[:, :, 2]
        assert np.abs(z[:, :3]).max() < 10.0
        assert np.abs(z[:, 3] - 30.0).max() < 10.0

    def test_fixed_seed_bit_identical(self):
        cfg = SamplerConfig(batch_size=32, seed=7)
        b1 = init_walkers(_h_atom(), _h_assignment(), cfg, make_rngs(7, 32))
        b2 = init_walkers(_h_atom(), _h_assignment(), cfg, make_rngs(7, 32))
        np.testing.assert_array_equal(b1.positions, b2.positions)

    def test_log_psi_fills_log_prob(self):
        cfg = SamplerConfig(batch_size=8, seed=3)

        def log_psi(pos):
            return -0.5 * float((pos ** 2).sum())

        batch = init_walkers(_h_atom(), _h_assignment(), cfg, make_rngs(3, 8),
                             log_psi=log_psi)
        expected = -np.sum(batch.positions ** 2, axis=(1, 2))
        np.testing.assert_allclose(batch.log_prob, expected, atol=1e-14)

    def test_unsatisfiable_start_errors_after_redraws(self):
        cfg = SamplerConfig(batch_size=2, seed=4)
        with pytest.raises(RuntimeError, match="100 draws"):
            init_walkers(_h_atom(), _h_assignment(), cfg, make_rngs(4, 2),
                         log_psi=lambda pos: -np.inf)

    def test_assignment_total_mismatch_rejected(self):
        cfg = SamplerConfig(batch_size=2, seed=5)
        bad = ElectronAssignment((2,), (1,), (1,))
        with pytest.raises(ValueError, match="inconsistent"):
            init_walkers(_h_atom(), bad, cfg, make_rngs(5, 2))


def _gaussian_log_psi():
    def log_psi(pos):
        return -0.5 * float((pos ** 2).sum())

    log_psi.batch = lambda stack: -0.5 * np.sum(stack ** 2, axis=(1, 2))
    return log_psi


class TestMetropolisStep:
    def test_constant_target_accepts_everything(self):
        cfg = SamplerConfig(batch_size=50, seed=0)

        def flat(pos):
            return 0.0

        rngs = make_rngs(0, 50)
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=flat)
        batch = run_chain(batch, flat, cfg, 20, rngs)
        assert batch.acceptance_rate == 1.0

    def test_rejected_proposals_leave_state_bit_identical(self):
        cfg = SamplerConfig(batch_size=16, seed=6)
        rngs = make_rngs(6, 16)
        lp = _gaussian_log_psi()
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)

        def wall(pos):
            return -np.inf

        stepped = metropolis_step(batch, wall, cfg, rngs)
        np.testing.assert_array_equal(stepped.positions, batch.positions)
        np.testing.assert_array_equal(stepped.log_prob, batch.log_prob)
        assert stepped.accept_count == batch.accept_count
        assert stepped.proposal_count == batch.proposal_count + 16

    def test_nonfinite_proposals_auto_reject_inside_mixed_batch(self):
        cfg = SamplerConfig(batch_size=200, proposal_std=1.0, seed=8)
        rngs = make_rngs(8, 200)

        def boxed(pos):
            # hard wall outside |z| < 0.5: non-finite log psi there
            if abs(float(pos[0, 2])) > 0.5:
                return -np.inf
            return 0.0

        batch = init_walkers(
            _h_atom(), _h_assignment(),
            SamplerConfig(batch_size=200, init_std=0.1, seed=8), rngs,
            log_psi=boxed)
        stepped = run_chain(batch, boxed, cfg, 5, rngs)
        assert np.abs(stepped.positions[:, 0, 2]).max() <= 0.5
        assert np.isfinite(stepped.log_prob).all()
        assert 0 < stepped.acceptance_rate < 1

    def test_determinism_across_runs(self):
        cfg = SamplerConfig(batch_size=12, seed=9)
        lp = _gaussian_log_psi()

        def trajectory():
            rngs = make_rngs(9, 12)
            batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)
            return run_chain(batch, lp, cfg, 50, rngs)

        b1, b2 = trajectory(), trajectory()
        np.testing.assert_array_equal(b1.positions, b2.positions)
        np.testing.assert_array_equal(b1.log_prob, b2.log_prob)
        assert b1.accept_count == b2.accept_count

    def test_batched_and_scalar_log_psi_agree(self):
        cfg = SamplerConfig(batch_size=10, seed=14)
        lp_batched = _gaussian_log_psi()

        def lp_scalar(pos):
            return -0.5 * float((pos ** 2).sum())

        def trajectory(lp):
            rngs = make_rngs(14, 10)
            batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)
            return run_chain(batch, lp, cfg, 30, rngs)

        b1, b2 = trajectory(lp_batched), trajectory(lp_scalar)
        np.testing.assert_array_equal(b1.positions, b2.positions)


class TestRunChain:
    def test_zero_steps_is_identity(self):
        cfg = SamplerConfig(batch_size=8, seed=1)
        rngs = make_rngs(1, 8)
        lp = _gaussian_log_psi()
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)
        same = run_chain(batch, lp, cfg, 0, rngs)
        np.testing.assert_array_equal(same.positions, batch.positions)
        assert same.proposal_count == batch.proposal_count

    def test_acceptance_bookkeeping(self):
        cfg = SamplerConfig(batch_size=8, seed=2)
        rngs = make_rngs(2, 8)
        lp = _gaussian_log_psi()
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)
        batch = run_chain(batch, lp, cfg, 25, rngs)
        assert batch.proposal_count == 8 * 25
        assert batch.acceptance_rate == batch.accept_count / batch.proposal_count

    def test_gaussian_target_moments(self):
        """Target 2 log|psi| = -|r|^2: per-coordinate variance is exactly 0.5."""
        cfg = SamplerConfig(batch_size=100, proposal_std=1.0, init_std=0.7, seed=21)
        rngs = make_rngs(21, 100)
        lp = _gaussian_log_psi()
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)
        batch = run_chain(batch, lp, cfg, 200, rngs)   # burn-in
        samples = []
        for _ in range(1000):
            batch = metropolis_step(batch, lp, cfg, rngs)
            samples.append(batch.positions[:, 0, :])
        coords = np.stack(samples)                      # (steps, walkers, 3)
        assert coords.shape[0] * coords.shape[1] == 100_000
        estimate = coords.var()
        # blocked std-error over chain segments absorbs autocorrelation
        block_vars = coords.reshape(50, -1).var(axis=1)
        stderr = block_vars.std(ddof=1) / np.sqrt(len(block_vars))
        assert abs(estimate - 0.5) < 3.0 * stderr

    def test_detailed_balance_chi_square(self):
        """Laplace marginal target: long-run histogram passes chi-square at 1%."""
        n_chains = 1500

        def lp(pos):
            x, y, z = pos[0]
            return -0.5 * (abs(x) + y * y + z * z)

        lp.batch = lambda stack: -0.5 * (
            np.abs(stack[:, 0, 0]) + stack[:, 0, 1] ** 2 + stack[:, 0, 2] ** 2)

        cfg = SamplerConfig(batch_size=n_chains, proposal_std=1.0, init_std=1.0,
                            seed=31)
        rngs = make_rngs(31, n_chains)
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp)
        batch = run_chain(batch, lp, cfg, 300, rngs)
        x = batch.positions[:, 0, 0]        # 1500 independent chain endpoints

        edges = np.array([-np.inf, -3, -2.25, -1.5, -0.75, -0.25,
                          0.25, 0.75, 1.5, 2.25, 3, np.inf])

        def laplace_cdf(v):
            v = np.asarray(v, dtype=float)
            return np.where(v < 0, 0.5 * np.exp(np.minimum(v, 0)),
                            1.0 - 0.5 * np.exp(-np.maximum(v, 0)))

        probs = np.diff(laplace_cdf(edges))
        observed, _ = np.histogram(x, bins=edges)
        expected = probs * n_chains
        assert expected.min() > 10
        result = stats.chisquare(observed, expected)
        assert result.pvalue > 0.01


class TestRefreshLogProb:
    def test_recomputes_every_entry(self):
        cfg = SamplerConfig(batch_size=8, seed=4)
        rngs = make_rngs(4, 8)
        lp1 = _gaussian_log_psi()
        batch = init_walkers(_h_atom(), _h_assignment(), cfg, rngs, log_psi=lp1)

        def lp2(pos):
            return -float((pos ** 2).sum())   # different wavefunction

        refreshed = refresh_log_prob(batch, lp2)
        np.testing.assert_allclose(
            refreshed.log_prob, -2.0 * np.sum(batch.positions ** 2, axis=(1, 2)),
            atol=1e-14)
        np.testing.assert_array_equal(refreshed.positions, batch.positions)
        assert refreshed.accept_count == batch.accept_count
