"""Neural wavefunction: exact symmetries, derivative checks, serialization.

Finite-difference oracles use central differences; tolerances follow the
module contracts (1e-5 relative for first derivatives and parameter
gradients, 1e-4 relative for the Laplacian).
"""

import json

import numpy as np
import pytest

from fermivmc import ansatz
from fermivmc.ansatz import (
    AnsatzConfig,
    envelope,
    features,
    forward_layers,
    init_params,
    load_params,
    log_psi,
    log_psi_batch,
    n_parameters,
    orbitals,
    param_grad_logpsi,
    param_spec,
    save_params,
)
from fermivmc.molecule import Atom, Molecule

H_ATOM = Molecule((Atom("H", (0.0, 0.0, 0.0)),))
H2 = Molecule((Atom("H", (0.0, 0.0, 0.0)), Atom("H", (0.0, 0.0, 1.4))))
LI = Molecule((Atom("Li", (0.0, 0.0, 0.0)),))
LIH = Molecule((Atom("Li", (0.0, 0.0, 0.0)), Atom("H", (0.0, 0.0, 3.015))))

CFG_H = AnsatzConfig(n_up=1, n_down=0)
CFG_H2 = AnsatzConfig(n_up=1, n_down=1)
CFG_LI = AnsatzConfig(n_up=2, n_down=1)
CFG_LIH = AnsatzConfig(n_up=2, n_down=2)

SMALL = dict(n_determinants=1, hidden_one=4, hidden_two=2, n_layers=1)


def _random_positions(rng, n, scale=1.5):
    return rng.normal(scale=scale, size=(n, 3))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            AnsatzConfig(n_determinants=0, n_up=1, n_down=0)
        with pytest.raises(ValueError):
            AnsatzConfig(n_layers=0, n_up=1, n_down=0)
        with pytest.raises(ValueError):
            AnsatzConfig(hidden_one=0, n_up=1, n_down=0)

    def test_parameter_count_is_pure_function_of_config(self):
        n1 = n_parameters(CFG_LIH, LIH)
        n2 = sum(p.size for p in init_params(CFG_LIH, LIH, seed=5).values())
        assert n1 == n2
        spec_shapes = dict(param_spec(CFG_LIH, LIH))
        params = init_params(CFG_LIH, LIH, seed=6)
        assert set(params) == set(spec_shapes)
        for name, arr in params.items():
            assert arr.shape == spec_shapes[name]
            assert np.isfinite(arr).all()


class TestFeatures:
    def test_electron_at_nucleus_zero_feature(self):
        fs = features(np.array([[0.0, 0.0, 0.0]]), H2)
        np.testing.assert_array_equal(fs.one_electron[0, :4], 0.0)

    def test_swap_swaps_one_electron_rows(self):
        rng = np.random.default_rng(0)
        pos = _random_positions(rng, 3)
        fs1 = features(pos, LI)
        swapped = pos[[1, 0, 2]]
        fs2 = features(swapped, LI)
        np.testing.assert_array_equal(fs1.one_electron[[1, 0, 2]], fs2.one_electron)

    def test_h2_midpoint_equidistant(self):
        fs = features(np.array([[0.0, 0.0, 0.7]]), H2)
        assert fs.one_electron[0, 3] == pytest.approx(fs.one_electron[0, 7], abs=1e-14)

    def test_pair_features_antisymmetric_vector_symmetric_norm(self):
        rng = np.random.default_rng(1)
        pos = _random_positions(rng, 4)
        fs = features(pos, LIH)
        vec = fs.two_electron[..., :3]
        norm = fs.two_electron[..., 3]
        np.testing.assert_allclose(vec, -vec.transpose(1, 0, 2), atol=1e-14)
        np.testing.assert_allclose(norm, norm.T, atol=1e-14)

    def test_diagonal_pairs_zero(self):
        rng = np.random.default_rng(2)
        fs = features(_random_positions(rng, 4), LIH)
        np.testing.assert_array_equal(
            fs.two_electron[np.arange(4), np.arange(4)], 0.0)


class TestForwardLayers:
    def test_same_spin_permutation_equivariance_exact(self):
        rng = np.random.default_rng(3)
        params = init_params(CFG_LIH, LIH, seed=3)
        pos = _random_positions(rng, 4)
        h1 = forward_layers(features(pos, LIH), params, CFG_LIH)
        swapped = pos[[1, 0, 2, 3]]              # swap the two up electrons
        h2 = forward_layers(features(swapped, LIH), params, CFG_LIH)
        np.testing.assert_array_equal(h1[[1, 0, 2, 3]], h2)

    def test_single_electron_empty_spin_means_are_zero(self):
        # the pooled mean over an empty spin block is a zero vector
        h = np.arange(12.0).reshape(3, 4)
        empty = ansatz._spin_mean(h[None], 2, 2, axis=1)
        np.testing.assert_array_equal(empty, np.zeros((1, 4)))
        # and the full forward pass accepts a one-electron system
        params = init_params(CFG_H, H_ATOM, seed=4)
        out = forward_layers(features(np.array([[0.1, 0.2, 0.3]]), H_ATOM),
                             params, CFG_H)
        assert np.isfinite(out).all()

    def test_depth_zero_passthrough(self):
        rng = np.random.default_rng(5)
        pos = _random_positions(rng, 2)
        fs = features(pos, H2)
        out = forward_layers(fs, {}, CFG_H2)
        np.testing.assert_array_equal(out, fs.one_electron)


class TestEnvelope:
    def test_identity_at_nucleus(self):
        sigma = np.eye(3)[None]
        assert envelope(np.zeros(3), H_ATOM, sigma, np.ones(1)) == pytest.approx(1.0)

    def test_decay_below_1e12_beyond_40(self):
        sigma = np.eye(3)[None]
        val = envelope(np.array([41.0, 0, 0]), H_ATOM, sigma, np.ones(1))
        assert 0 < val < 1e-12

    def test_two_nuclei_closed_form(self):
        sigma = np.stack([np.eye(3), np.eye(3)])
        val = envelope(np.zeros(3), H2, sigma, np.ones(2))
        assert val == pytest.approx(1.0 + np.exp(-1.4), rel=1e-12)

    def test_linear_in_pi(self):
        rng = np.random.default_rng(6)
        sigma = rng.normal(size=(2, 3, 3))
        pi = rng.normal(size=2)
        r = rng.normal(size=3)
        v1 = envelope(r, H2, sigma, pi)
        v3 = envelope(r, H2, sigma, 3.0 * pi)
        assert v3 == pytest.approx(3.0 * v1, rel=1e-12)


class TestOrbitals:
    def test_zero_weights_unit_bias_reduce_to_envelope(self):
        params = init_params(CFG_H2, H2, seed=7)
        params["orb_up/w"] = np.zeros_like(params["orb_up/w"])
        params["orb_up/b"] = np.ones_like(params["orb_up/b"])
        params["orb_dn/w"] = np.zeros_like(params["orb_dn/w"])
        params["orb_dn/b"] = np.ones_like(params["orb_dn/b"])
        rng = np.random.default_rng(8)
        pos = _random_positions(rng, 2)
        k = CFG_H2.n_determinants
        env_up = np.empty((k, 1, 1))
        env_dn = np.empty((k, 1, 1))
        for kk in range(k):
            env_up[kk, 0, 0] = envelope(pos[0], H2, params["env_up/sigma"][kk, 0],
                                        params["env_up/pi"][kk, 0])
            env_dn[kk, 0, 0] = envelope(pos[1], H2, params["env_dn/sigma"][kk, 0],
                                        params["env_dn/pi"][kk, 0])
        latents = forward_layers(features(pos, H2), params, CFG_H2)
        phi_up, phi_dn = orbitals(latents, env_up, env_dn, params, CFG_H2)
        np.testing.assert_allclose(phi_up, env_up, atol=1e-14)
        np.testing.assert_allclose(phi_dn, env_dn, atol=1e-14)

    def test_shapes_h2_two_determinants(self):
        cfg = AnsatzConfig(n_determinants=2, n_up=1, n_down=1)
        params = init_params(cfg, H2, seed=9)
        pos = np.array([[0.1, 0.0, 0.2], [0.0, -0.1, 1.0]])
        phi_up, phi_dn, _ = ansatz.orbital_matrices_with_cache(params, pos, H2, cfg)
        assert phi_up.shape == (1, 2, 1, 1)
        assert phi_dn.shape == (1, 2, 1, 1)

    def test_same_spin_swap_permutes_columns(self):
        params = init_params(CFG_LIH, LIH, seed=10)
        rng = np.random.default_rng(10)
        pos = _random_positions(rng, 4)
        up1, _, _ = ansatz.orbital_matrices_with_cache(params, pos, LIH, CFG_LIH)
        up2, _, _ = ansatz.orbital_matrices_with_cache(
            params, pos[[1, 0, 2, 3]], LIH, CFG_LIH)
        np.testing.assert_array_equal(up1[..., [1, 0]], up2)


class TestLogPsi:
    def test_k1_product_of_1x1_blocks(self):
        cfg = AnsatzConfig(n_determinants=1, n_up=1, n_down=1)
        params = init_params(cfg, H2, seed=11)
        pos = np.array([[0.2, 0.1, 0.4], [-0.3, 0.0, 1.1]])
        phi_up, phi_dn, _ = ansatz.orbital_matrices_with_cache(params, pos, H2, cfg)
        expected = np.log(abs(phi_up[0, 0, 0, 0])) + np.log(abs(phi_dn[0, 0, 0, 0]))
        res = log_psi(params, pos, H2, cfg)
        assert res.log_magnitude == pytest.approx(expected, rel=1e-12)

    def test_antisymmetry_100_random_triples(self):
        rng = np.random.default_rng(12)
        cases = [(LIH, CFG_LIH, 60), (LI, CFG_LI, 40)]
        count = 0
        for mol, cfg, reps in cases:
            n = cfg.n_electrons
            for rep in range(reps):
                params = init_params(cfg, mol, seed=1000 + count)
                pos = _random_positions(rng, n)
                if rng.uniform() < 0.5 and cfg.n_up >= 2:
                    i, j = rng.choice(cfg.n_up, size=2, replace=False)
                else:
                    i, j = cfg.n_up + rng.choice(cfg.n_down, size=2, replace=False)
                swapped = pos.copy()
                swapped[[i, j]] = swapped[[j, i]]
                a = log_psi(params, pos, mol, cfg)
                b = log_psi(params, swapped, mol, cfg)
                assert b.sign == -a.sign
                assert b.log_magnitude == pytest.approx(a.log_magnitude, abs=1e-12)
                count += 1
        assert count == 100

    def test_matches_linear_space_determinant_sum(self):
        rng = np.random.default_rng(13)
        for seed in range(10):
            params = init_params(CFG_LIH, LIH, seed=seed)
            pos = _random_positions(rng, 4)
            phi_up, phi_dn, _ = ansatz.orbital_matrices_with_cache(
                params, pos, LIH, CFG_LIH)
            dets = (np.linalg.det(phi_up[0]) * np.linalg.det(phi_dn[0]))
            psi = dets.sum()
            res = log_psi(params, pos, LIH, CFG_LIH)
            assert res.log_magnitude == pytest.approx(np.log(abs(psi)), rel=1e-10)
            assert res.sign == pytest.approx(np.sign(psi))

    def test_empty_down_block_contributes_factor_one(self):
        params = init_params(CFG_H, H_ATOM, seed=14)
        pos = np.array([[0.4, -0.2, 0.3]])
        phi_up, _, _ = ansatz.orbital_matrices_with_cache(params, pos, H_ATOM, CFG_H)
        dets = np.linalg.det(phi_up[0])
        psi = dets.sum()
        res = log_psi(params, pos, H_ATOM, CFG_H)
        assert res.log_magnitude == pytest.approx(np.log(abs(psi)), rel=1e-10)

    def test_batch_matches_single_exactly(self):
        rng = np.random.default_rng(15)
        params = init_params(CFG_LIH, LIH, seed=15)
        stack = rng.normal(scale=1.5, size=(6, 4, 3))
        signs, logmags = log_psi_batch(params, stack, LIH, CFG_LIH)
        for w in range(6):
            single = log_psi(params, stack[w], LIH, CFG_LIH)
            assert signs[w] == single.sign
            assert logmags[w] == single.log_magnitude

    def test_boundary_decay_at_radius_100(self):
        params = init_params(CFG_H, H_ATOM, seed=0)
        pos = np.array([[100.0, 0.0, 0.0]])
        res = log_psi(params, pos, H_ATOM, CFG_H)
        assert res.log_magnitude < -100.0


class TestCoordinateDerivatives:
    def _fd_grad(self, f, pos, h=1e-4):
        g = np.zeros_like(pos)
        for idx in np.ndindex(pos.shape):
            dp = pos.copy()
            dp[idx] += h
            dm = pos.copy()
            dm[idx] -= h
            g[idx] = (f(dp) - f(dm)) / (2 * h)
        return g

    def _fd_lap(self, f, pos, h=2e-3):
        f0 = f(pos)
        total = 0.0
        for idx in np.ndindex(pos.shape):
            dp = pos.copy()
            dp[idx] += h
            dm = pos.copy()
            dm[idx] -= h
            total += (f(dp) + f(dm) - 2 * f0) / (h * h)
        return total

    def test_gradient_vs_finite_differences_20_instances(self):
        rng = np.random.default_rng(16)
        cases = [(H_ATOM, CFG_H, 7), (H2, CFG_H2, 7), (LIH, CFG_LIH, 6)]
        checked = 0
        for mol, cfg, reps in cases:
            for rep in range(reps):
                params = init_params(cfg, mol, seed=2000 + checked)
                pos = _random_positions(rng, cfg.n_electrons)

                def f(p):
                    return log_psi(params, p, mol, cfg).log_magnitude

                exact = ansatz.grad_logpsi(params, pos, mol, cfg)
                approx = self._fd_grad(f, pos)
                scale = max(1.0, np.abs(exact).max())
                assert np.abs(exact - approx).max() / scale < 1e-5
                checked += 1
        assert checked == 20

    def test_laplacian_vs_finite_differences_20_instances(self):
        rng = np.random.default_rng(17)
        cases = [(H_ATOM, CFG_H, 7), (H2, CFG_H2, 7), (LIH, CFG_LIH, 6)]
        checked = 0
        for mol, cfg, reps in cases:
            for rep in range(reps):
                params = init_params(cfg, mol, seed=3000 + checked)
                pos = _random_positions(rng, cfg.n_electrons)

                def f(p):
                    return log_psi(params, p, mol, cfg).log_magnitude

                exact = ansatz.laplacian_logpsi(params, pos, mol, cfg)
                approx = self._fd_lap(f, pos)
                assert abs(exact - approx) / max(1.0, abs(exact)) < 1e-4
                checked += 1
        assert checked == 20

    def test_gradient_mirror_equivariance(self):
        # reflecting every electron and nucleus through z -> -z reflects the
        # gradient: its z components flip sign, x/y components are unchanged
        params = init_params(CFG_H2, H2, seed=18)
        mirror_mol = Molecule(
            tuple(Atom(a.symbol, a.position * np.array([1, 1, -1])) for a in H2.atoms))
        rng = np.random.default_rng(18)
        pos = _random_positions(rng, 2)
        g = ansatz.grad_logpsi(params, pos, H2, CFG_H2)
        g_mirror = ansatz.grad_logpsi(params, pos * np.array([1, 1, -1]),
                                      mirror_mol, CFG_H2)
        np.testing.assert_allclose(g_mirror, g * np.array([1, 1, -1]), atol=1e-12)

    def test_laplacian_translation_invariance(self):
        params = init_params(CFG_LIH, LIH, seed=19)
        rng = np.random.default_rng(19)
        pos = _random_positions(rng, 4)
        shift = np.array([0.8, -1.1, 2.5])
        moved_mol = Molecule(
            tuple(Atom(a.symbol, a.position + shift) for a in LIH.atoms))
        l1 = ansatz.laplacian_logpsi(params, pos, LIH, CFG_LIH)
        l2 = ansatz.laplacian_logpsi(params, pos + shift, moved_mol, CFG_LIH)
        assert l2 == pytest.approx(l1, abs=1e-10)

    def test_tiny_sigma_still_matches_finite_differences(self):
        # near-constant envelope: derivative machinery stays consistent
        params = init_params(CFG_H2, H2, seed=20)
        for key in ("env_up/sigma", "env_dn/sigma"):
            params[key] = params[key] * 1e-6
        pos = np.array([[0.3, -0.2, 0.5], [-0.1, 0.4, 0.9]])

        def f(p):
            return log_psi(params, p, H2, CFG_H2).log_magnitude

        exact = ansatz.grad_logpsi(params, pos, H2, CFG_H2)
        approx = self._fd_grad(f, pos)
        scale = max(1.0, np.abs(exact).max())
        assert np.abs(exact - approx).max() / scale < 1e-5

    def test_derivatives_batch_consistent_with_singles(self):
        params = init_params(CFG_H2, H2, seed=21)
        rng = np.random.default_rng(21)
        stack = rng.normal(scale=1.2, size=(4, 2, 3))
        sign, logmag, grad, lap = ansatz.derivatives_batch(params, stack, H2, CFG_H2)
        for w in range(4):
            g = ansatz.grad_logpsi(params, stack[w], H2, CFG_H2)
            l = ansatz.laplacian_logpsi(params, stack[w], H2, CFG_H2)
            np.testing.assert_array_equal(grad[w], g)
            assert lap[w] == l


class TestParameterGradients:
    def test_vs_finite_differences_20_instances(self):
        cfg_small = AnsatzConfig(n_up=1, n_down=1, **SMALL)
        rng = np.random.default_rng(22)
        h = 1e-5
        for instance in range(20):
            params = init_params(cfg_small, H2, seed=4000 + instance)
            pos = _random_positions(rng, 2)
            grads = param_grad_logpsi(params, pos, H2, cfg_small)
            for name in sorted(grads):
                flat = params[name].ravel()
                if flat.size == 0:
                    continue
                picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
                for k in picks:
                    orig = flat[k]
                    flat[k] = orig + h
                    up = log_psi(params, pos, H2, cfg_small).log_magnitude
                    flat[k] = orig - h
                    dn = log_psi(params, pos, H2, cfg_small).log_magnitude
                    flat[k] = orig
                    approx = (up - dn) / (2 * h)
                    exact = grads[name].ravel()[k]
                    assert abs(exact - approx) <= 1e-5 * max(1.0, abs(exact)) + 1e-9, (
                        f"{name}[{k}] instance {instance}")

    def test_empty_down_block_grads_are_empty(self):
        params = init_params(CFG_H, H_ATOM, seed=23)
        pos = np.array([[0.3, 0.4, -0.2]])
        grads = param_grad_logpsi(params, pos, H_ATOM, CFG_H)
        assert set(grads) == set(params)
        for name in ("orb_dn/w", "orb_dn/b", "env_dn/sigma", "env_dn/pi"):
            assert grads[name].size == 0 or not grads[name].any()

    def test_batch_grads_keep_walker_axis(self):
        params = init_params(CFG_H2, H2, seed=24)
        rng = np.random.default_rng(24)
        stack = rng.normal(size=(3, 2, 3))
        grads, sign, logmag = ansatz.param_grad_logpsi_batch(params, stack, H2, CFG_H2)
        for name, g in grads.items():
            assert g.shape == (3,) + params[name].shape
        for w in range(3):
            single = param_grad_logpsi(params, stack[w], H2, CFG_H2)
            for name in single:
                np.testing.assert_allclose(grads[name][w], single[name], atol=1e-12)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(CFG_LIH, LIH, seed=25)
        path = tmp_path / "params.npz"
        save_params(path, params, CFG_LIH, extra={"note": "x"})
        loaded, cfg, extra = load_params(path)
        assert cfg == CFG_LIH
        assert extra == {"note": "x"}
        assert set(loaded) == set(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.npz"
        header = {"format_version": 999, "config": {}, "extra": {}}
        np.savez(path, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8))
        with pytest.raises(ValueError, match="unsupported checkpoint format"):
            load_params(path)
