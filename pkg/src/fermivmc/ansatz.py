"""Neural wavefunction: feature layers, multiplicative envelopes, orbital
matrices, and the signed log-determinant evaluation of log|psi|.

The same forward pass serves three callers: value-only evaluation for the
sampler, value+gradient+Laplacian for local energies, and a cached variant
that a hand-written reverse pass consumes for parameter gradients. Coordinate
derivatives propagate forward as (value, jacobian, laplacian) triples, so the
Laplacian costs one pass instead of 3N Hessian columns; parameter gradients
run backward from cotangents seeded at the orbital matrices.

Conventions: positions are (n_electrons, 3) Bohr with the n_up spin-up
electrons occupying the leading rows; batched variants prepend a walker axis.
psi = sum_k det(Phi_up_k) * det(Phi_dn_k); a 0x0 spin block contributes a
factor of 1, so single-spin systems need no special casing. The kinetic
operator uses all 3N Cartesian coordinates (squared gradient plus pure second
derivatives of log|psi|).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .molecule import Molecule


@dataclass
class AnsatzConfig:
    n_determinants: int = 4
    hidden_one: int = 32
    hidden_two: int = 8
    n_layers: int = 2
    n_up: int = 1
    n_down: int = 0

    def __post_init__(self):
        for name in ("n_determinants", "hidden_one", "hidden_two", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_up < 0 or self.n_down < 0 or self.n_up + self.n_down < 1:
            raise ValueError("need at least one electron")

    @property
    def n_electrons(self) -> int:
        return self.n_up + self.n_down


@dataclass
class FeatureSet:
    one_electron: np.ndarray   # (n_electrons, 4*n_atoms): per nucleus (dx,dy,dz,|d|)
    two_electron: np.ndarray   # (n_electrons, n_electrons, 4), zero diagonal


@dataclass
class LogPsi:
    sign: float
    log_magnitude: float


# ---------------------------------------------------------------------------
# tracked triples: val (B, *rest), jac (B, 3N, *rest) or None, lap like val.
# jac None means derivatives are not being tracked; lap None means zero.

class _TD:
    __slots__ = ("val", "jac", "lap")

    def __init__(self, val, jac=None, lap=None):
        self.val, self.jac, self.lap = val, jac, lap


def _lap_or_zero(a: _TD):
    return a.lap if a.lap is not None else np.zeros_like(a.val)


def _td_add(a: _TD, b: _TD) -> _TD:
    val = a.val + b.val
    if a.jac is None and b.jac is None:
        return _TD(val)
    jac = a.jac if b.jac is None else b.jac if a.jac is None else a.jac + b.jac
    if a.lap is None:
        lap = b.lap
    elif b.lap is None:
        lap = a.lap
    else:
        lap = a.lap + b.lap
    return _TD(val, jac, lap)


def _td_mul(a: _TD, b: _TD) -> _TD:
    """Elementwise product with the Laplacian cross term."""
    val = a.val * b.val
    if a.jac is None and b.jac is None:
        return _TD(val)
    av, bv = np.expand_dims(a.val, 1), np.expand_dims(b.val, 1)
    jac = 0.0
    cross = 0.0
    if a.jac is not None:
        jac = a.jac * bv
    if b.jac is not None:
        jac = jac + b.jac * av
    if a.jac is not None and b.jac is not None:
        cross = 2.0 * (a.jac * b.jac).sum(axis=1)
    lap = _lap_or_zero(a) * b.val + a.val * _lap_or_zero(b) + cross
    return _TD(val, jac, lap)


def _td_tanh(a: _TD) -> _TD:
    t = np.tanh(a.val)
    if a.jac is None:
        return _TD(t)
    d1 = 1.0 - t * t
    jac = np.expand_dims(d1, 1) * a.jac
    lap = -2.0 * t * d1 * (a.jac ** 2).sum(axis=1) + d1 * _lap_or_zero(a)
    return _TD(t, jac, lap)


def _td_exp_neg(a: _TD) -> _TD:
    """exp(-a)."""
    e = np.exp(-a.val)
    if a.jac is None:
        return _TD(e)
    jac = -np.expand_dims(e, 1) * a.jac
    lap = e * ((a.jac ** 2).sum(axis=1) - _lap_or_zero(a))
    return _TD(e, jac, lap)


def _td_linear(a: _TD, fn_val, fn_jac) -> _TD:
    """Apply a linear map given as val-shaped and jac-shaped callables."""
    val = fn_val(a.val)
    if a.jac is None:
        return _TD(val)
    lap = fn_val(a.lap) if a.lap is not None else None
    return _TD(val, fn_jac(a.jac), lap)


def _td_concat(parts: list[_TD], axis: int = -1) -> _TD:
    val = np.concatenate([p.val for p in parts], axis=axis)
    if all(p.jac is None for p in parts):
        return _TD(val)
    jac = np.concatenate([p.jac for p in parts], axis=axis)
    lap = np.concatenate([_lap_or_zero(p) for p in parts], axis=axis)
    return _TD(val, jac, lap)


def _td_norm(a: _TD) -> _TD:
    """Euclidean norm over the last axis; a.lap must be None (zero).

    At an exact zero the value is fine but derivatives are undefined;
    the guarded divisor keeps them finite there (the zero diagonal of
    pair distances relies on this, its jacobian vanishes identically).
    """
    n = np.linalg.norm(a.val, axis=-1)
    if a.jac is None:
        return _TD(n)
    safe = np.where(n > 0.0, n, 1.0)
    unit = a.val / safe[..., None]
    jac = (np.expand_dims(unit, 1) * a.jac).sum(axis=-1)
    jsq = (a.jac ** 2).sum(axis=(1, -1))
    lap = (jsq - (jac ** 2).sum(axis=1)) / safe
    return _TD(n, jac, lap)


# ---------------------------------------------------------------------------
# parameters

def _layer_dims(config: AnsatzConfig, n_atoms: int):
    """Per-layer (c_one_in, c_two_in, concat_width, updates_two) and the
    final latent width."""
    c1, c2 = 4 * n_atoms, 4
    dims = []
    for layer in range(config.n_layers):
        updates_two = layer < config.n_layers - 1
        dims.append((c1, c2, 3 * c1 + 2 * c2, updates_two))
        c1 = config.hidden_one
        if updates_two:
            c2 = config.hidden_two
    return dims, c1


def param_spec(config: AnsatzConfig, mol: Molecule) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; the flat layout used by checkpoints."""
    dims, c_final = _layer_dims(config, mol.n_atoms)
    k, m = config.n_determinants, mol.n_atoms
    spec = []
    for layer, (c1, c2, f, updates_two) in enumerate(dims):
        spec.append((f"layer{layer}/w1", (config.hidden_one, f)))
        spec.append((f"layer{layer}/b1", (config.hidden_one,)))
        if updates_two:
            spec.append((f"layer{layer}/w2", (config.hidden_two, c2)))
            spec.append((f"layer{layer}/b2", (config.hidden_two,)))
    for spin, n in (("up", config.n_up), ("dn", config.n_down)):
        spec.append((f"orb_{spin}/w", (k, n, c_final)))
        spec.append((f"orb_{spin}/b", (k, n)))
        spec.append((f"env_{spin}/sigma", (k, n, m, 3, 3)))
        spec.append((f"env_{spin}/pi", (k, n, m)))
    return spec


def n_parameters(config: AnsatzConfig, mol: Molecule) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_spec(config, mol))


def init_params(config: AnsatzConfig, mol: Molecule, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded initialization: variance-scaled layer weights, zero biases,
    identity envelope sigma, unit envelope pi, small orbital projections."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_spec(config, mol):
        if name.endswith("/w1") or name.endswith("/w2"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
        elif name.endswith("orb_up/w") or name.endswith("orb_dn/w"):
            # kept small so the envelope dominates far from the nuclei
            params[name] = rng.normal(0.0, 1.0 / shape[2], shape)
        elif name.endswith("/sigma"):
            params[name] = np.broadcast_to(np.eye(3), shape).copy()
        elif name.endswith("/pi"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# ---------------------------------------------------------------------------
# features

def features(positions: np.ndarray, mol: Molecule) -> FeatureSet:
    """One- and two-electron input features for a single configuration."""
    pos = np.asarray(positions, dtype=float)
    nuclei = mol.positions
    d1 = pos[:, None, :] - nuclei[None, :, :]
    r1 = np.linalg.norm(d1, axis=-1)
    one = np.concatenate([d1, r1[..., None]], axis=-1).reshape(len(pos), -1)
    d2 = pos[:, None, :] - pos[None, :, :]
    r2 = np.linalg.norm(d2, axis=-1)
    np.fill_diagonal(r2, 0.0)
    two = np.concatenate([d2, r2[..., None]], axis=-1)
    return FeatureSet(one_electron=one, two_electron=two)


def _tracked_features(positions: np.ndarray, mol: Molecule, want_derivs: bool):
    """Batched tracked features; returns (h1, h2, diff1) with diff1 kept for
    the envelopes."""
    pos = np.asarray(positions, dtype=float)
    batch, n, _ = pos.shape
    d = 3 * n
    if want_derivs:
        eye = np.eye(d).reshape(d, n, 3)
        jac_pos = np.broadcast_to(eye, (batch, d, n, 3))
        pos_td = _TD(pos, jac_pos)
    else:
        pos_td = _TD(pos)

    nuclei = mol.positions
    m = len(nuclei)
    diff1 = _TD(
        pos_td.val[:, :, None, :] - nuclei[None, None, :, :],
        None if pos_td.jac is None else np.broadcast_to(
            pos_td.jac[:, :, :, None, :], (batch, d, n, m, 3)),
    )
    dist1 = _td_norm(diff1)
    h1 = _td_concat([diff1, _TD(dist1.val[..., None],
                                None if dist1.jac is None else dist1.jac[..., None],
                                None if dist1.lap is None else dist1.lap[..., None])])
    h1 = _td_linear(h1, lambda v: v.reshape(*v.shape[:-2], 4 * m),
                    lambda j: j.reshape(*j.shape[:-2], 4 * m))

    diff2 = _TD(
        pos_td.val[:, :, None, :] - pos_td.val[:, None, :, :],
        None if pos_td.jac is None else
        pos_td.jac[:, :, :, None, :] - pos_td.jac[:, :, None, :, :],
    )
    dist2 = _td_norm(diff2)
    h2 = _td_concat([diff2, _TD(dist2.val[..., None],
                                None if dist2.jac is None else dist2.jac[..., None],
                                None if dist2.lap is None else dist2.lap[..., None])])
    return h1, h2, diff1


def _spin_mean(h: _TD, lo: int, hi: int, axis: int) -> _TD:
    """Mean of a tracked tensor over electrons [lo, hi) along an electron
    axis of the value shape; empty ranges contribute zeros."""
    count = hi - lo
    take = [slice(None)] * h.val.ndim
    take[axis] = slice(lo, hi)
    if count == 0:
        val = np.zeros([s for i, s in enumerate(h.val.shape) if i != axis])
        jac = None
        if h.jac is not None:
            jac = np.zeros([s for i, s in enumerate(h.jac.shape) if i != axis + 1])
        lap = None if h.jac is None else np.zeros_like(val)
        return _TD(val, jac, lap)
    val = h.val[tuple(take)].mean(axis=axis)
    if h.jac is None:
        return _TD(val)
    take_j = [slice(None)] * h.jac.ndim
    take_j[axis + 1] = slice(lo, hi)
    jac = h.jac[tuple(take_j)].mean(axis=axis + 1)
    lap = _lap_or_zero(h)[tuple(take)].mean(axis=axis)
    return _TD(val, jac, lap)


def _broadcast_electrons(g: _TD, n: int) -> _TD:
    """(B, C) -> (B, n, C) by repetition (same pooled vector for every
    electron)."""
    val = np.broadcast_to(g.val[:, None, :], (g.val.shape[0], n, g.val.shape[1]))
    if g.jac is None:
        return _TD(val)
    jac = np.broadcast_to(g.jac[:, :, None, :],
                          (g.jac.shape[0], g.jac.shape[1], n, g.jac.shape[2]))
    lap = np.broadcast_to(_lap_or_zero(g)[:, None, :], val.shape)
    return _TD(val, jac, lap)


def _run_layers(h1: _TD, h2: _TD, params, config: AnsatzConfig, n_atoms: int,
                cache: dict | None):
    """The interaction-layer stack on tracked triples."""
    nu, nd = config.n_up, config.n_down
    n = nu + nd
    dims, _ = _layer_dims(config, n_atoms)
    for layer, (c1, c2, f_width, updates_two) in enumerate(dims):
        g1u = _broadcast_electrons(_spin_mean(h1, 0, nu, axis=1), n)
        g1d = _broadcast_electrons(_spin_mean(h1, nu, n, axis=1), n)
        g2u = _spin_mean(h2, 0, nu, axis=2)
        g2d = _spin_mean(h2, nu, n, axis=2)
        f = _td_concat([h1, g1u, g1d, g2u, g2d])

        w1, b1 = params[f"layer{layer}/w1"], params[f"layer{layer}/b1"]
        z1 = _td_linear(f, lambda v, w=w1: v @ w.T, lambda j, w=w1: j @ w.T)
        z1 = _td_add(z1, _TD(np.broadcast_to(b1, z1.val.shape)))
        a1 = _td_tanh(z1)
        resid1 = c1 == config.hidden_one
        h1_new = _td_add(a1, h1) if resid1 else a1

        if cache is not None:
            entry = {"f": f.val, "a1": a1.val, "resid1": resid1,
                     "updates_two": updates_two}
        if updates_two:
            w2, b2 = params[f"layer{layer}/w2"], params[f"layer{layer}/b2"]
            z2 = _td_linear(h2, lambda v, w=w2: v @ w.T, lambda j, w=w2: j @ w.T)
            z2 = _td_add(z2, _TD(np.broadcast_to(b2, z2.val.shape)))
            a2 = _td_tanh(z2)
            resid2 = c2 == config.hidden_two
            if cache is not None:
                entry.update(h2_in=h2.val, a2=a2.val, resid2=resid2)
            h2 = _td_add(a2, h2) if resid2 else a2
        elif cache is not None:
            entry["h2_in"] = h2.val
        if cache is not None:
            cache["layers"].append(entry)
        h1 = h1_new
    return h1, h2


def _orbital_block(h: _TD, diff1: _TD, params, spin: str, lo: int, hi: int,
                   cache: dict | None):
    """Phi (B, K, n, n) for one spin block: projected latents times envelope."""
    w, b = params[f"orb_{spin}/w"], params[f"orb_{spin}/b"]
    sigma, pi = params[f"env_{spin}/sigma"], params[f"env_{spin}/pi"]
    h_blk = _TD(h.val[:, lo:hi],
                None if h.jac is None else h.jac[:, :, lo:hi],
                None if h.lap is None else h.lap[:, lo:hi])
    rho = _td_linear(h_blk,
                     lambda v: np.einsum("bjc,kic->bkij", v, w),
                     lambda j: np.einsum("bdjc,kic->bdkij", j, w))
    rho = _td_add(rho, _TD(np.broadcast_to(b[None, :, :, None], rho.val.shape)))

    d_blk = _TD(diff1.val[:, lo:hi],
                None if diff1.jac is None else diff1.jac[:, :, lo:hi])
    u = _td_linear(d_blk,
                   lambda v: np.einsum("kimrc,bjmc->bkijmr", sigma, v),
                   lambda j: np.einsum("kimrc,bdjmc->bdkijmr", sigma, j))
    dist = _td_norm(u)                      # (B, K, n, n, M)
    e = _td_exp_neg(dist)
    env = _td_linear(e,
                     lambda v: np.einsum("kim,bkijm->bkij", pi, v),
                     lambda j: np.einsum("kim,bdkijm->bdkij", pi, j))
    phi = _td_mul(rho, env)
    if cache is not None:
        n_val = dist.val
        safe = np.where(n_val > 0.0, n_val, 1.0)
        cache[spin] = {
            "h_in": h_blk.val, "rho": rho.val, "env": env.val, "e": e.val,
            "uhat": u.val / safe[..., None], "d": d_blk.val, "phi": phi.val,
        }
    return phi


def _td_slogdet(a: _TD):
    """Per-determinant sign and tracked log|det| for (B, K, n, n) blocks."""
    b_sz, k, n = a.val.shape[0], a.val.shape[1], a.val.shape[2]
    if n == 0:
        zeros = np.zeros((b_sz, k))
        jac = None if a.jac is None else np.zeros((b_sz, a.jac.shape[1], k))
        return np.ones((b_sz, k)), _TD(zeros, jac, None if a.jac is None else zeros.copy()), None
    sign, logdet = np.linalg.slogdet(a.val)
    singular = ~np.isfinite(logdet)
    mat = np.where(singular[..., None, None], np.eye(n), a.val) if singular.any() else a.val
    inv = np.linalg.inv(mat)
    if a.jac is None:
        return sign, _TD(logdet), inv
    jac = np.einsum("bkij,bdkji->bdk", inv, a.jac)
    m_d = np.einsum("bkij,bdkjl->bdkil", inv, a.jac)
    lap = (np.einsum("bkij,bkji->bk", inv, _lap_or_zero(a))
           - np.einsum("bdkil,bdkli->bk", m_d, m_d))
    return sign, _TD(logdet, jac, lap), inv


def _signed_logsumexp(signs: np.ndarray, logs: _TD):
    """Combine k determinant products: psi = sum_k s_k exp(l_k).

    Returns per-walker (sign, tracked log|psi|, weights w_k = s_k
    exp(l_k - log|psi|) * sign); the weights are reused as determinant
    cotangents for parameter gradients.
    """
    top = logs.val.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = signs * np.exp(logs.val - top)
        total = scaled.sum(axis=1)
        sign = np.sign(total)
        logmag = top[:, 0] + np.log(np.abs(total))
        weights = scaled / total[:, None]
    if logs.jac is None:
        return sign, _TD(logmag), weights
    jac = np.einsum("bk,bdk->bd", weights, logs.jac)
    lap = (np.einsum("bk,bk->b", weights,
                     _lap_or_zero(logs) + (logs.jac ** 2).sum(axis=1))
           - (jac ** 2).sum(axis=1))
    return sign, _TD(logmag, jac, lap), weights


def _forward(params, positions, mol: Molecule, config: AnsatzConfig,
             want_derivs: bool = False, want_cache: bool = False):
    """Shared forward pass over a batch of configurations."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 2:
        pos = pos[None]
    if pos.shape[1] != config.n_electrons:
        raise ValueError(
            f"positions have {pos.shape[1]} electrons, config says {config.n_electrons}")
    cache = {"layers": []} if want_cache else None
    h1, h2, diff1 = _tracked_features(pos, mol, want_derivs)
    if cache is not None:
        cache["h1_feat"] = h1.val
        cache["h2_feat"] = h2.val
        cache["n_atoms"] = mol.n_atoms
    h_final, _ = _run_layers(h1, h2, params, config, mol.n_atoms, cache)
    if cache is not None:
        cache["h_final"] = h_final.val
    nu, n = config.n_up, config.n_electrons
    phi_up = _orbital_block(h_final, diff1, params, "up", 0, nu, cache)
    phi_dn = _orbital_block(h_final, diff1, params, "dn", nu, n, cache)
    sign_u, logdet_u, inv_u = _td_slogdet(phi_up)
    sign_d, logdet_d, inv_d = _td_slogdet(phi_dn)
    sign, logmag, weights = _signed_logsumexp(sign_u * sign_d,
                                              _td_add(logdet_u, logdet_d))
    if cache is not None:
        cache["inv_up"], cache["inv_dn"] = inv_u, inv_d
        cache["weights"] = weights
        cache["config"] = config
    return {"sign": sign, "logmag": logmag, "phi_up": phi_up, "phi_dn": phi_dn,
            "cache": cache}


# ---------------------------------------------------------------------------
# public evaluation API

def forward_layers(feature_set: FeatureSet, params, config: AnsatzConfig,
                   n_atoms: int | None = None) -> np.ndarray:
    """Latent vectors h_j from input features (single configuration).

    An empty parameter set (no layer keys, or config tweaked to zero depth
    by the caller passing layers=[]) is not expressible through AnsatzConfig;
    passthrough is exposed for the degenerate case params == {}.
    """
    if not any(k.startswith("layer") for k in params):
        return feature_set.one_electron.copy()
    if n_atoms is None:
        n_atoms = feature_set.one_electron.shape[1] // 4
    h1 = _TD(feature_set.one_electron[None])
    h2 = _TD(feature_set.two_electron[None])
    out, _ = _run_layers(h1, h2, params, config, n_atoms, None)
    return out.val[0]


def envelope(position: np.ndarray, mol: Molecule, sigma: np.ndarray,
             pi: np.ndarray) -> float:
    """sum_m pi_m * exp(-|sigma_m (r - R_m)|) for one (k, i, alpha) slice."""
    r = np.asarray(position, dtype=float)
    total = 0.0
    for m, atom in enumerate(mol.atoms):
        d = r - atom.position
        total += pi[m] * np.exp(-np.linalg.norm(sigma[m] @ d))
    return float(total)


def orbitals(latents: np.ndarray, env_up: np.ndarray, env_dn: np.ndarray,
             params, config: AnsatzConfig) -> tuple[np.ndarray, np.ndarray]:
    """Phi[k][i][j] = (w_ki . h_j + b_ki) * env[k, i, j] per spin block."""
    nu = config.n_up
    out = []
    for spin, lo, hi, env in (("up", 0, nu, env_up),
                              ("dn", nu, config.n_electrons, env_dn)):
        w, b = params[f"orb_{spin}/w"], params[f"orb_{spin}/b"]
        rho = np.einsum("jc,kic->kij", latents[lo:hi], w) + b[:, :, None]
        out.append(rho * env)
    return out[0], out[1]


def log_psi(params, positions, mol: Molecule, config: AnsatzConfig) -> LogPsi:
    res = _forward(params, positions, mol, config)
    return LogPsi(sign=float(res["sign"][0]),
                  log_magnitude=float(res["logmag"].val[0]))


def log_psi_batch(params, positions, mol: Molecule, config: AnsatzConfig):
    res = _forward(params, positions, mol, config)
    return res["sign"], res["logmag"].val


def make_log_psi(params, mol: Molecule, config: AnsatzConfig):
    """Sampler-facing closure: f(positions) -> log|psi|, with f.batch for
    whole-batch evaluation."""
    def f(positions):
        return log_psi(params, positions, mol, config).log_magnitude

    def batch(positions):
        return _forward(params, positions, mol, config)["logmag"].val

    f.batch = batch
    return f


def derivatives_batch(params, positions, mol: Molecule, config: AnsatzConfig):
    """(sign, log|psi|, grad (B,N,3), laplacian (B,)) in one forward pass."""
    pos = np.asarray(positions, dtype=float)
    squeeze = pos.ndim == 2
    res = _forward(params, pos, mol, config, want_derivs=True)
    logmag = res["logmag"]
    b = logmag.val.shape[0]
    grad = logmag.jac.reshape(b, config.n_electrons, 3)
    lap = logmag.lap
    if squeeze:
        return res["sign"][0], logmag.val[0], grad[0], lap[0]
    return res["sign"], logmag.val, grad, lap


def grad_logpsi(params, positions, mol: Molecule, config: AnsatzConfig) -> np.ndarray:
    return derivatives_batch(params, positions, mol, config)[2]


def laplacian_logpsi(params, positions, mol: Molecule, config: AnsatzConfig) -> float:
    return float(derivatives_batch(params, positions, mol, config)[3])


# ---------------------------------------------------------------------------
# reverse pass for parameter gradients

def _backprop_orbital_block(cache_blk, dphi, params, spin, grads):
    """Phi = rho * env cotangents -> orbital/envelope parameter grads and
    the latent cotangent for this spin block."""
    w = params[f"orb_{spin}/w"]
    pi = params[f"env_{spin}/pi"]
    rho, env = cache_blk["rho"], cache_blk["env"]
    drho = dphi * env
    denv = dphi * rho
    grads[f"orb_{spin}/w"] = np.einsum("bkij,bjc->bkic", drho, cache_blk["h_in"])
    grads[f"orb_{spin}/b"] = drho.sum(axis=3)
    dh_blk = np.einsum("bkij,kic->bjc", drho, w)

    e = cache_blk["e"]                                   # (B,K,I,J,M)
    grads[f"env_{spin}/pi"] = np.einsum("bkij,bkijm->bkim", denv, e)
    dn = -denv[..., None] * pi[None, :, :, None, :] * e  # cotangent of |sigma d|
    du = dn[..., None] * cache_blk["uhat"]               # (B,K,I,J,M,R)
    grads[f"env_{spin}/sigma"] = np.einsum("bkijmr,bjmc->bkimrc", du, cache_blk["d"])
    return dh_blk


def _backprop_layers(cache, dh1, dh2, params, config: AnsatzConfig, grads):
    nu, n = config.n_up, config.n_electrons
    nd = n - nu
    for layer in reversed(range(len(cache["layers"]))):
        entry = cache["layers"][layer]
        a1, f_val = entry["a1"], entry["f"]
        w1 = params[f"layer{layer}/w1"]
        dz1 = dh1 * (1.0 - a1 * a1)
        grads[f"layer{layer}/w1"] = np.einsum("bjo,bjf->bof", dz1, f_val)
        grads[f"layer{layer}/b1"] = dz1.sum(axis=1)
        df = np.einsum("bjo,of->bjf", dz1, w1)
        c1 = (f_val.shape[-1] - 2 * entry["h2_in"].shape[-1]) // 3
        c2 = entry["h2_in"].shape[-1]
        dh1_in = df[..., :c1] + (dh1 if entry["resid1"] else 0.0)
        dg1u = df[..., c1:2 * c1].sum(axis=1)
        dg1d = df[..., 2 * c1:3 * c1].sum(axis=1)
        if nu:
            dh1_in[:, :nu] += dg1u[:, None, :] / nu
        if nd:
            dh1_in[:, nu:] += dg1d[:, None, :] / nd
        dg2u = df[..., 3 * c1:3 * c1 + c2]
        dg2d = df[..., 3 * c1 + c2:]
        dh2_in = np.zeros_like(entry["h2_in"])
        if nu:
            dh2_in[:, :, :nu] += dg2u[:, :, None, :] / nu
        if nd:
            dh2_in[:, :, nu:] += dg2d[:, :, None, :] / nd

        if entry["updates_two"]:
            a2 = entry["a2"]
            w2 = params[f"layer{layer}/w2"]
            dz2 = dh2 * (1.0 - a2 * a2)
            grads[f"layer{layer}/w2"] = np.einsum("bijo,bijf->bof", dz2, entry["h2_in"])
            grads[f"layer{layer}/b2"] = dz2.sum(axis=(1, 2))
            dh2_in += np.einsum("bijo,of->bijf", dz2, w2)
            if entry["resid2"]:
                dh2_in += dh2
        else:
            dh2_in += dh2
        dh1, dh2 = dh1_in, dh2_in
    return dh1, dh2


def backprop_from_orbitals(cache, dphi_up, dphi_dn, params,
                           config: AnsatzConfig) -> dict[str, np.ndarray]:
    """Per-walker parameter gradients from orbital-matrix cotangents.

    Every returned array has a leading batch axis; keys match param_spec.
    Zero-size spin blocks produce empty gradient arrays of the right shape.
    """
    grads: dict[str, np.ndarray] = {}
    nu = config.n_up
    dh = np.zeros_like(cache["h_final"])
    dh[:, :nu] = _backprop_orbital_block(cache["up"], dphi_up, params, "up", grads)
    dh[:, nu:] = _backprop_orbital_block(cache["dn"], dphi_dn, params, "dn", grads)
    dh2 = np.zeros_like(cache["layers"][-1]["h2_in"]) if cache["layers"] else None
    _backprop_layers(cache, dh, dh2, params, config, grads)
    return grads


def param_grad_logpsi_batch(params, positions, mol: Molecule,
                            config: AnsatzConfig):
    """Per-walker d log|psi| / d theta, plus (sign, log|psi|).

    Seeds the reverse pass with d log|psi| / d Phi_k = w_k Phi_k^-T per spin
    block, where w_k are the normalized signed determinant weights.
    """
    res = _forward(params, positions, mol, config, want_cache=True)
    cache = res["cache"]
    w = cache["weights"]                                  # (B, K)
    dphis = []
    for spin, inv in (("up", cache["inv_up"]), ("dn", cache["inv_dn"])):
        phi = res[f"phi_{spin}"].val
        if phi.shape[-1] == 0:
            dphis.append(np.zeros_like(phi))
        else:
            dphis.append(w[:, :, None, None] * np.swapaxes(inv, -1, -2))
    grads = backprop_from_orbitals(cache, dphis[0], dphis[1], params, config)
    return grads, res["sign"], res["logmag"].val


def param_grad_logpsi(params, positions, mol: Molecule,
                      config: AnsatzConfig) -> dict[str, np.ndarray]:
    """Single-configuration parameter gradient of log|psi|."""
    grads, _, _ = param_grad_logpsi_batch(params, positions[None], mol, config)
    return {k: v[0] for k, v in grads.items()}


def orbital_matrices_with_cache(params, positions, mol: Molecule,
                                config: AnsatzConfig):
    """(Phi_up, Phi_dn, cache) for the pretraining loss; batched."""
    res = _forward(params, positions, mol, config, want_cache=True)
    return res["phi_up"].val, res["phi_dn"].val, res["cache"]


# ---------------------------------------------------------------------------
# parameter checkpoints

_PARAMS_FORMAT_VERSION = 1


def save_params(path, params: dict[str, np.ndarray], config: AnsatzConfig,
                extra: dict | None = None) -> None:
    """Versioned container: config header plus named float64 payloads.

    Round-trips bit-exactly (float64 arrays stored uncompressed).
    """
    header = {
        "format_version": _PARAMS_FORMAT_VERSION,
        "config": {
            "n_determinants": config.n_determinants,
            "hidden_one": config.hidden_one,
            "hidden_two": config.hidden_two,
            "n_layers": config.n_layers,
            "n_up": config.n_up,
            "n_down": config.n_down,
        },
        "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in params.items()}
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path):
    """Returns (params, config, extra); rejects unknown format versions."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format_version") != _PARAMS_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {header.get('format_version')!r}")
        params = {k[len("param:"):]: data[k] for k in data.files
                  if k.startswith("param:")}
    cfg = AnsatzConfig(**header["config"])
    return params, cfg, header["extra"]
