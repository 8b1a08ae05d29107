"""STO-6G minimal basis and Gaussian one-/two-electron integrals.

Integrals follow the McMurchie-Davidson scheme: Cartesian Gaussian products
are expanded in Hermite Gaussians (coefficients E_t via the standard
two-term recurrences), Coulomb integrals reduce to the Boys function through
the auxiliary Hermite integrals R_tuv. Only s and p functions are needed for
a minimal basis through Ne, so no angular-momentum generality beyond l = 1
is attempted. Basis data is an embedded plain-text table; coefficients in
the table apply to unit-normalized primitives, and contracted functions are
rescaled here so every diagonal overlap is exactly 1.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import math

import numpy as np

from .molecule import Molecule

_MAX_BOYS_X_SERIES = 35.0  # switch point between Kummer series and asymptotics


def boys_table(nmax: int, x) -> np.ndarray:
    """Boys functions F_0..F_nmax at x (scalar or array), shape (nmax+1, ...).

    Three regimes keep every branch cancellation-free:
    tiny x: two-term Taylor; moderate x: all-positive confluent series at the
    top order followed by stable downward recursion; large x: complete-Gamma
    asymptote at order 0 followed by upward recursion (safe since the
    subtracted exp(-x) is negligible there).
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty((nmax + 1, x.size))

    tiny = x < 1e-13
    large = x >= _MAX_BOYS_X_SERIES
    mid = ~tiny & ~large

    if np.any(tiny):
        xt = x[tiny]
        for n in range(nmax + 1):
            out[n, tiny] = 1.0 / (2 * n + 1) - xt / (2 * n + 3)

    if np.any(mid):
        xm = x[mid]
        # F_nmax via F_n(x) = e^-x sum_k (2x)^k (2n-1)!!/(2n+2k+1)!!
        term = np.full_like(xm, 1.0 / (2 * nmax + 1))
        acc = term.copy()
        for k in range(500):
            term = term * 2 * xm / (2 * nmax + 2 * k + 3)
            acc += term
            if np.all(term <= acc * 1e-17):
                break
        emx = np.exp(-xm)
        fn = emx * acc
        out[nmax, mid] = fn
        for n in range(nmax, 0, -1):
            fn = (2 * xm * fn + emx) / (2 * n - 1)
            out[n - 1, mid] = fn

    if np.any(large):
        xl = x[large]
        emx = np.exp(-xl)
        fn = 0.5 * np.sqrt(np.pi / xl)  # erf(sqrt(x)) = 1 to below 1e-15 here
        out[0, large] = fn
        for n in range(nmax):
            fn = ((2 * n + 1) * fn - emx) / (2 * xl)
            out[n + 1, large] = fn

    if scalar:
        return out[:, 0]
    return out.reshape((nmax + 1,) + np.asarray(x).shape)


def boys(n: int, x: float) -> float:
    return float(boys_table(n, float(x))[n])


def _e_coef(i: int, j: int, t: int, q: float, a: float, b: float) -> float:
    """Hermite expansion coefficient E_t^{ij} for a 1-D Gaussian pair.

    q = Ax - Bx; includes the pair prefactor exp(-a b q^2 / p).
    """
    p = a + b
    if t < 0 or t > i + j:
        return 0.0
    if i == j == t == 0:
        return math.exp(-a * b / p * q * q)
    if i > 0:
        return (
            _e_coef(i - 1, j, t - 1, q, a, b) / (2 * p)
            - b * q / p * _e_coef(i - 1, j, t, q, a, b)
            + (t + 1) * _e_coef(i - 1, j, t + 1, q, a, b)
        )
    return (
        _e_coef(i, j - 1, t - 1, q, a, b) / (2 * p)
        + a * q / p * _e_coef(i, j - 1, t, q, a, b)
        + (t + 1) * _e_coef(i, j - 1, t + 1, q, a, b)
    )


def _prim_overlap(a, la, ra, b, lb, rb) -> float:
    p = a + b
    s = (math.pi / p) ** 1.5
    for d in range(3):
        s *= _e_coef(la[d], lb[d], 0, ra[d] - rb[d], a, b)
    return s


def _prim_kinetic(a, la, ra, b, lb, rb) -> float:
    # T = b(2 sum(lb) + 3) S - 2 b^2 sum_d S(lb+2e_d) - 1/2 sum_d lbd(lbd-1) S(lb-2e_d)
    lb = list(lb)
    term = b * (2 * sum(lb) + 3) * _prim_overlap(a, la, ra, b, lb, rb)
    for d in range(3):
        up = lb.copy()
        up[d] += 2
        term -= 2 * b * b * _prim_overlap(a, la, ra, b, up, rb)
        if lb[d] >= 2:
            dn = lb.copy()
            dn[d] -= 2
            term -= 0.5 * lb[d] * (lb[d] - 1) * _prim_overlap(a, la, ra, b, dn, rb)
    return term


def _hermite_coulomb_table(L: int, p, pc, ftab) -> np.ndarray:
    """Auxiliary Hermite Coulomb integrals R_tuv, vectorized over combos.

    p: (C,), pc: (C,3), ftab: (L+1, C) Boys values at p*|PC|^2.
    Returns (C, L+1, L+1, L+1); entries with t+u+v > L are zero.
    """
    c = p.shape[0]
    rn = np.zeros((c, L + 1, L + 1, L + 1))
    for n in range(L, -1, -1):
        rnew = np.zeros_like(rn)
        rnew[:, 0, 0, 0] = (-2.0 * p) ** n * ftab[n]
        for total in range(1, L - n + 1):
            for t in range(total + 1):
                for u in range(total - t + 1):
                    v = total - t - u
                    if t > 0:
                        val = pc[:, 0] * rn[:, t - 1, u, v]
                        if t > 1:
                            val = val + (t - 1) * rn[:, t - 2, u, v]
                    elif u > 0:
                        val = pc[:, 1] * rn[:, t, u - 1, v]
                        if u > 1:
                            val = val + (u - 1) * rn[:, t, u - 2, v]
                    else:
                        val = pc[:, 2] * rn[:, t, u, v - 1]
                        if v > 1:
                            val = val + (v - 1) * rn[:, t, u, v - 2]
                    rnew[:, t, u, v] = val
        rn = rnew
    return rn


def _prim_nuclear(a, la, ra, b, lb, rb, rc) -> float:
    p = a + b
    pctr = (a * np.asarray(ra) + b * np.asarray(rb)) / p
    pc = pctr - np.asarray(rc)
    L = sum(la) + sum(lb)
    ftab = boys_table(L, p * float(pc @ pc)).reshape(L + 1, 1)
    rt = _hermite_coulomb_table(L, np.array([p]), pc[None, :], ftab)[0]
    val = 0.0
    for t in range(la[0] + lb[0] + 1):
        ex = _e_coef(la[0], lb[0], t, ra[0] - rb[0], a, b)
        for u in range(la[1] + lb[1] + 1):
            ey = _e_coef(la[1], lb[1], u, ra[1] - rb[1], a, b)
            for v in range(la[2] + lb[2] + 1):
                ez = _e_coef(la[2], lb[2], v, ra[2] - rb[2], a, b)
                val += ex * ey * ez * rt[t, u, v]
    return 2 * math.pi / p * val


def _primitive_norm(l: tuple[int, int, int], alpha: float) -> float:
    lx, ly, lz = l
    total = lx + ly + lz
    dfact = 1.0
    for li in (lx, ly, lz):
        for k in range(2 * li - 1, 0, -2):
            dfact *= k
    return (2 * alpha / math.pi) ** 0.75 * math.sqrt((4 * alpha) ** total / dfact)


@dataclasses.dataclass(frozen=True)
class PrimitiveGaussian:
    """One primitive: exponent and contraction weight with normalization folded in."""

    exponent: float
    coefficient: float

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("primitive exponent must be positive")


@dataclasses.dataclass(frozen=True)
class ContractedShell:
    """Six-primitive contraction on one atom; l = 0 (s) or 1 (p)."""

    center_atom_index: int
    angular_momentum: int
    primitives: tuple[PrimitiveGaussian, ...]

    def __post_init__(self):
        if self.angular_momentum not in (0, 1):
            raise ValueError("only s and p shells supported")
        if len(self.primitives) != 6:
            raise ValueError("STO-6G shells carry exactly 6 primitives")


@dataclasses.dataclass(frozen=True)
class _BasisFunction:
    """One Cartesian component of a shell, with resolved center coordinates."""

    center: np.ndarray
    powers: tuple[int, int, int]
    exponents: np.ndarray
    coefficients: np.ndarray
    atom_index: int


@dataclasses.dataclass(frozen=True)
class BasisSet:
    shells: tuple[ContractedShell, ...]
    function_to_atom: tuple[int, ...]
    functions: tuple[_BasisFunction, ...]

    @property
    def n_functions(self) -> int:
        return len(self.functions)


_P_COMPONENTS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def _load_table() -> dict[str, list[tuple[int, np.ndarray, np.ndarray]]]:
    """Parse the embedded data file into per-element shell lists."""
    text = (importlib.resources.files("fermivmc") / "data" / "sto6g.dat").read_text()
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sym, l, alpha, coef = line.split()
        rows.append((sym, int(l), float(alpha), float(coef)))
    table: dict[str, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    for start in range(0, len(rows), 6):
        block = rows[start : start + 6]
        sym, l = block[0][0], block[0][1]
        if len(block) != 6 or any(r[0] != sym or r[1] != l for r in block):
            raise ValueError("malformed basis data: shells must be 6 uniform rows")
        exps = np.array([r[2] for r in block])
        coefs = np.array([r[3] for r in block])
        table.setdefault(sym, []).append((l, exps, coefs))
    return table


_TABLE_CACHE: dict | None = None


def _shell_data(symbol: str):
    global _TABLE_CACHE
    if _TABLE_CACHE is None:
        _TABLE_CACHE = _load_table()
    return _TABLE_CACHE[symbol]


def build_basis(mol: Molecule) -> BasisSet:
    """STO-6G basis for a molecule: shells ordered by atom, s before p,
    p components in x, y, z order; contracted functions renormalized to
    unit self-overlap."""
    shells = []
    functions = []
    func_atom = []
    for ai, atom in enumerate(mol.atoms):
        for l, exps, raw_coefs in _shell_data(atom.symbol):
            powers0 = _P_COMPONENTS[0] if l == 1 else (0, 0, 0)
            folded = raw_coefs * np.array([_primitive_norm(powers0, a) for a in exps])
            self_ovl = 0.0
            for ca, aa in zip(folded, exps):
                for cb, bb in zip(folded, exps):
                    self_ovl += ca * cb * _prim_overlap(aa, powers0, atom.position, bb, powers0, atom.position)
            folded = folded / math.sqrt(self_ovl)
            shells.append(
                ContractedShell(
                    ai, l, tuple(PrimitiveGaussian(a, c) for a, c in zip(exps, folded))
                )
            )
            comps = _P_COMPONENTS if l == 1 else ((0, 0, 0),)
            for powers in comps:
                functions.append(
                    _BasisFunction(atom.position, powers, exps.copy(), folded.copy(), ai)
                )
                func_atom.append(ai)
    return BasisSet(tuple(shells), tuple(func_atom), tuple(functions))


def _pairwise(basis: BasisSet, prim_fn) -> np.ndarray:
    n = basis.n_functions
    mat = np.zeros((n, n))
    for mu in range(n):
        f = basis.functions[mu]
        for nu in range(mu, n):
            g = basis.functions[nu]
            val = 0.0
            for ca, aa in zip(f.coefficients, f.exponents):
                for cb, bb in zip(g.coefficients, g.exponents):
                    val += ca * cb * prim_fn(aa, f.powers, f.center, bb, g.powers, g.center)
            mat[mu, nu] = mat[nu, mu] = val
    return mat


def overlap_matrix(basis: BasisSet) -> np.ndarray:
    return _pairwise(basis, _prim_overlap)


def kinetic_matrix(basis: BasisSet) -> np.ndarray:
    return _pairwise(basis, _prim_kinetic)


def nuclear_attraction_matrix(basis: BasisSet, mol: Molecule) -> np.ndarray:
    charges = mol.atomic_numbers
    centers = mol.positions

    def prim(a, la, ra, b, lb, rb):
        return sum(
            -z * _prim_nuclear(a, la, ra, b, lb, rb, rc)
            for z, rc in zip(charges, centers)
        )

    return _pairwise(basis, prim)


class _HermitePair:
    """Primitive-combined Hermite expansion data for one function pair."""

    __slots__ = ("p", "ctr", "herm", "dims")

    def __init__(self, f: _BasisFunction, g: _BasisFunction):
        dims = tuple(f.powers[d] + g.powers[d] + 1 for d in range(3))
        combos = []
        p_list = []
        ctr_list = []
        for ca, aa in zip(f.coefficients, f.exponents):
            for cb, bb in zip(g.coefficients, g.exponents):
                p = aa + bb
                etab = np.zeros(dims)
                for t in range(dims[0]):
                    ex = _e_coef(f.powers[0], g.powers[0], t, f.center[0] - g.center[0], aa, bb)
                    for u in range(dims[1]):
                        ey = _e_coef(f.powers[1], g.powers[1], u, f.center[1] - g.center[1], aa, bb)
                        for v in range(dims[2]):
                            ez = _e_coef(f.powers[2], g.powers[2], v, f.center[2] - g.center[2], aa, bb)
                            etab[t, u, v] = ex * ey * ez
                combos.append(ca * cb * etab)
                p_list.append(p)
                ctr_list.append((aa * f.center + bb * g.center) / p)
        self.p = np.array(p_list)
        self.ctr = np.array(ctr_list)
        self.herm = np.array(combos)  # (36, *dims)
        self.dims = dims


def _quartet(bra: _HermitePair, ket: _HermitePair) -> float:
    pb = bra.p[:, None]
    pk = ket.p[None, :]
    alpha = (pb * pk / (pb + pk)).ravel()
    pq = (bra.ctr[:, None, :] - ket.ctr[None, :, :]).reshape(-1, 3)
    L = sum(d - 1 for d in bra.dims) + sum(d - 1 for d in ket.dims)
    fac = (
        2 * math.pi**2.5 / (pb * pk * np.sqrt(pb + pk))
    ).ravel()
    ftab = boys_table(L, alpha * np.einsum("ij,ij->i", pq, pq))
    rt = _hermite_coulomb_table(L, alpha, pq, ftab)
    nb = len(alpha)
    bh = bra.herm.reshape(36, -1)
    kh = ket.herm.reshape(36, -1)
    total = np.zeros(nb)
    bidx = [np.unravel_index(i, bra.dims) for i in range(bh.shape[1])]
    kidx = [np.unravel_index(i, ket.dims) for i in range(kh.shape[1])]
    for ib, (t, u, v) in enumerate(bidx):
        bvals = np.repeat(bh[:, ib], 36)
        for ik, (tt, uu, vv) in enumerate(kidx):
            sign = -1.0 if (tt + uu + vv) % 2 else 1.0
            total += sign * bvals * np.tile(kh[:, ik], 36) * rt[:, t + tt, u + uu, v + vv]
    return float(np.sum(total * fac))


def eri_tensor(basis: BasisSet) -> np.ndarray:
    """Two-electron repulsion integrals (mu nu | la si), chemists' notation,
    full 4-index array with 8-fold permutational symmetry."""
    n = basis.n_functions
    pairs = {}
    for mu in range(n):
        for nu in range(mu, n):
            pairs[(mu, nu)] = _HermitePair(basis.functions[mu], basis.functions[nu])
    eri = np.zeros((n, n, n, n))
    pair_keys = sorted(pairs)
    index_of = {k: i for i, k in enumerate(pair_keys)}
    for bk in pair_keys:
        for kk in pair_keys:
            if index_of[kk] < index_of[bk]:
                continue
            val = _quartet(pairs[bk], pairs[kk])
            mu, nu = bk
            la, si = kk
            for a, b in ((mu, nu), (nu, mu)):
                for c, d in ((la, si), (si, la)):
                    eri[a, b, c, d] = eri[c, d, a, b] = val
    return eri


def basis_values(basis: BasisSet, points: np.ndarray) -> np.ndarray:
    """Contracted basis-function values chi_mu(r); returns (n_points, n_functions)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty((pts.shape[0], basis.n_functions))
    for mu, f in enumerate(basis.functions):
        d = pts - f.center
        r2 = np.einsum("ij,ij->i", d, d)
        radial = np.exp(-f.exponents[None, :] * r2[:, None]) @ f.coefficients
        poly = np.ones(pts.shape[0])
        for dim in range(3):
            if f.powers[dim]:
                poly = poly * d[:, dim] ** f.powers[dim]
        out[:, mu] = poly * radial
    return out
