"""Two-phase optimization of the neural wavefunction.

Phase one fits the ansatz orbitals to Hartree-Fock orbital values on sampled
configurations (plain MSE, averaged over walkers, determinants, and matrix
entries). Phase two minimizes the energy with the score-function gradient
grad = 2 * mean_p[(E_p - mean E) * dlog|psi|/dtheta], clipped by global norm.
Both phases advance the walkers with the Metropolis kernel under the current
ansatz between parameter updates.

Local energies far outside the batch (beyond 10 interquartile ranges from the
median) are winsorized to the fence for the gradient only; the logged
estimate always uses raw values. Disable with TrainConfig.winsorize_outliers.
"""

from __future__ import annotations

import json
import time
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import ansatz, energy, sampler, scf
from .molecule import Molecule

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

TRACE_COLUMNS = ("iter", "energy_mean", "energy_stderr", "accept_rate",
                 "pretrain_loss", "wall_ms")


@dataclass
class TrainConfig:
    pretrain_epochs: int = 100
    train_iterations: int = 1000
    learning_rate_pretrain: float = 1e-3
    learning_rate_train: float = 3e-4
    optimizer: str = "adam"
    gradient_clip_norm: float | None = 1.0
    checkpoint_every: int = 100
    seed: int = 0
    winsorize_outliers: bool = True

    def __post_init__(self):
        # zero rates are allowed: they make a step an exact no-op, which the
        # test suite relies on
        if self.learning_rate_pretrain < 0 or self.learning_rate_train < 0:
            raise ValueError("learning rates must be non-negative")
        if self.pretrain_epochs < 0 or self.train_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gradient_clip_norm is not None and self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be positive or None")


@dataclass
class TraceRecord:
    iteration: int
    energy_mean: float
    energy_stderr: float
    accept_rate: float
    pretrain_loss: float    # NaN during energy minimization
    wall_ms: float

    def as_row(self) -> tuple:
        return (self.iteration, self.energy_mean, self.energy_stderr,
                self.accept_rate, self.pretrain_loss, self.wall_ms)


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.records.append(record)

    def as_array(self) -> np.ndarray:
        return np.array([r.as_row() for r in self.records], dtype=float).reshape(
            len(self.records), len(TRACE_COLUMNS))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TrainTrace":
        trace = cls()
        for row in np.atleast_2d(arr):
            if row.size:
                trace.records.append(TraceRecord(int(row[0]), *row[1:]))
        return trace


# ---------------------------------------------------------------------------
# optimizers (self-contained)

@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def make_optimizer_state(cfg: TrainConfig, params: dict[str, np.ndarray]) -> OptimizerState:
    state = OptimizerState(kind=cfg.optimizer)
    if cfg.optimizer == "adam":
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    return state


def apply_update(params, grads, state: OptimizerState, lr: float):
    """One optimizer step; returns new params, mutates state in place."""
    new = {}
    if state.kind == "sgd":
        for k, p in params.items():
            new[k] = p - lr * grads[k]
        return new
    state.step += 1
    b1t = 1.0 - ADAM_BETA1 ** state.step
    b2t = 1.0 - ADAM_BETA2 ** state.step
    for k, p in params.items():
        g = grads[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[k] / b1t
        v_hat = state.v[k] / b2t
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new


def clip_by_global_norm(grads, max_norm):
    """Scale the whole gradient so its global 2-norm is at most max_norm."""
    norm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def winsorize(values: np.ndarray, n_iqr: float = 10.0) -> np.ndarray:
    """Clamp finite entries to median +/- n_iqr * IQR; non-finite pass through."""
    out = np.array(values, dtype=float)
    finite = out[np.isfinite(out)]
    if finite.size < 2:
        return out
    med = np.median(finite)
    q1, q3 = np.percentile(finite, [25, 75])
    half = n_iqr * (q3 - q1)
    return np.clip(out, med - half, med + half, out=out)


# ---------------------------------------------------------------------------
# pretraining (orbital matching)

def pretrain_step(params, scf_solution: scf.ScfSolution, basis, mol: Molecule,
                  batch: sampler.WalkerBatch, acfg: ansatz.AnsatzConfig,
                  tcfg: TrainConfig, opt_state: OptimizerState):
    """One MSE step of the ansatz orbitals toward the HF orbitals.

    The HF target matrix is identical for every determinant index. Returns
    (new params, loss).
    """
    if (scf_solution.n_up, scf_solution.n_down) != (acfg.n_up, acfg.n_down):
        raise ValueError("SCF occupation does not match ansatz spin blocks")
    pos = batch.positions
    phi_up, phi_dn, cache = ansatz.orbital_matrices_with_cache(params, pos, mol, acfg)
    targets = [scf.hf_orbital_values(scf_solution, basis, p) for p in pos]
    t_up = np.stack([t[0] for t in targets])          # (B, n_up, n_up)
    t_dn = np.stack([t[1] for t in targets])
    count = max(phi_up.size + phi_dn.size, 1)
    r_up = phi_up - t_up[:, None]
    r_dn = phi_dn - t_dn[:, None]
    loss = (float((r_up ** 2).sum()) + float((r_dn ** 2).sum())) / count
    grads_pw = ansatz.backprop_from_orbitals(
        cache, 2.0 * r_up / count, 2.0 * r_dn / count, params, acfg)
    grads = {k: g.sum(axis=0) for k, g in grads_pw.items()}
    grads, _ = clip_by_global_norm(grads, tcfg.gradient_clip_norm)
    params = apply_update(params, grads, opt_state, tcfg.learning_rate_pretrain)
    return params, loss


# ---------------------------------------------------------------------------
# energy minimization

def energy_gradient(local_energies, param_grads_logpsi) -> dict[str, np.ndarray]:
    """Score-function gradient 2 * mean_p[(E_p - mean E) grad_theta log|psi|_p].

    Walkers with non-finite local energy are excluded from both means; at
    least two finite walkers are required.
    """
    e = np.asarray(local_energies, dtype=float)
    keep = np.isfinite(e)
    n = int(keep.sum())
    if n < 2:
        raise ValueError(f"energy gradient needs >= 2 unflagged walkers, got {n}")
    centered = np.where(keep, e - e[keep].mean(), 0.0)
    out = {}
    for key, g in param_grads_logpsi.items():
        weights = centered.reshape((-1,) + (1,) * (g.ndim - 1))
        out[key] = 2.0 * (weights * g).sum(axis=0) / n
    return out


def train_step(params, batch: sampler.WalkerBatch, mol: Molecule,
               acfg: ansatz.AnsatzConfig, scfg: sampler.SamplerConfig,
               tcfg: TrainConfig, rngs, opt_state: OptimizerState,
               iteration: int = 0):
    """One energy-minimization iteration.

    Advances the chain steps_between_updates steps under the current
    parameters, estimates the energy, applies the clipped Eq.-style gradient
    through the optimizer, and reports a trace record. Raises RuntimeError
    when every walker is flagged.
    """
    t0 = time.perf_counter()
    log_psi = ansatz.make_log_psi(params, mol, acfg)
    batch = sampler.refresh_log_prob(batch, log_psi)
    a0, p0 = batch.accept_count, batch.proposal_count
    batch = sampler.run_chain(batch, log_psi, scfg, scfg.steps_between_updates, rngs)
    accept_rate = ((batch.accept_count - a0) / (batch.proposal_count - p0)
                   if batch.proposal_count > p0 else 0.0)

    locals_raw = energy.local_energy_batch(params, batch.positions, mol, acfg)
    finite = int(np.isfinite(locals_raw).sum())
    if finite == 0:
        raise RuntimeError(
            f"iteration {iteration}: all {locals_raw.size} walkers flagged non-finite")
    estimate = energy.expected_energy(locals_raw)
    grads_pw, _, _ = ansatz.param_grad_logpsi_batch(params, batch.positions, mol, acfg)
    for_grad = winsorize(locals_raw) if tcfg.winsorize_outliers else locals_raw
    grads = energy_gradient(for_grad, grads_pw)
    grads, _ = clip_by_global_norm(grads, tcfg.gradient_clip_norm)
    params = apply_update(params, grads, opt_state, tcfg.learning_rate_train)

    record = TraceRecord(
        iteration=iteration,
        energy_mean=estimate.mean,
        energy_stderr=estimate.std_error,
        accept_rate=accept_rate,
        pretrain_loss=float("nan"),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return params, batch, record


def pretrain_epoch(params, scf_solution, basis, mol, batch, acfg, scfg, tcfg,
                   rngs, opt_state, epoch: int):
    """Chain advance plus one pretraining step, with a trace record."""
    t0 = time.perf_counter()
    log_psi = ansatz.make_log_psi(params, mol, acfg)
    batch = sampler.refresh_log_prob(batch, log_psi)
    a0, p0 = batch.accept_count, batch.proposal_count
    batch = sampler.run_chain(batch, log_psi, scfg, scfg.steps_between_updates, rngs)
    accept_rate = ((batch.accept_count - a0) / (batch.proposal_count - p0)
                   if batch.proposal_count > p0 else 0.0)
    params, loss = pretrain_step(params, scf_solution, basis, mol, batch,
                                 acfg, tcfg, opt_state)
    record = TraceRecord(
        iteration=epoch,
        energy_mean=float("nan"),
        energy_stderr=float("nan"),
        accept_rate=accept_rate,
        pretrain_loss=loss,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return params, batch, record


# ---------------------------------------------------------------------------
# drivers

def run_pretraining(params, scf_solution, basis, mol, batch, acfg, scfg, tcfg,
                    rngs, opt_state, trace: TrainTrace | None = None,
                    on_record=None):
    """Run tcfg.pretrain_epochs orbital-matching epochs; returns (params, batch, trace)."""
    trace = trace if trace is not None else TrainTrace()
    start = trace.records[-1].iteration + 1 if trace.records else 0
    for epoch in range(start, start + tcfg.pretrain_epochs):
        params, batch, record = pretrain_epoch(
            params, scf_solution, basis, mol, batch, acfg, scfg, tcfg, rngs,
            opt_state, epoch)
        trace.append(record)
        if on_record is not None:
            on_record(record)
    return params, batch, trace


def run_training(params, mol, batch, acfg, scfg, tcfg, rngs, opt_state,
                 trace: TrainTrace | None = None, on_record=None,
                 checkpoint_path=None, start_iteration: int = 0):
    """Run tcfg.train_iterations energy-minimization steps.

    Writes a checkpoint every tcfg.checkpoint_every iterations (and at the
    end) when checkpoint_path is given. Returns (params, batch, trace).
    """
    trace = trace if trace is not None else TrainTrace()
    end = start_iteration + tcfg.train_iterations
    for iteration in range(start_iteration, end):
        params, batch, record = train_step(
            params, batch, mol, acfg, scfg, tcfg, rngs, opt_state, iteration)
        trace.append(record)
        if on_record is not None:
            on_record(record)
        due = (iteration + 1) % tcfg.checkpoint_every == 0 or iteration + 1 == end
        if checkpoint_path is not None and due:
            save_checkpoint(checkpoint_path, params, opt_state, trace, acfg,
                            batch=batch, rngs=rngs, iteration=iteration + 1)
    return params, batch, trace


# ---------------------------------------------------------------------------
# checkpoints: the ansatz container plus optimizer/sampler/RNG state

_CHECKPOINT_VERSION = 1


def rng_states(rngs) -> list[dict]:
    return [r.bit_generator.state for r in rngs]


def restore_rngs(states) -> list[np.random.Generator]:
    out = []
    for st in states:
        bg = np.random.PCG64()
        bg.state = st
        out.append(np.random.Generator(bg))
    return out


def save_checkpoint(path, params, opt_state: OptimizerState, trace: TrainTrace,
                    acfg: ansatz.AnsatzConfig, batch: sampler.WalkerBatch | None = None,
                    rngs=None, iteration: int = 0, extra: dict | None = None) -> None:
    header = {
        "checkpoint_version": _CHECKPOINT_VERSION,
        "config": {
            "n_determinants": acfg.n_determinants,
            "hidden_one": acfg.hidden_one,
            "hidden_two": acfg.hidden_two,
            "n_layers": acfg.n_layers,
            "n_up": acfg.n_up,
            "n_down": acfg.n_down,
        },
        "optimizer": {"kind": opt_state.kind, "step": opt_state.step},
        "iteration": iteration,
        "rng_states": rng_states(rngs) if rngs is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in params.items()}
    for k, v in opt_state.m.items():
        arrays[f"adam_m:{k}"] = v
    for k, v in opt_state.v.items():
        arrays[f"adam_v:{k}"] = v
    arrays["trace"] = trace.as_array()
    if batch is not None:
        arrays["walker_positions"] = batch.positions
        arrays["walker_log_prob"] = batch.log_prob
        arrays["walker_counts"] = np.array([batch.accept_count, batch.proposal_count])
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    """Restore a training state dict; raises ValueError on damaged files."""
    try:
        with np.load(path, allow_pickle=False) as data:
            files = set(data.files)
            if "header" not in files:
                raise ValueError(f"{path}: not a training checkpoint")
            header = json.loads(bytes(data["header"]).decode())
            if header.get("checkpoint_version") != _CHECKPOINT_VERSION:
                raise ValueError(
                    f"{path}: unsupported checkpoint version "
                    f"{header.get('checkpoint_version')!r}")
            params = {k[len("param:"):]: data[k] for k in files if k.startswith("param:")}
            opt_state = OptimizerState(
                kind=header["optimizer"]["kind"], step=header["optimizer"]["step"],
                m={k[len("adam_m:"):]: data[k] for k in files if k.startswith("adam_m:")},
                v={k[len("adam_v:"):]: data[k] for k in files if k.startswith("adam_v:")},
            )
            out = {
                "params": params,
                "opt_state": opt_state,
                "trace": TrainTrace.from_array(data["trace"]),
                "config": ansatz.AnsatzConfig(**header["config"]),
                "iteration": header["iteration"],
                "rngs": (restore_rngs(header["rng_states"])
                         if header.get("rng_states") else None),
                "extra": header.get("extra", {}),
            }
            if "walker_positions" in files:
                counts = data["walker_counts"]
                out["batch"] = sampler.WalkerBatch(
                    positions=data["walker_positions"],
                    log_prob=data["walker_log_prob"],
                    accept_count=int(counts[0]),
                    proposal_count=int(counts[1]),
                )
            return out
    except (zipfile.BadZipFile, OSError, KeyError, EOFError) as exc:
        raise ValueError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc
