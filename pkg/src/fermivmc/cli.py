"""Command-line workflows around the wavefunction engine.

Subcommands: `hf` (SCF report with Mulliken charges and electron
assignment), `train` (full pipeline: HF, charge-guided walker init,
pretraining, energy minimization), `scan` (one training run per bond
length of a diatomic), `ip` (ionization potential from a neutral and a
cation run).

Configuration is an INI file with one section per module; unknown sections
or keys are hard errors. `--seed` overrides every seed in the file and
`--out` the output directory. Exit codes: 0 success, 1 usage or config
error, 2 numerical failure (SCF non-convergence, all walkers flagged).

Persisted CSVs carry a provenance comment header (version, seed, config
hash) and contain only deterministic columns, so a rerun with the same
config and seed reproduces them byte for byte; per-iteration wall times
appear only on the console.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__, ansatz, basis, charge_init, energy, molecule, sampler, scf, trainer


class ConfigError(ValueError):
    """Bad run configuration (maps to exit code 1)."""


class NumericalFailure(RuntimeError):
    """SCF non-convergence or an unusable walker batch (exit code 2)."""


@dataclasses.dataclass
class RunConfig:
    molecule_path: Path
    charge: int
    multiplicity: int | None
    sampler: sampler.SamplerConfig
    ansatz_shape: dict            # n_determinants / hidden_one / hidden_two / n_layers
    train: trainer.TrainConfig
    output_dir: Path


_MOLECULE_KEYS = {"path": str, "charge": int, "multiplicity": int}
_SAMPLER_KEYS = {"batch_size": int, "steps_between_updates": int, "proposal_std": float,
                 "init_std": float, "burn_in_steps": int, "seed": int}
_ANSATZ_KEYS = {"n_determinants": int, "hidden_one": int, "hidden_two": int, "n_layers": int}
_TRAIN_KEYS = {"pretrain_epochs": int, "train_iterations": int,
               "learning_rate_pretrain": float, "learning_rate_train": float,
               "optimizer": str, "gradient_clip_norm": float, "checkpoint_every": int,
               "seed": int, "winsorize_outliers": bool}
_OUTPUT_KEYS = {"directory": str}
_SECTIONS = {"molecule": _MOLECULE_KEYS, "sampler": _SAMPLER_KEYS, "ansatz": _ANSATZ_KEYS,
             "train": _TRAIN_KEYS, "output": _OUTPUT_KEYS}


def _parse_value(section, key, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if key == "gradient_clip_norm" and raw.lower() == "none":
            return None
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def load_config(path, seed_override: int | None = None,
                out_override=None) -> RunConfig:
    """Read an INI run configuration; every key must be a known one."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(section, key, raw, _SECTIONS[section][key])

    if "path" not in values["molecule"]:
        raise ConfigError(f"{path}: [molecule] path is required")
    mol_path = Path(values["molecule"]["path"])
    if not mol_path.is_absolute():
        mol_path = (path.parent / mol_path).resolve()
    if not mol_path.is_file():
        raise ConfigError(f"geometry file not found: {mol_path}")

    try:
        scfg = sampler.SamplerConfig(**values["sampler"])
        tcfg = trainer.TrainConfig(**values["train"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if seed_override is not None:
        scfg = dataclasses.replace(scfg, seed=seed_override)
        tcfg = dataclasses.replace(tcfg, seed=seed_override)

    shape = {"n_determinants": 4, "hidden_one": 32, "hidden_two": 8, "n_layers": 2}
    shape.update(values["ansatz"])

    out_dir = Path(out_override) if out_override is not None else Path(
        values["output"].get("directory", "fermivmc_out"))
    return RunConfig(
        molecule_path=mol_path,
        charge=values["molecule"].get("charge", 0),
        multiplicity=values["molecule"].get("multiplicity"),
        sampler=scfg,
        ansatz_shape=shape,
        train=tcfg,
        output_dir=out_dir,
    )


def effective_config_text(run: RunConfig) -> str:
    """INI dump of the fully resolved configuration; rerunning it reproduces the run."""
    lines = ["[molecule]", f"path = {run.molecule_path}", f"charge = {run.charge}"]
    if run.multiplicity is not None:
        lines.append(f"multiplicity = {run.multiplicity}")
    lines += ["", "[sampler]"]
    lines += [f"{k} = {getattr(run.sampler, k)}" for k in _SAMPLER_KEYS]
    lines += ["", "[ansatz]"]
    lines += [f"{k} = {run.ansatz_shape[k]}" for k in _ANSATZ_KEYS]
    lines += ["", "[train]"]
    lines += [f"{k} = {getattr(run.train, k)}" for k in _TRAIN_KEYS]
    lines += ["", "[output]", f"directory = {run.output_dir}", ""]
    return "\n".join(lines)


def config_hash(run: RunConfig) -> str:
    """Digest of the physics-relevant configuration.

    Hashes the geometry file content (not its path) plus every molecule,
    sampler, ansatz, and train setting. Output location is excluded so
    identical runs into different directories produce identical CSVs.
    """
    h = hashlib.sha256()
    h.update(run.molecule_path.read_bytes())
    material = [f"charge={run.charge}", f"multiplicity={run.multiplicity}"]
    material += [f"sampler.{k}={getattr(run.sampler, k)}" for k in _SAMPLER_KEYS]
    material += [f"ansatz.{k}={run.ansatz_shape[k]}" for k in _ANSATZ_KEYS]
    material += [f"train.{k}={getattr(run.train, k)}" for k in _TRAIN_KEYS]
    h.update("\n".join(material).encode())
    return h.hexdigest()[:16]


def _provenance_lines(run: RunConfig) -> list[str]:
    return [f"fermivmc {__version__}", f"seed {run.train.seed}",
            f"config sha256 {config_hash(run)}"]


# ---------------------------------------------------------------------------
# pipeline pieces

def _load_molecule(run: RunConfig) -> molecule.Molecule:
    try:
        return molecule.parse_geometry(run.molecule_path.read_text(),
                                       charge=run.charge,
                                       spin_multiplicity=run.multiplicity)
    except ValueError as exc:
        raise ConfigError(f"{run.molecule_path}: {exc}") from exc


def _hf_stage(mol: molecule.Molecule):
    """SCF plus Mulliken-guided electron assignment; fails on non-convergence."""
    n_up, n_down = molecule.electron_count(mol)
    bas = basis.build_basis(mol)
    solution = scf.run_uhf(mol, bas, n_up, n_down)
    if not solution.converged:
        raise NumericalFailure(
            f"SCF did not converge in {solution.iterations} iterations")
    report = scf.mulliken(solution, bas, mol)
    counts = charge_init.assign_electrons(
        report.partial_charges, list(mol.atomic_numbers), mol.charge)
    assignment = charge_init.split_spins(counts, n_up, n_down)
    return bas, solution, report, assignment


def _write_trace_csv(path, trace: trainer.TrainTrace, run: RunConfig) -> None:
    with open(path, "w") as fh:
        for line in _provenance_lines(run):
            fh.write(f"# {line}\n")
        fh.write("iter,energy_mean,energy_stderr,accept_rate,pretrain_loss\n")
        for r in trace.records:
            fh.write(f"{r.iteration},{r.energy_mean!r},{r.energy_stderr!r},"
                     f"{r.accept_rate!r},{r.pretrain_loss!r}\n")


def _console_stream(total: int, label: str):
    """Per-record printer: first, every 100th, and final record."""
    def emit(record: trainer.TraceRecord):
        i = record.iteration
        if i % 100 == 0 or i == total - 1:
            print(f"{label} {','.join(str(v) for v in record.as_row())}")
    return emit


def run_training_pipeline(run: RunConfig, quiet: bool = False) -> dict:
    """HF, charge-guided init, pretraining, training; writes all artifacts.

    Returns a summary dict with the HF energy and the final-window energy
    statistics (mean over the last tenth of the training iterations, at
    least one; stderr of those per-iteration means).
    """
    mol = _load_molecule(run)
    n_up, n_down = molecule.electron_count(mol)
    bas, solution, report, assignment = _hf_stage(mol)

    acfg = ansatz.AnsatzConfig(n_up=n_up, n_down=n_down, **run.ansatz_shape)
    scfg, tcfg = run.sampler, run.train
    params = ansatz.init_params(acfg, mol, seed=tcfg.seed)
    rngs = sampler.make_rngs(scfg.seed, scfg.batch_size)
    log_psi = ansatz.make_log_psi(params, mol, acfg)
    batch = sampler.init_walkers(mol, assignment, scfg, rngs, log_psi=log_psi)
    batch = sampler.run_chain(batch, log_psi, scfg, scfg.burn_in_steps, rngs)

    out = run.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(effective_config_text(run))

    opt = trainer.make_optimizer_state(tcfg, params)
    stream = None if quiet else _console_stream(tcfg.pretrain_epochs, "pretrain")
    try:
        params, batch, pre_trace = trainer.run_pretraining(
            params, solution, bas, mol, batch, acfg, scfg, tcfg, rngs, opt,
            on_record=stream)
        opt = trainer.make_optimizer_state(tcfg, params)
        stream = None if quiet else _console_stream(tcfg.train_iterations, "train")
        params, batch, trace = trainer.run_training(
            params, mol, batch, acfg, scfg, tcfg, rngs, opt,
            on_record=stream, checkpoint_path=out / "checkpoint.npz")
    except RuntimeError as exc:
        raise NumericalFailure(str(exc)) from exc
    _write_trace_csv(out / "pretrain_trace.csv", pre_trace, run)
    _write_trace_csv(out / "trace.csv", trace, run)

    if trace.records:
        window = max(1, tcfg.train_iterations // 10)
        means = np.array([r.energy_mean for r in trace.records[-window:]])
        mean = float(means.mean())
        stderr = (float(means.std(ddof=1) / np.sqrt(means.size))
                  if means.size > 1 else float(trace.records[-1].energy_stderr))
        source = f"mean of final {means.size} training iterations"
    else:
        # no training requested: report the pretrained ansatz energy
        log_psi = ansatz.make_log_psi(params, mol, acfg)
        batch = sampler.refresh_log_prob(batch, log_psi)
        batch = sampler.run_chain(batch, log_psi, scfg, scfg.steps_between_updates, rngs)
        locals_raw = energy.local_energy_batch(params, batch.positions, mol, acfg)
        try:
            estimate = energy.expected_energy(locals_raw)
        except ValueError as exc:
            raise NumericalFailure(str(exc)) from exc
        window, mean, stderr = 0, estimate.mean, estimate.std_error
        source = "pretrained ansatz, single batch"
    trainer.save_checkpoint(out / "checkpoint.npz", params, opt, trace, acfg,
                            batch=batch, rngs=rngs, iteration=tcfg.train_iterations)

    summary = {
        "hf_energy": solution.total_energy,
        "energy_mean": mean,
        "energy_stderr": stderr,
        "window": window,
        "source": source,
        "partial_charges": list(report.partial_charges),
    }
    lines = [f"# {line}" for line in _provenance_lines(run)]
    lines += [
        f"hf_energy_hartree {solution.total_energy!r}",
        f"energy_mean_hartree {mean!r}",
        f"energy_stderr_hartree {stderr!r}",
        f"window_iterations {window}",
        f"energy_source {source}",
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


# ---------------------------------------------------------------------------
# subcommands

def cmd_hf(run: RunConfig) -> int:
    mol = _load_molecule(run)
    _, solution, report, assignment = _hf_stage(mol)
    print(f"molecule: {' '.join(a.symbol for a in mol.atoms)} charge {mol.charge:+d}")
    print(f"hf_energy_hartree {solution.total_energy!r}")
    print(f"converged {solution.converged} in {solution.iterations} iterations")
    charges = " ".join(f"{q:+.6f}" for q in report.partial_charges)
    print(f"mulliken_partial_charges {charges}")
    print(f"electron_assignment {list(assignment.per_atom_electrons)}")
    print(f"spin_up {list(assignment.per_atom_up)} spin_down {list(assignment.per_atom_down)}")
    run.output_dir.mkdir(parents=True, exist_ok=True)
    (run.output_dir / "hf_report.txt").write_text(scf.format_matrices(solution))
    return 0


def cmd_train(run: RunConfig) -> int:
    summary = run_training_pipeline(run)
    print(f"hf_energy_hartree {summary['hf_energy']!r}")
    print(f"energy_mean_hartree {summary['energy_mean']!r} "
          f"+/- {summary['energy_stderr']!r} ({summary['source']})")
    print(f"artifacts in {run.output_dir}")
    return 0


def _scan_geometry(mol: molecule.Molecule, distance: float) -> molecule.Molecule:
    """The same diatomic with its bond stretched to the given length."""
    a, b = mol.atoms
    axis = b.position - a.position
    norm = float(np.linalg.norm(axis))
    axis = axis / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    moved = molecule.Atom(b.symbol, a.position + distance * axis)
    return molecule.Molecule(atoms=(mol.atoms[0], moved), charge=mol.charge,
                             spin_multiplicity=mol.spin_multiplicity)


def cmd_scan(run: RunConfig, distances, references=None) -> int:
    mol = _load_molecule(run)
    if mol.n_atoms != 2:
        raise ConfigError(f"scan needs a diatomic molecule, got {mol.n_atoms} atoms")
    distances = sorted(float(d) for d in distances)
    if references is not None and len(references) != len(distances):
        raise ConfigError(
            f"{len(references)} reference energies for {len(distances)} scan points")
    run.output_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, distance in enumerate(distances):
        point_mol = _scan_geometry(mol, distance)
        geom_path = run.output_dir / f"point_{index:02d}.geom"
        lines = ["units bohr"] + [
            f"{a.symbol} " + " ".join(repr(float(c)) for c in a.position)
            for a in point_mol.atoms]
        geom_path.write_text("\n".join(lines) + "\n")
        seed = run.train.seed + index
        point_run = RunConfig(
            molecule_path=geom_path,
            charge=run.charge,
            multiplicity=run.multiplicity,
            sampler=dataclasses.replace(run.sampler, seed=seed),
            ansatz_shape=dict(run.ansatz_shape),
            train=dataclasses.replace(run.train, seed=seed),
            output_dir=run.output_dir / f"point_{index:02d}",
        )
        print(f"scan point {index}: distance {distance} Bohr, seed {seed}")
        summary = run_training_pipeline(point_run, quiet=True)
        print(f"  hf {summary['hf_energy']!r}  trained {summary['energy_mean']!r} "
              f"+/- {summary['energy_stderr']!r}")
        rows.append((distance, summary["energy_mean"], summary["energy_stderr"]))
    curve = run.output_dir / "curve.csv"
    with open(curve, "w") as fh:
        for line in _provenance_lines(run):
            fh.write(f"# {line}\n")
        header = "distance_bohr,energy,stderr"
        fh.write(header + (",reference\n" if references is not None else "\n"))
        for index, (d, e, s) in enumerate(rows):
            tail = f",{float(references[index])!r}" if references is not None else ""
            fh.write(f"{d!r},{e!r},{s!r}{tail}\n")
    print(f"curve written to {curve}")
    return 0


def cmd_ip(run_neutral: RunConfig, run_cation: RunConfig) -> int:
    mol_n = _load_molecule(run_neutral)
    mol_c = _load_molecule(run_cation)
    if mol_c.charge - mol_n.charge != 1:
        raise ConfigError(
            f"cation charge {mol_c.charge} must exceed neutral charge {mol_n.charge} by 1")
    _, sol_n, _, _ = _hf_stage(mol_n)
    _, sol_c, _, _ = _hf_stage(mol_c)
    ip_hf = sol_c.total_energy - sol_n.total_energy
    print(f"hf_ip_hartree {ip_hf!r}")
    summary_n = run_training_pipeline(run_neutral, quiet=True)
    summary_c = run_training_pipeline(run_cation, quiet=True)
    ip = summary_c["energy_mean"] - summary_n["energy_mean"]
    stderr = float(np.hypot(summary_n["energy_stderr"], summary_c["energy_stderr"]))
    print(f"trained_ip_hartree {ip!r} +/- {stderr!r}")
    out = run_neutral.output_dir
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# {line}" for line in _provenance_lines(run_neutral)]
    lines += [
        f"hf_ip_hartree {ip_hf!r}",
        f"trained_ip_hartree {ip!r}",
        f"trained_ip_stderr {stderr!r}",
        f"neutral_energy_hartree {summary_n['energy_mean']!r}",
        f"cation_energy_hartree {summary_c['energy_mean']!r}",
    ]
    (out / "ip.txt").write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="fermivmc",
                     description="Neural-wavefunction variational Monte Carlo")
    parser.add_argument("--version", action="version", version=f"fermivmc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--out", default=None, help="override the output directory")

    common(sub.add_parser("hf", help="SCF report with Mulliken charges"))
    common(sub.add_parser("train", help="pretrain and train the wavefunction"))

    p_scan = sub.add_parser("scan", help="bond-length scan of a diatomic")
    common(p_scan)
    p_scan.add_argument("--distances", default=None,
                        help="comma-separated bond lengths in Bohr")
    p_scan.add_argument("--min-distance", type=float, default=None)
    p_scan.add_argument("--max-distance", type=float, default=None)
    p_scan.add_argument("--points", type=int, default=None)
    p_scan.add_argument("--reference", default=None,
                        help="comma-separated reference energies, one per point")

    p_ip = sub.add_parser("ip", help="ionization potential from two runs")
    common(p_ip)
    p_ip.add_argument("--cation-config", required=True,
                      help="INI run configuration of the cation")
    return parser


def _scan_distances(args) -> list[float]:
    if args.distances is not None:
        try:
            return [float(tok) for tok in args.distances.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"--distances: {exc}") from exc
    if None in (args.min_distance, args.max_distance, args.points):
        raise ConfigError("scan needs --distances or --min-distance/--max-distance/--points")
    if args.points < 1 or args.max_distance < args.min_distance:
        raise ConfigError("scan range is empty")
    return list(np.linspace(args.min_distance, args.max_distance, args.points))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if args.command == "hf":
            return cmd_hf(run)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "scan":
            references = None
            if args.reference is not None:
                references = [float(tok) for tok in args.reference.split(",") if tok.strip()]
            return cmd_scan(run, _scan_distances(args), references)
        if args.command == "ip":
            cation = load_config(args.cation_config, seed_override=args.seed,
                                 out_override=None)
            if args.out is not None:
                cation = dataclasses.replace(
                    cation, output_dir=Path(args.out) / "cation")
                run = dataclasses.replace(run, output_dir=Path(args.out))
            elif cation.output_dir == run.output_dir:
                cation = dataclasses.replace(
                    cation, output_dir=run.output_dir / "cation")
            return cmd_ip(run, cation)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"fermivmc: config error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"fermivmc: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
