"""Command-line entry point.

``eqcontrol COMMAND [CONFIG] [-o DIR]`` with COMMAND one of stratum, rank,
steer, ensemble, layers, spin, demo.  Exit codes: 0 success, 1 invalid
input or numerical failure, 2 precondition violated (e.g. clouds in
different strata), 3 search budget exhausted without convergence.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import COMMANDS, ExperimentConfig, FieldSpec, parse_config
from .errors import ConfigurationError, EqControlError, PreconditionError
from .fields import (
    AttentionKernel,
    AveragedField,
    ConstantKernel,
    GaussianPairwiseKernel,
    LiftedField,
    LinearKernel,
    RandomFourierKernel,
    RandomFourierRawField,
)
from .flow_engine import discrete_layers, run_schedule
from .group_action import (
    FiniteGroupAction,
    format_float,
    read_cloud,
    reflection_group,
    same_stratum,
    spectrum_signature,
    stratum_signature,
    symmetric_group,
    trivial_group,
    write_cloud,
)
from .lie_engine import bracket_span_rank, ensemble_bracket_rank
from .spin_lab import lie_closure, sector_restrict, symmetric_hamiltonian, symmetric_sector_projector
from .steering import SteeringOptions, SteeringProblem, steer

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PRECONDITION = 2
EXIT_BUDGET = 3

log = logging.getLogger("eqcontrol")


# ---------------------------------------------------------------------------
# building objects from a config


def build_action(cfg: ExperimentConfig, n: int, d: int) -> FiniteGroupAction:
    kind = cfg.group.kind
    if kind == "symmetric":
        return symmetric_group(n, d)
    if kind == "reflection":
        # indistinguishable particles, each in the doubled half-space
        refl = reflection_group(n, d, cfg.group.axis)
        return refl if n == 1 else symmetric_group(n, d).product(refl)
    return trivial_group(n, d)


def _opt(value, default):
    return default if value is None else value


def build_field(spec: FieldSpec, n: int, d: int, action: FiniteGroupAction | None = None):
    k = spec.kind
    if k == "fourier":
        return LiftedField(RandomFourierKernel(
            spec.seed, d, _opt(spec.features, 16), _opt(spec.scale, 1.0), _opt(spec.amplitude, 1.0)))
    if k == "attention":
        return LiftedField(AttentionKernel.random(d, _opt(spec.heads, 1), spec.seed, _opt(spec.scale, 1.0)))
    if k == "pairwise":
        if spec.matrix is not None:
            matrix = np.asarray(spec.matrix, dtype=np.float64)
        else:
            rng = np.random.default_rng(spec.seed)
            matrix = _opt(spec.scale, 1.0) * rng.standard_normal((d, d)) / math.sqrt(d)
        return LiftedField(GaussianPairwiseKernel(matrix, _opt(spec.width, 1.0)))
    if k == "constant":
        return LiftedField(ConstantKernel(spec.value))
    if k == "linear":
        return LiftedField(LinearKernel(spec.matrix))
    if k == "averaged":
        if action is None:
            action = symmetric_group(n, d)
        raw = RandomFourierRawField(spec.seed, n, d, _opt(spec.features, 16), _opt(spec.scale, 1.0), _opt(spec.amplitude, 1.0))
        return AveragedField(raw, action)
    raise ConfigurationError(f"unknown field kind {k!r}")


def build_fields(cfg: ExperimentConfig, n: int, d: int) -> list:
    if not cfg.field:
        raise ConfigurationError("no [[field]] tables in the config")
    action = build_action(cfg, n, d)
    return [build_field(s, n, d, action) for s in cfg.field]


def _load(cfg: ExperimentConfig, paths: Sequence[str]) -> list[np.ndarray]:
    return [read_cloud(cfg.resolve(p)) for p in paths]


# ---------------------------------------------------------------------------
# output


@dataclass
class Emitter:
    """Writes files that start with provenance lines; collects the text report."""

    cfg: ExperimentConfig
    command: str
    out_dir: Path

    def provenance(self) -> list[str]:
        seeds = self.cfg.seeds()
        field_seeds = ",".join(str(s) for s in seeds["fields"]) or "none"
        return [
            f"eqcontrol {__version__}",
            f"command {self.command}",
            f"config_hash {self.cfg.hash()}",
            f"seeds run={seeds['run']} fields={field_seeds}",
        ]

    def header(self) -> str:
        return "".join(f"# {p}\n" for p in self.provenance())

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def report(self, lines: Sequence[str]) -> str:
        echo = "".join(f"# | {line}\n" for line in self.cfg.to_toml().splitlines())
        body = "".join(f"{line}\n" for line in lines)
        self.path("report.txt").write_text(self.header() + "# config (defaults filled)\n" + echo + body)
        return body


# ---------------------------------------------------------------------------
# commands


def cmd_stratum(cfg: ExperimentConfig, em: Emitter) -> tuple[int, list[str]]:
    tol = cfg.stratum.tol
    lines = []
    initial = _load(cfg, cfg.clouds.initial)
    target = _load(cfg, cfg.clouds.target)
    for name, q in zip(cfg.clouds.initial + cfg.clouds.target, initial + target):
        lines.append(f"cloud {name} n={q.shape[0]} d={q.shape[1]} signature {stratum_signature(q, tol)}")
    for name_a, name_b, a, b in zip(cfg.clouds.initial, cfg.clouds.target, initial, target):
        if a.shape != b.shape:
            lines.append(f"pair {name_a} -> {name_b}: different shapes, different strata")
            continue
        action = build_action(cfg, *a.shape) if cfg.group.kind == "reflection" else None
        perm = same_stratum(a, b, tol, action)
        if perm is None:
            lines.append(f"pair {name_a} -> {name_b}: different strata")
        else:
            lines.append(f"pair {name_a} -> {name_b}: same stratum via permutation {list(perm.mapping)}")
    spectra = []
    for name in cfg.stratum.matrices:
        m = np.loadtxt(cfg.resolve(name), delimiter=",", comments="#", ndmin=2)
        if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, rtol=0, atol=1e-12):
            raise ConfigurationError(f"{name}: expected a symmetric square matrix")
        eigs = np.linalg.eigvalsh(m)
        sig = spectrum_signature(eigs, tol)
        spectra.append(sig.sizes)
        ev = " ".join(format_float(float(e)) for e in eigs)
        lines.append(f"matrix {name} eigenvalues [{ev}] ordered multiplicities {list(sig.sizes)}")
    if len(spectra) > 1:
        for i in range(1, len(spectra)):
            same = spectra[i] == spectra[0]
            lines.append(
                f"matrices {cfg.stratum.matrices[0]} ~ {cfg.stratum.matrices[i]}: "
                + ("same stratum" if same else "different strata")
            )
    if not lines:
        raise ConfigurationError("stratum needs clouds or matrices")
    return EXIT_OK, lines


def _rank_clouds(cfg: ExperimentConfig) -> list[tuple[str, np.ndarray]]:
    named = list(zip(cfg.clouds.initial, _load(cfg, cfg.clouds.initial)))
    r = cfg.rank
    if r.samples:
        n = r.n or (named[0][1].shape[0] if named else 0)
        d = r.d or (named[0][1].shape[1] if named else 0)
        if n < 1 or d < 1:
            raise ConfigurationError("[rank] samples need n and d (or a cloud to copy them from)")
        rng = np.random.default_rng(cfg.run.seed)
        named += [(f"sample{j}", rng.uniform(-1.0, 1.0, (n, d))) for j in range(r.samples)]
    if not named:
        raise ConfigurationError("rank needs clouds or [rank] samples")
    return named


def cmd_rank(cfg: ExperimentConfig, em: Emitter) -> tuple[int, list[str]]:
    r = cfg.rank
    named = _rank_clouds(cfg)
    n, d = named[0][1].shape
    fields = build_fields(cfg, n, d)
    lines = []
    if r.ensemble:
        res = ensemble_bracket_rank(fields, [q for _, q in named], r.depth, r.h, r.svd_tol, r.tol)
        lines.append(res.report("ensemble " + ",".join(name for name, _ in named)))
        lines.append(f"generating {int(res.generating)}/1")
        return EXIT_OK, lines
    passed = 0
    for name, q in named:
        if q.shape != (n, d):
            raise ConfigurationError(f"{name}: all rank clouds must share shape {(n, d)}")
        res = bracket_span_rank(fields, q, r.depth, r.h, r.svd_tol, r.tol)
        passed += res.generating
        lines.append(res.report(name))
    lines.append(f"generating {passed}/{len(named)}")
    return EXIT_OK, lines


def _steer(cfg: ExperimentConfig, em: Emitter, ensemble: bool) -> tuple[int, list[str]]:
    initial = _load(cfg, cfg.clouds.initial)
    target = _load(cfg, cfg.clouds.target)
    if not initial or len(initial) != len(target):
        raise ConfigurationError("[clouds] needs matching initial and target lists")
    if not ensemble and len(initial) != 1:
        raise ConfigurationError("steer takes one initial and one target cloud; use ensemble for more")
    n, d = initial[0].shape
    fields = build_fields(cfg, n, d)
    s = cfg.steering
    opts = SteeringOptions(
        min_legs=s.min_legs, max_legs=s.max_legs, restarts=s.restarts, budget=s.budget,
        step=cfg.integration.step, seed=cfg.run.seed, tolerance=s.tolerance, t_max=s.t_max,
        init_duration=s.init_duration, labeled=s.labeled, threads=cfg.run.threads,
        bound=cfg.integration.bound, restart_budget=s.restart_budget, method=s.method,
    )
    action = build_action(cfg, n, d) if cfg.group.kind != "trivial" else None
    problem = SteeringProblem(fields, initial, target, opts, action)
    result = steer(problem)
    result.schedule.write(em.path("schedule.txt"), em.provenance())
    every = cfg.integration.sample_every or None
    for h, q0 in enumerate(problem.initial):
        traj = run_schedule(problem.fields, result.schedule, q0, opts.step, bound=opts.bound, sample_every=every)
        name = "trajectory.csv" if not ensemble else f"trajectory_{h}.csv"
        traj.to_csv(em.path(name), em.provenance())
    lines = result.report().splitlines()
    return (EXIT_OK if result.converged else EXIT_BUDGET), lines


def cmd_steer(cfg, em):
    return _steer(cfg, em, ensemble=False)


def cmd_ensemble(cfg, em):
    return _steer(cfg, em, ensemble=True)


def cmd_layers(cfg: ExperimentConfig, em: Emitter) -> tuple[int, list[str]]:
    clouds = _load(cfg, cfg.clouds.initial)
    if not clouds:
        raise ConfigurationError("layers needs [clouds] initial")
    lines = []
    for h, q in enumerate(clouds):
        field = build_fields(cfg, *q.shape)[0]
        out = discrete_layers(field, q, cfg.layers.dt, cfg.layers.steps, bound=cfg.integration.bound)
        name = f"layers_{h}.csv"
        write_cloud(em.path(name), out, em.provenance())
        lines.append(f"cloud {cfg.clouds.initial[h]} -> {name} signature {stratum_signature(out)}")
    return EXIT_OK, lines


def cmd_spin(cfg: ExperimentConfig, em: Emitter) -> tuple[int, list[str]]:
    sp = cfg.spin
    hams = [symmetric_hamiltonian(k, sp.n) for k in sp.hamiltonians]
    report = lie_closure(hams, sp.max_dim, sp.tol)
    proj = symmetric_sector_projector(sp.n)
    lines = [f"n {sp.n}", f"hamiltonians {','.join(sp.hamiltonians)}"]
    for kind, h in zip(sp.hamiltonians, hams):
        lines.append(f"projector_commutator {kind} {float(np.linalg.norm(h @ proj - proj @ h)):.3e}")
    sector = lie_closure([sector_restrict(h, sp.n) for h in hams], sp.max_dim, sp.tol)
    lines += [
        f"dimension {report.dimension}",
        f"sector_dimension {sector.dimension}",
        f"converged {str(report.converged).lower()}",
        f"closure_residual {report.closure_residual():.3e}",
    ]
    em.path("closure.csv").write_text(em.header() + report.to_csv())
    return EXIT_OK, lines


HANDLERS = {
    "stratum": cmd_stratum,
    "rank": cmd_rank,
    "steer": cmd_steer,
    "ensemble": cmd_ensemble,
    "layers": cmd_layers,
    "spin": cmd_spin,
}

# (name, command, config file, expected exit status)
DEMOS = (
    ("boundary_same_side", "steer", "boundary_same_side.toml", EXIT_OK),
    ("boundary_cross", "steer", "boundary_cross.toml", EXIT_PRECONDITION),
    ("spectrum", "stratum", "spectrum.toml", EXIT_OK),
    ("particles_stratum", "stratum", "particles_stratum.toml", EXIT_OK),
    ("particles_steer", "steer", "particles_steer.toml", EXIT_OK),
)


def demo_dir() -> Path:
    return Path(str(resources.files("eqcontrol") / "demos"))


def run_demos(out_dir: Path, stream=None) -> int:
    """Run every shipped demo; exit 0 iff each returns its expected status."""
    stream = stream or sys.stdout
    ok = True
    for name, command, config_name, expected in DEMOS:
        cfg = parse_config(demo_dir() / config_name)
        status, text = _dispatch(command, cfg, out_dir / name)
        match = status == expected
        ok &= match
        print(f"== demo {name} ({command}) exit {status} expected {expected} {'ok' if match else 'MISMATCH'}", file=stream)
        stream.write(text)
    return EXIT_OK if ok else EXIT_ERROR


def _dispatch(command: str, cfg: ExperimentConfig, out_dir: Path) -> tuple[int, str]:
    em = Emitter(cfg, command, out_dir)
    try:
        status, lines = HANDLERS[command](cfg, em)
    except PreconditionError as exc:
        return EXIT_PRECONDITION, em.report([f"precondition violated: {exc}"])
    return status, em.report(lines)


def dispatch(command: str, config: ExperimentConfig | None = None, output=None, stream=None) -> int:
    """Run ``command`` and return its exit status (see module docstring)."""
    stream = stream or sys.stdout
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command {command!r}")
    if command == "demo":
        out = Path(output) if output is not None else (config.output_dir if config else Path("demo_out"))
        return run_demos(out, stream)
    if config is None:
        raise ConfigurationError(f"{command} needs a config file")
    out = Path(output) if output is not None else config.output_dir
    status, text = _dispatch(command, config, out)
    stream.write(text)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="eqcontrol", description="Equivariant control experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", nargs="?", help="TOML experiment config (optional for demo)")
    parser.add_argument("-o", "--output", help="output directory (overrides [run] output)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log search progress")
    parser.add_argument("--version", action="version", version=f"eqcontrol {__version__}")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else None
        return dispatch(args.command, cfg, args.output)
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except EqControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
