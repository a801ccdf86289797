"""Command-line driver: ``vpscatter <subcommand> --config run.yaml --out dir``.

Exit codes: 0 pass, 2 certificate failure, 3 numerical guard or domain
error, 4 configuration error.
"""

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numba
import numpy as np

from . import __version__
from . import forward as fw
from . import waveop as wo
from .asymptotic import AsymptoticData
from .config import SUBCOMMANDS, load_config, parse_config, profile_grid
from .dynamics import TimeGrid, integrate_kdk
from .errors import CertificateError, ConfigError, VPError
from .field import FieldConfig, asymptotic_field
from .phase_space import (GridSpec, invert, invert_arrays, jacobian_canonical, sample_profile,
                          write_snapshot)
from .profiles import GaussianProfile, PointConcentration, ZeroProfile
from .scatter import scattering_map

log = logging.getLogger("vpscatter")

# descriptive provenance tag of every top-level report entry
REPORT_TAGS = {
    "extract.json": {
        "E0_probe": "forward.limit_field: E(s_min) on the probe lattice",
        "gamma0": "forward.limit_profile: nu(s_min) on the limit lattice",
        "certificates": "forward.dyadic_cauchy: sup differences over dyadic node pairs",
        "fits": "forward.norm_growth: fitted <ln s> exponents of the norm timeline",
    },
    "picard.json": {
        "picard": "waveop.picard: sup differences between successive sweeps",
        "K_bounds": "waveop.hamiltonian_bounds: fitted constants of the K derivative bounds",
        "theta_norms": "waveop.theta_norms: compression-weighted derivative norms",
    },
    "scatter.json": {
        "E_prescribed": "scatmap.prescribed: -E~0(-v) from the reflected past data",
        "E_recovered": "scatmap.recovered: forward limit field after the bridge",
        "certificates": "scatmap.gates: sub-pipeline certificates in pipeline order",
    },
    "fields.json": {"E_inf": "fields.asymptotic: E_inf on the target lattice"},
    "verify.json": {"checks": "verify.invariants: structural invariant checks"},
}


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True, default=_json_default) + "\n")


class RunContext:
    """Output directory, manifest and RNG of one invocation."""

    def __init__(self, cfg, out, threads):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rng = np.random.default_rng(cfg.seed)
        self.outputs = []
        self.started = time.time()
        self.threads = threads
        self.manifest = {
            "version": __version__,
            "subcommand": cfg.subcommand,
            "config": cfg.model_dump(mode="json"),
            "config_hash": cfg.hash,
            "threads": threads,
            "status": "incomplete",
            "outputs": self.outputs,
        }
        self.flush()

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def report(self, name, data):
        data = {"config_hash": self.cfg.hash, "tags": REPORT_TAGS.get(name, {}), **data}
        write_json(self.path(name), data)

    def flush(self):
        write_json(self.out / "manifest.json", self.manifest)

    def finish(self, code, message=""):
        self.manifest["status"] = "complete" if code == 0 else "failed"
        self.manifest["exit_code"] = code
        self.manifest["message"] = message
        self.manifest["wall_seconds"] = round(time.time() - self.started, 3)
        self.flush()


def _field_config(cfg):
    return cfg.field.to_field_config()


def _jittered(ctx, probes, spacing):
    j = ctx.cfg.probes.jitter
    if j == 0 or len(probes) == 0:
        return probes
    return probes + j * spacing * ctx.rng.uniform(-1, 1, probes.shape)


# --- subcommands -------------------------------------------------------------------

def cmd_forward(ctx):
    cfg = ctx.cfg
    prof = cfg.build_profile()
    gamma1 = sample_profile(prof, "inverted", profile_grid(prof, cfg.sampling.n, cfg.sampling.half_widths),
                            time=1.0, lam=cfg.lam)
    g = cfg.grids
    grid = TimeGrid.geometric(1.0, g.s_min, g.log2_ratio, substeps=g.substeps)
    center, half = fw.probe_box(gamma1)
    probes = fw.lattice(center, half, cfg.probes.n_probe)
    spacing = 2 * half / max(cfg.probes.n_probe - 1, 1)
    probes = _jittered(ctx, probes, spacing)
    fcfg = _field_config(cfg)
    run = fw.run_forward(gamma1, grid, fcfg, profile=prof, probes=probes, tangents=True,
                         eps0=cfg.tolerances.eps0, refresh=cfg.field.refresh)
    ctx.manifest["run"] = {"grid": grid.describe(), "field": fcfg.describe(),
                           "refresh": cfg.field.refresh, "n_samples": len(gamma1),
                           "data_norms": run.norms, "notes": run.notes}
    ctx.flush()
    for i, s in enumerate(run.s):
        write_snapshot(ctx.path(f"snapshots/node_{i:03d}.txt"), run.flow.ensemble_at(s))
    rec = fw.norm_monitor(run)
    ctx.path("norms.txt").write_text(fw.format_norm_rows(rec))
    _write_probe_rows(ctx.path("field_probes.txt"), run.s, run.probes, run.E_probe)

    out = {"fits": rec.fits, "checks": rec.checks, "data_norms": run.norms, "notes": run.notes,
           "certificates": {}}
    try:
        e0 = fw.extract_E0(run, cauchy_tol=cfg.tolerances.cauchy_tol)
        out.update(e0.to_dict())
        out["certificates"]["E0_cauchy"] = {"passed": True, "sup_diff": e0.cauchy}
        lp = fw.extract_limit_profile(run, e0, n=cfg.probes.n_limit)
        out["certificates"]["nu_cauchy"] = {"passed": True, "sup_diff": lp.diffs}
        out["gamma0"] = lp.to_dict()
    except CertificateError as exc:
        out["certificates"][exc.gate] = {"passed": False, "sup_diff": exc.history}
        out["failed_gate"] = exc.gate
        ctx.report("extract.json", out)
        raise
    ctx.report("extract.json", out)
    return 0


def _write_probe_rows(path, s_nodes, probes, E):
    lines = ["# s qx qy qz Ex Ey Ez |E|"]
    for s, Es in zip(s_nodes, E):
        mag = np.linalg.norm(Es, axis=1)
        for q, e, m in zip(probes, Es, mag):
            lines.append(" ".join(f"{x:.10e}" for x in (s, *q, *e, m)))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_waveop(ctx):
    cfg = ctx.cfg
    prof = cfg.build_profile()
    fcfg = _field_config(cfg)
    grid = wo.sigma0_grid(prof, cfg.sampling.n, cfg.sampling.half_widths)
    setup = wo.prepare_asymptotic(prof, grid, cfg.lam, fcfg)
    g = cfg.grids
    ctx.manifest["run"] = {"field": fcfg.describe(), "n_samples": len(setup.sigma0),
                           "c0": setup.c0, "notes": setup.notes}
    ctx.flush()
    try:
        state = wo.picard_iterate(setup, cfg=fcfg, tol=cfg.tolerances.picard_tol,
                                  max_iter=cfg.tolerances.picard_max_iter, T_star=g.T_star,
                                  s_min=g.s_min, substeps=g.canonical_substeps)
    except CertificateError as exc:
        ctx.report("picard.json", {"picard": {"converged": False, "sup_diff": exc.history},
                                   "failed_gate": exc.gate})
        raise
    for i, s in enumerate(state.flow.times):
        write_snapshot(ctx.path(f"snapshots/node_{i:03d}.txt"), state.flow.ensemble_at(s))
    kb = wo.verify_K_bounds(state)
    th = wo.theta_norm_monitor(state)
    ctx.report("picard.json", {"picard": {**state.to_dict(), "extra_sweep": wo.extra_sweep(state)},
                               "K_bounds": kb, "theta_norms": th.to_dict()})
    return 0


def cmd_scatmap(ctx):
    cfg = ctx.cfg
    prof = cfg.build_profile()
    g = cfg.grids
    res = scattering_map(prof, cfg=_field_config(cfg), lam=cfg.lam, n_samples=cfg.sampling.n,
                         picard_tol=cfg.tolerances.picard_tol,
                         picard_max_iter=cfg.tolerances.picard_max_iter, s_min=g.s_min,
                         T_star=g.T_star, canonical_substeps=g.canonical_substeps,
                         bridge_dt=g.bridge_dt, forward_substeps=g.substeps,
                         n_probe=cfg.probes.n_probe, n_limit=cfg.probes.n_limit,
                         tolerance=cfg.tolerances.scatter_rel,
                         sigma_grid=wo.sigma0_grid(prof, cfg.sampling.n, cfg.sampling.half_widths))
    ctx.report("scatter.json", res.report.to_dict())
    if not res.report.passed:
        raise CertificateError(res.report.message, gate=res.report.failed_gate)
    return 0


def cmd_fields(ctx):
    cfg = ctx.cfg
    prof = cfg.build_profile()
    _, _, cb, _ = prof.support()
    ax = np.linspace(-cfg.fields.half, cfg.fields.half, cfg.fields.n_targets)
    v = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + cb
    masses = prof.point_masses()
    if masses:
        # the field is singular on the point masses themselves
        keep = np.all([np.linalg.norm(v - w0, axis=1) > 1e-12 for w0, _ in masses], axis=0)
        v = v[keep]
    res = asymptotic_field(prof, v, tol=cfg.fields.tol)
    lines = ["# vx vy vz Ex Ey Ez |E|"]
    for vi, Ei in zip(v, res.E):
        lines.append(" ".join(f"{x:.10e}" for x in (*vi, *Ei, np.linalg.norm(Ei))))
    table = "\n".join(lines) + "\n"
    ctx.path("fields.txt").write_text(table)
    sys.stdout.write(table)
    ctx.report("fields.json", {"targets": v, "E_inf": res.E, "refinement_diff": res.refinement_diff,
                               "converged": res.converged})
    if not res.converged:
        raise CertificateError("asymptotic-field quadrature did not converge", gate="E_inf_quadrature")
    return 0


# --- verify suites -------------------------------------------------------------------

def _check(name, value, bound):
    return {"name": name, "value": float(value), "bound": bound, "passed": bool(value < bound)}


def _trivial_checks(rng):
    checks = []
    x = rng.normal(size=(64, 3))
    v = rng.normal(size=(64, 3))
    t = rng.uniform(0.1, 10.0)
    s, q, p = invert_arrays(t, x, v)
    t2, x2, v2 = invert_arrays(s, q, p)
    err = max(abs(t2 - t), np.max(np.abs(x2 - x)), np.max(np.abs(v2 - v)))
    checks.append(_check("involution_roundtrip", err, 1e-12))

    asym = AsymptoticData.radial_gaussian((0, 0, 0), 0.3, 1.0)
    dets = [abs(np.linalg.det(jacobian_canonical(si, w, asym, 1)) - 1)
            for si in (0.5, 0.05, 1e-3) for w in rng.normal(size=(4, 3))]
    checks.append(_check("canonical_jacobian_det", max(dets), 1e-10))

    W = PointConcentration(1.0)
    tgt = rng.normal(size=(16, 3)) + 2.0
    E = asymptotic_field(W, tgt).E
    ref = tgt / (4 * math.pi * np.linalg.norm(tgt, axis=1)[:, None] ** 3)
    checks.append(_check("point_mass_field", np.max(np.abs(E - ref)) / np.max(np.abs(ref)), 1e-12))

    setup = wo.prepare_asymptotic(ZeroProfile(), lam=1, cfg=FieldConfig(softening=0.2), n=2)
    st = wo.picard_iterate(setup, cfg=FieldConfig(softening=0.2), tol=1e-8, max_iter=3)
    checks.append(_check("zero_datum_sweeps", st.n, 1.5))

    prof = GaussianProfile(0.05, 1.0, 0.3)
    e = sample_profile(prof, "physical", GridSpec.cube(2.0, 0.6, 2, 2), time=1.0)
    off = FieldConfig(softening=0.2, coupling=False)
    _, end = integrate_kdk(e, TimeGrid.uniform(1.0, 3.0, 0.25).fine_times(), off)
    free = e.positions + 2.0 * e.momenta
    checks.append(_check("free_transport", np.max(np.abs(end.positions - free)), 1e-12))
    return checks


def _structural_checks(rng):
    checks = _trivial_checks(rng)
    prof = GaussianProfile(0.1, 1.0, 0.3)
    cfg = FieldConfig(softening=0.2)
    gamma1 = sample_profile(prof, "inverted", profile_grid(prof, 2), time=1.0)
    grid = TimeGrid.geometric(1.0, 0.0625, substeps=1)

    def once():
        return fw.run_forward(gamma1, grid, cfg, profile=prof, n_probe=3)

    a, b = once(), once()
    det = max(float(np.max(np.abs(np.linalg.det(J) - 1))) for J in a.flow.jacobians.values())
    checks.append(_check("tangent_det", det, 1e-6))
    L2 = [a.flow.ensemble_at(s).l2_norm for s in a.s]
    checks.append(_check("L2_drift", max(abs(x - L2[0]) for x in L2) / L2[0], 1e-10))
    same = all(np.array_equal(a.flow.ensemble_at(s).current, b.flow.ensemble_at(s).current)
               for s in a.s) and np.array_equal(a.E_probe, b.E_probe)
    checks.append(_check("bitwise_determinism", 0.0 if same else 1.0, 0.5))
    back = invert(invert(gamma1))
    checks.append(_check("ensemble_involution", np.max(np.abs(back.current - gamma1.current)), 1e-12))
    return checks


def cmd_verify(ctx):
    suite = ctx.cfg.verify.suite
    checks = _trivial_checks(ctx.rng) if suite == "trivial" else _structural_checks(ctx.rng)
    for c in checks:
        sys.stdout.write(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3e} "
                         f"(< {c['bound']:g})\n")
    ctx.report("verify.json", {"suite": suite, "checks": checks})
    failed = [c["name"] for c in checks if not c["passed"]]
    if failed:
        raise CertificateError(f"invariant checks failed: {', '.join(failed)}", gate="verify")
    return 0


COMMANDS = {"forward": cmd_forward, "waveop": cmd_waveop, "scatmap": cmd_scatmap,
            "fields": cmd_fields, "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="vpscatter", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="run config (JSON or YAML); defaults apply when omitted")
    p.add_argument("--out", default=None, help="output directory (default: runs/<subcommand>-<hash>)")
    p.add_argument("--threads", type=int, default=None, help="numba worker threads")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized probe jitter")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else parse_config({})
    if cfg.subcommand is not None and cfg.subcommand != args.subcommand:
        raise ConfigError(f"config is for {cfg.subcommand!r}, not {args.subcommand!r}")
    updates = {"subcommand": args.subcommand}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        updates["seed"] = args.seed
    return parse_config({**cfg.model_dump(mode="json"), **updates})


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return exc.exit_code
    if args.threads is not None:
        if args.threads < 1:
            sys.stderr.write("config error: --threads must be >= 1\n")
            return ConfigError.exit_code
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    out = args.out or f"runs/{args.subcommand}-{cfg.hash[:10]}"
    ctx = RunContext(cfg, out, numba.get_num_threads())
    try:
        code = COMMANDS[args.subcommand](ctx)
    except VPError as exc:
        gate = getattr(exc, "gate", None)
        ctx.manifest["failed_gate"] = gate
        ctx.finish(exc.exit_code, f"{type(exc).__name__}: {exc}")
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return exc.exit_code
    ctx.finish(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
