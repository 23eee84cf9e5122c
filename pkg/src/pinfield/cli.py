"""Command-line driver: ``pinfield <subcommand> --config run.toml --out DIR``.

Every run writes its outputs plus ``manifest.json`` (resolved config, its
hash, seed, package versions, output digests, warnings).  ``pinfield replay
--manifest M --out DIR`` reruns a manifest and must reproduce every output.

Exit codes: 0 ok (warnings go to the manifest), 1 invalid configuration,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig
from .estimators import (
    BatchAccumulator,
    fit_mass,
    green_covariance_mcmc,
    pair_covariance_mcmc,
    translation_covariance_mcmc,
    variance_growth,
)
from .gaussian_oracle import EnumerationCapError, clean_mass_bound_scan, enumerate_rho, green
from .gibbs import map_replicas
from .hswalk import RateField, hitting_bound, hitting_probability, occupation_profile, simulate_walk
from .lattice import Box, Region
from .renorm import (
    CleanCurveAccumulator,
    admissible_tuple,
    block_fits,
    check_admissible,
    classify_blocks,
    dirty_grid_from_pinned,
    random_instance,
)
from .seeding import make_rng

COVARIANCE_HEADER = ["dx", "dy", "distance", "cov", "se"]
MASS_HEADER = ["J", "m", "ci_lo", "ci_hi", "r2", "n_points_used", "n_excluded"]
CLEANPROB_HEADER = ["r", "p_clean", "se", "n_samples"]
ENUMERATE_HEADER = ["mask", "size", "logZ", "rho"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class Run:
    """Output sink for one subcommand: files plus warnings for the manifest."""

    def __init__(self, name: str, cfg: ExperimentConfig, out: Path, threads: int, dump: bool):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.dump = dump
        self.files: list[str] = []
        self.warnings: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, fname: str) -> Path:
        self.files.append(fname)
        return self.out / fname

    def csv(self, fname: str, header: list[str], rows) -> None:
        if "csv" not in self.cfg["outputs"]["formats"]:
            return
        with open(self.path(fname), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def json(self, fname: str, obj) -> None:
        if "json" not in self.cfg["outputs"]["formats"]:
            return
        with open(self.path(fname), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)

    def manifest(self) -> dict:
        digests = {}
        for f in sorted(set(self.files)):
            digests[f] = hashlib.sha256((self.out / f).read_bytes()).hexdigest()
        return {
            "subcommand": self.name,
            "config": self.cfg.data,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "dump_trajectories": self.dump,
            "versions": versions(),
            "outputs": digests,
            "warnings": self.warnings,
        }


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _num(x: float):
    # JSON has no inf/nan
    return x if math.isfinite(x) else str(x)


def versions() -> dict:
    return {
        "pinfield": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample(run: Run) -> None:
    cfg = run.cfg
    params = cfg.sampler_params()
    N = cfg["lattice"]["N"]
    box = Box(N)
    c = box.to_array_index((0, 0))
    total = params.n_snapshots * params.replicas

    def consume(r, stream):
        rows = []
        acc = BatchAccumulator(total, 3, offset=r * params.n_snapshots)
        for chunk in stream:
            dry = chunk.pinned.sum(axis=(1, 2))
            phi0 = chunk.heights[:, c[0], c[1]]
            acc.add(np.stack([dry / len(box), phi0, phi0 * phi0], axis=1))
            rows += [(r, int(s), int(d), float(p)) for s, d, p in zip(chunk.sweep_index, dry, phi0)]
        return acc, rows

    res = map_replicas(params, N, cfg.family(), consume, tag="sample", threads=run.threads)
    acc = res[0][0]
    for a, _ in res[1:]:
        acc = acc + a
    run.csv("stream.csv", ["replica", "sweep", "dry_count", "phi0"], (row for _, rows in res for row in rows))
    est, se = acc.statistic(lambda m: np.array([m[0], m[1], m[2] - m[1] ** 2]))
    run.json("summary.json", {
        "snapshots": total,
        "dry_density": {"mean": est[0], "se": se[0]},
        "phi0_mean": {"mean": est[1], "se": se[1]},
        "phi0_variance": {"mean": est[2], "se": se[2]},
    })


def _covariance_curve(run: Run, J, tag: str):
    cfg = run.cfg
    es = cfg["estimators"]
    est = green_covariance_mcmc if es["method"] == "green" else translation_covariance_mcmc
    try:
        curve = est(cfg.sampler_params(J), cfg["lattice"]["N"], cfg.family(), es["d_max"], es["margin"], run.threads, tag, es["directions"])
    except ValueError as exc:
        if "window is empty" not in str(exc):
            raise
        raise ConfigError(f"estimators: d_max={es['d_max']} and margin leave no room in a box of radius {cfg['lattice']['N']}") from exc
    return curve.with_norm(es["norm"])


def _covariance_rows(curve):
    return [(p.displacement[0], p.displacement[1], p.distance, p.estimate, p.se) for p in curve.points]


def cmd_covariance(run: Run) -> None:
    curve = _covariance_curve(run, run.cfg.J, "covariance")
    run.csv("covariance.csv", COVARIANCE_HEADER, _covariance_rows(curve))


def _mass_row(J, fit):
    return (J, fit.m, fit.ci[0], fit.ci[1], fit.r2, fit.n_used, fit.n_excluded)


def _fit(run: Run, curve, J):
    es = run.cfg["estimators"]
    fit = fit_mass(curve, es["fit_min"], es["fit_max"])
    for f in fit.flags:
        run.warn(f"J={J}: {f}")
    return fit


def cmd_mass(run: Run) -> None:
    J = run.cfg.J
    curve = _covariance_curve(run, J, "mass")
    fit = _fit(run, curve, J)
    run.csv("covariance.csv", COVARIANCE_HEADER, _covariance_rows(curve))
    run.csv("mass.csv", MASS_HEADER, [_mass_row("disabled" if J is None else J, fit)])
    run.json("mass.json", {
        "J": J, "m": _num(fit.m), "ci": [_num(x) for x in fit.ci], "r2": _num(fit.r2),
        "intercept": _num(fit.intercept), "n_points_used": fit.n_used, "n_excluded": fit.n_excluded,
        "flags": fit.flags,
    })


def cmd_mass_scan(run: Run) -> None:
    rows = []
    for J in run.cfg["pinning"]["J_list"]:
        curve = _covariance_curve(run, float(J), f"mass-scan-J{float(J)!r}")
        rows.append(_mass_row(float(J), _fit(run, curve, J)))
    run.csv("mass.csv", MASS_HEADER, rows)


def cmd_dryset_stats(run: Run) -> None:
    cfg = run.cfg
    params = cfg.sampler_params()
    N = cfg["lattice"]["N"]
    box = Box(N)
    rn = cfg["renorm"]
    l, eps, radii = rn["l"], rn["epsilon"], rn["r_list"]
    for r in radii:
        if not block_fits(box, l, r):
            run.warn(f"ring r={r} at block radius l={l} extends beyond the box N={N}; exterior counted dry")
    r_in = max((N - l) // (2 * l + 1), 0)
    per = params.n_snapshots
    total = per * params.replicas

    def consume(rep, stream):
        curve = CleanCurveAccumulator(box, l, eps, radii, total, offset=rep * per)
        occ = BatchAccumulator(total, 2, offset=rep * per)
        last = None
        for chunk in stream:
            curve.add_pinned(chunk.pinned)
            dirty = dirty_grid_from_pinned(chunk.pinned, box, l, r_in).mean(axis=(1, 2))
            occ.add(np.stack([chunk.pinned.mean(axis=(1, 2)), dirty], axis=1))
            last = chunk.pinned[-1]
        return curve, occ, last

    res = map_replicas(params, N, cfg.family(), consume, tag="dryset-stats", threads=run.threads)
    curve_acc, occ, last = res[0]
    for c, o, _ in res[1:]:
        curve_acc.merge(c)
        occ = occ + o
    curve = curve_acc.curve()
    for f in curve.flags:
        run.warn(f)
    run.csv("cleanprob.csv", CLEANPROB_HEADER, curve.rows())
    dry = [(x - N, y - N) for x, y in zip(*np.nonzero(last))]
    scene = classify_blocks(dry, l, max(radii), box)
    run.csv("scene.csv", ["x", "y", "dirty"], scene.to_csv_rows())
    est, se = occ.statistic()
    run.json("dryset.json", {
        "snapshots": total,
        "dry_density": {"mean": est[0], "se": se[0]},
        "dirty_block_fraction": {"mean": est[1], "se": se[1], "block_radius": l, "renormalized_radius": r_in},
        "clean_slope": _num(curve.slope),
        "flags": curve.flags,
    })


def _site_list(items):
    return [tuple(v) for v in items]


def cmd_hs_verify(run: Run) -> None:
    cfg = run.cfg
    hw = cfg["hswalk"]
    fam = cfg.family()
    N = cfg["lattice"]["N"]
    start = tuple(hw["start"])
    targets = _site_list(hw["targets"])
    dry = _site_list(hw["dry"])
    common = dict(replicas=hw["replicas"], seed=cfg.seed, horizon=hw["horizon"], prerun_sweeps=hw["prerun_sweeps"], tag="hs-verify")
    nb = hw["noise_blocks"]
    # the coarse run splits each Gaussian increment into 2*nb pieces so that it
    # shares its noise with the run at half the step
    coarse = occupation_profile(start, targets, dry, N, fam, dt=hw["dt"], noise_blocks=2 * nb, **common)
    fine = occupation_profile(start, targets, dry, N, fam, dt=hw["dt"] / 2, noise_blocks=nb, **common)
    if fam.constant_curvature and fam.kind == "gaussian":
        G = green(N, dry, fam.param)
        ref = {j: (G(start, j), 0.0) for j in targets}
        source = "green"
    else:
        params = cfg.sampler_params(None)
        curve = pair_covariance_mcmc(params, N, fam, [(start, j) for j in targets], frozen=dry, threads=run.threads, tag="hs-verify-gibbs")
        ref = {p.j: (p.estimate, p.se) for p in curve.points}
        source = "gibbs"
    rows = []
    for j in targets:
        a, b = coarse[j], fine[j]
        r, rse = ref[j]
        z = (a.mean - r) / math.hypot(a.se, rse)
        shift = (b.mean - a.mean) / math.hypot(a.se, b.se)
        rows.append((j[0], j[1], a.mean, a.se, b.mean, b.se, r, rse, z, shift))
        for f in a.flags + b.flags:
            run.warn(f"target {j}: {f}")
    run.csv("hs_verify.csv", ["x", "y", "occupation", "se", "occupation_half_dt", "se_half_dt", "reference", "reference_se", "z", "dt_shift"], rows)
    first = coarse[targets[0]]
    run.json("hs_verify.json", {
        "reference": source,
        "start": start,
        "dry": dry,
        "dt": hw["dt"],
        "replicas": hw["replicas"],
        "prerun_sweeps": hw["prerun_sweeps"],
        "censored_fraction": first.censored_fraction,
        "mean_lifetime": first.mean_lifetime,
        "acceptance": first.acceptance,
    })
    if run.dump:
        _dump_trajectories(run, start, dry, N, fam)


def _dump_trajectories(run: Run, start, dry, N, fam) -> None:
    """A few walks for inspection.  For field-dependent rates the rates are
    frozen at a gibbs sample of the field (no diffusion)."""
    cfg = run.cfg
    hw = cfg["hswalk"]
    box = Box(N)
    killed = set(dry)
    with open(run.path("trajectories.jsonl"), "w") as fh:
        for n in range(hw["dump_count"]):
            rng = make_rng(cfg.seed, n, "hs-dump")
            if fam.constant_curvature:
                rates = RateField.constant(fam.eval(0.0)[2].item(), fam.c_V, N + 1)
            else:
                from .gibbs import Chain

                chain = Chain(box, None, fam, rng, frozen=dry)
                chain.advance(hw["prerun_sweeps"])
                rates = RateField.frozen_sample(chain.config, fam)
            traj = simulate_walk(start, rates, killed, rng, hw["horizon"], alive=set(box.sites) - killed)
            fh.write(json.dumps({"walk": n, "death_time": traj.death_time, "killed": traj.killed}) + "\n")
            traj.to_jsonl(fh)


def cmd_hit_bound(run: Run) -> None:
    cfg = run.cfg
    hw = cfg["hswalk"]
    c_V = cfg.family().c_V
    dists = hw["hit_distances"]
    l = max(dists)
    rows = []
    violations = 0
    for f in range(hw["fields"]):
        rng = make_rng(cfg.seed, f, "hit-bound")
        rates = RateField.synthetic(c_V, l + 1, rng)
        for d in dists:
            cand = [(x, y) for x in range(-l, l + 1) for y in range(-l, l + 1) if abs(x) + abs(y) == d]
            k = cand[int(rng.integers(len(cand)))]
            est = hitting_probability((0, 0), k, l, rates, hw["hit_replicas"], rng)
            violations += not est.consistent
            rows.append((f, d, k[0], k[1], est.p, est.se, est.bound, int(est.consistent)))
    if violations:
        run.warn(f"{violations} estimates fall below the per-path bound by more than 3 SE")
    run.csv("hitbound.csv", ["field", "distance", "kx", "ky", "p", "se", "bound", "consistent"], rows)
    run.json("hitbound.json", {"c_V": c_V, "box_radius": l, "violations": violations,
                               "bounds": {str(d): hitting_bound(c_V, d) for d in dists}})


def _enumeration_region(cfg: ExperimentConfig):
    en = cfg["enumerate"]
    if en["shape"] == "rect":
        region = Region.rect(en["width"], en["height"])
    else:
        region = Box(cfg["lattice"]["N"])
    if len(region.sites) > en["cap"]:
        raise ConfigError(f"enumerate: region has {len(region.sites)} sites, above the enumeration cap {en['cap']}")
    return region


def cmd_enumerate(run: Run) -> None:
    cfg = run.cfg
    fam = cfg.family()
    if fam.kind != "gaussian":
        raise ConfigError("enumerate: exact enumeration needs model.family = 'gaussian'")
    if cfg.J is None:
        raise ConfigError("enumerate: needs pinning enabled")
    region = _enumeration_region(cfg)
    try:
        table = enumerate_rho(region, cfg.J, fam.param, cap=cfg["enumerate"]["cap"])
    except EnumerationCapError as exc:
        raise ConfigError(f"enumerate: {exc}") from exc
    table.to_csv(run.path("enumerate.csv"))
    scan = clean_mass_bound_scan(region, cfg.J, fam.param, table=table)
    run.csv("scan.csv", ["size", "exponent"], zip(scan.sizes, scan.exponents))
    steps = np.diff(scan.exponents)
    if np.any(steps < 0):
        run.warn("exponent decreases along the nested family")
    run.json("enumerate.json", {"sites": len(region.sites), "expected_dry_size": table.expected_size(), "scan_slope": scan.slope})


def cmd_tuple_check(run: Run) -> None:
    cfg = run.cfg
    tp = cfg["tuples"]
    rng = make_rng(cfg.seed, 0, "tuple-check")
    rows = []
    failures = 0
    for n in range(tp["instances"]):
        A, B = random_instance(rng, tp["radius"])
        tup = admissible_tuple(A, B)
        rep = check_admissible(A, tup, B)
        failures += not rep.ok
        rows.append((n, len(A), len(B), len(tup.components), ";".join(map(str, tup.k)),
                     len(tup.enlarged()), int(rep.dry_neighbour), int(rep.size_bound), int(rep.maximal)))
    if failures:
        run.warn(f"{failures} instances fail an admissible-tuple check")
    run.csv("tuples.csv", ["instance", "dry_size", "b_size", "components", "k", "enlarged_size", "dry_neighbour", "size_bound", "maximal"], rows)
    run.json("tuples.json", {"instances": tp["instances"], "radius": tp["radius"], "failures": failures})


def cmd_deloc_scan(run: Run) -> None:
    cfg = run.cfg
    pinning = cfg.J is not None
    pts = variance_growth(cfg["estimators"]["N_list"], cfg.family(), pinning, cfg.sampler_params(), run.threads)
    run.csv("deloc.csv", ["N", "variance", "se", "source"], [(p.N, p.variance, p.se, p.source) for p in pts])


COMMANDS = {
    "sample": cmd_sample,
    "covariance": cmd_covariance,
    "mass": cmd_mass,
    "mass-scan": cmd_mass_scan,
    "dryset-stats": cmd_dryset_stats,
    "hs-verify": cmd_hs_verify,
    "hit-bound": cmd_hit_bound,
    "enumerate": cmd_enumerate,
    "tuple-check": cmd_tuple_check,
    "deloc-scan": cmd_deloc_scan,
}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pinfield", description="Pinned gradient field experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML experiment file (defaults apply when omitted)")
        p.add_argument("--out", type=Path, help="output directory (overrides outputs.directory)")
        p.add_argument("--seed", type=_u64, help="base seed, overrides mcmc.seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--dump-trajectories", action="store_true", help="write hswalk trajectories as JSON lines")
    p = sub.add_parser("replay", help="rerun a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int, default=1)
    return parser


def execute(name: str, cfg: ExperimentConfig, out: Path, threads: int = 1, dump: bool = False) -> Run:
    run = Run(name, cfg, out, threads, dump)
    COMMANDS[name](run)
    with open(out / "manifest.json", "w") as fh:
        json.dump(run.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        if args.command == "replay":
            with open(args.manifest) as fh:
                man = json.load(fh)
            name = man["subcommand"]
            if name not in COMMANDS:
                raise ConfigError(f"manifest names unknown subcommand '{name}'")
            cfg = ExperimentConfig.from_dict(man["config"])
            dump = bool(man.get("dump_trajectories", False))
            out = args.out
        else:
            name = args.command
            cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            dump = args.dump_trajectories
            out = args.out or Path(os.environ.get("PINFIELD_OUT", cfg["outputs"]["directory"]))
    except (ConfigError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        run = execute(name, cfg, out, args.threads, dump)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for w in run.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
