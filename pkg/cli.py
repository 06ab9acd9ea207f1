"""
命令行入口 (Command-line entry point)

Subcommands:
1. calibrate      - call surface CSV -> local-vol CSV + clamp report
2. roundtrip      - calibrate, evolve the forward equation, reprice
3. gallery        - build gallery ensembles and run the distinguishing tests
4. verify-peacock - convex-order check of a measure family
5. couple         - martingale coupling LP between two measures

Every run writes manifest.json (argv, config and its hash, seed, package
versions, input hashes) next to its reports. Exit codes: 0 success,
1 usage error, 2 validation failure, 3 numerical or infeasibility failure.
"""
import argparse
import hashlib
import logging
import platform
import sys
from importlib import metadata
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional

import dupire
import forward_pde
import gallery
import martingale_transport
from call_surface import validate_surface
from config_manager import ConfigManager
from core.exceptions import PeacockLabError, ValidationError
from core.io_schema import CONVENTIONS, FpSolveConfig, GalleryProcessSpec, config_from_dict
from logger_setup import LoggerSetup
from mc_engine import GENERATOR_ID, martingale_report, resolve_workers
from measures import verify_peacock
from path_manager import PathManager
from storage_manager import StorageManager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

PACKAGES = ("numpy", "pandas", "scipy", "statsmodels")


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, Optional[str]]:
    versions = {"python": platform.python_version()}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


# ------------------------------ Commands ---------------------------------- #

def cmd_calibrate(args, config: Dict[str, Any], storage: StorageManager) -> int:
    """
    校准 (Calibrate)

    Validates the surface, inverts it to local vol and writes
    local_vol.csv (+ sidecar and clamps) and calibrate_report.json.
    """
    surface = StorageManager.load_surface(args.surface, config.get("convention"))
    report = validate_surface(surface)
    if not report.passed:
        raise ValidationError(f"surface fails static checks: {', '.join(report.kinds())}",
                              violations=report.to_dict()["violations"])
    dupire_cfg = dupire.DupireConfig.from_dict(config)
    lv = dupire.calibrate(surface, dupire_cfg)
    residual = dupire.implied_diffusion_check(surface, lv, dupire_cfg)
    storage.save_local_vol(lv, "local_vol.csv")
    storage.write_json("calibrate_report.json", {
        "convention": lv.convention,
        "shape": list(lv.sigma.shape),
        "sigma_range": [float(lv.sigma.min()), float(lv.sigma.max())],
        "sigma_min": lv.sigma_min,
        "sigma_max": lv.sigma_max,
        "clamped_nodes": len(lv.clamp_report),
        "clamps": [[c.i, c.j, c.reason] for c in lv.clamp_report],
        "diffusion_residual": residual.to_dict(),
    })
    logger.info(f"Calibrated {lv.sigma.shape[0]}x{lv.sigma.shape[1]} local vol, "
                f"{len(lv.clamp_report)} clamped nodes")
    return EXIT_OK


def cmd_roundtrip(args, config: Dict[str, Any], storage: StorageManager) -> int:
    """Nonzero exit when the max relative repricing error exceeds the threshold"""
    surface = StorageManager.load_surface(args.surface, config.get("convention"))
    result = forward_pde.roundtrip(surface, FpSolveConfig.from_dict(config),
                                   dupire.DupireConfig.from_dict(config))
    threshold = float(config["roundtrip_threshold"])
    passed = result.reprice_error_max_rel <= threshold
    storage.save_local_vol(result.local_vol, "local_vol.csv")
    storage.save_grid("repriced.csv", surface.times, surface.strikes, result.repriced)
    storage.write_json("roundtrip_report.json", {**result.to_dict(), "threshold": threshold, "passed": passed})
    if not passed:
        logger.error(f"Round-trip error {result.reprice_error_max_rel:.3e} above threshold {threshold:g}")
        return EXIT_NUMERICAL
    return EXIT_OK


def _gallery_specs(spec: Dict[str, Any], config: Dict[str, Any]) -> Dict[str, GalleryProcessSpec]:
    entries = spec.get("processes")
    if not entries:
        raise ValidationError("gallery spec must list at least one process")
    specs = {}
    for index, entry in enumerate(entries):
        if "kind" not in entry:
            raise ValidationError(f"process #{index} has no kind")
        entry = dict(entry)
        entry.setdefault("seed", int(config["seed"]) + index)
        if config.get("paths_override") is not None:
            entry["n_paths"] = config["paths_override"]
        entry.setdefault("n_paths", config["n_paths"])
        name = entry.pop("name", entry["kind"])
        if name in specs:
            raise ValidationError(f"duplicate process name {name!r}")
        specs[name] = config_from_dict(GalleryProcessSpec, entry)
    return specs


def cmd_gallery(args, config: Dict[str, Any], storage: StorageManager) -> int:
    """
    示例库 (Gallery)

    Spec file layout:
        {"processes": [{"name": ..., "kind": ..., "n_paths": ..., "seed": ...}, ...],
         "distinguish": [["easy", "excursion"]],
         "kernel_test": {"s": 0.5, "t": 1.0, "bins": 20},
         "regularity": {"t": 0.5, "T": 1.0, "bins": 20, "center": 1.0},
         "save_ensembles": false}
    Without "distinguish" every easy/excursion pair is compared.
    """
    spec = StorageManager.read_json(args.spec)
    specs = _gallery_specs(spec, config)
    workers = resolve_workers(config.get("threads"))
    alpha = float(config["alpha"])
    kernel_test = {"s": 0.5, "t": 1.0, "bins": config["kernel_bins"], **spec.get("kernel_test", {})}
    regularity = {"t": 0.5, "T": 1.0, "bins": config["kernel_bins"], "center": 1.0, **spec.get("regularity", {})}

    ensembles, reports = {}, {}
    for name, process in specs.items():
        ens = gallery.build(process, max_workers=workers)
        ensembles[name] = ens
        if spec.get("save_ensembles", False):
            storage.save_ensemble(ens, f"ensembles/{name}")
        reports[name] = {
            "kind": process.kind,
            "seed": process.seed,
            "n_paths": process.n_paths,
            "meta": ens.meta,
            "martingale": martingale_report(ens).to_dict(),
            "kernel_monotonicity": gallery.kernel_monotonicity_test(
                ens, kernel_test["s"], kernel_test["t"], kernel_test["bins"], config["min_count"], alpha).to_dict(),
            "regularity": gallery.regularity_preservation_test(
                ens, regularity["t"], regularity["T"], regularity["bins"], config["min_count"], alpha,
                regularity["center"]).to_dict(),
        }

    pairs = spec.get("distinguish")
    if pairs is None:
        pairs = [[a, b] for a, b in combinations(specs, 2)
                 if {specs[a].kind, specs[b].kind} == {"easy", "excursion"}]
    distinguishers = []
    for a, b in pairs:
        if a not in ensembles or b not in ensembles:
            raise ValidationError(f"distinguish pair {a!r}/{b!r} names an unknown process")
        result = gallery.joint_law_distinguisher(ensembles[a], ensembles[b], alpha=alpha)
        distinguishers.append({"pair": [a, b], **result.to_dict()})

    storage.write_json("gallery_report.json", {"generator_id": GENERATOR_ID, "processes": reports,
                                               "distinguishers": distinguishers})
    return EXIT_OK


def cmd_verify_peacock(args, config: Dict[str, Any], storage: StorageManager) -> int:
    fam = StorageManager.load_family(args.family)
    verdict = verify_peacock(fam, mean_tol_rel=float(config["mean_tol_rel"]))
    storage.write_json("peacock_report.json", {"n_measures": len(fam), "times": fam.times,
                                               **verdict.to_dict()})
    if not verdict.holds:
        logger.error(f"Not a peacock between t={verdict.times[0]:g} and t={verdict.times[1]:g}: "
                     f"{verdict.reason}")
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_couple(args, config: Dict[str, Any], storage: StorageManager) -> int:
    """
    鞅耦合 (Couple)

    Solves the LP, writes the kernel and its Lipschitz and dominance
    reports. Infeasible pairs surface as InfeasibleError (exit 3).
    """
    mu = StorageManager.load_measure(args.mu)
    nu = StorageManager.load_measure(args.nu)
    cfg = martingale_transport.CouplingConfig.from_dict(config)
    kernel = martingale_transport.solve_martingale_coupling(mu, nu, cfg.objective, cfg)
    storage.save_kernel(kernel, "kernel")
    lipschitz = martingale_transport.lipschitz_kernel_check(kernel, tol=float(config["lipschitz_tol"]))
    dominance = martingale_transport.dominance_equivalence_check(kernel, tol=float(config["lipschitz_tol"]))
    storage.write_json("couple_report.json", {
        "objective": cfg.objective,
        "source_points": kernel.n_source,
        "target_points": int(kernel.target_grid.size),
        "martingale_defect": kernel.martingale_defect(),
        "lipschitz": lipschitz.to_dict(),
        "dominance": dominance.to_dict(),
    })
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "roundtrip": cmd_roundtrip,
    "gallery": cmd_gallery,
    "verify-peacock": cmd_verify_peacock,
    "couple": cmd_couple,
}

INPUT_FLAGS = ("surface", "family", "spec", "mu", "nu", "config")


# ------------------------------ Parser ------------------------------------ #

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="output directory (default: runs/<command> under the data root)")
    common.add_argument("--config", type=Path, help="JSON config merged over the defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap (default: PEACOCK_LAB_THREADS or 4)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="peacock-lab",
                                     description="Peacocks, local volatility and Markov martingale tests")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="call surface -> local volatility")
    p.add_argument("--surface", type=Path, required=True)
    p.add_argument("--convention", choices=CONVENTIONS)

    p = sub.add_parser("roundtrip", parents=[common], help="calibrate, evolve and reprice")
    p.add_argument("--surface", type=Path, required=True)
    p.add_argument("--convention", choices=CONVENTIONS)
    p.add_argument("--threshold", type=float, help="max relative repricing error")

    p = sub.add_parser("gallery", parents=[common], help="gallery ensembles and distinguishers")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--paths", type=int, help="override n_paths of every process")

    p = sub.add_parser("verify-peacock", parents=[common], help="convex-order check of a family")
    p.add_argument("--family", type=Path, required=True)

    p = sub.add_parser("couple", parents=[common], help="martingale coupling between two measures")
    p.add_argument("--mu", type=Path, required=True)
    p.add_argument("--nu", type=Path, required=True)
    p.add_argument("--objective", choices=martingale_transport.OBJECTIVES)
    return parser


def resolve_config(args) -> Dict[str, Any]:
    """Config file over defaults, then explicit flags over both"""
    config = ConfigManager.load(args.config)
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "convention": getattr(args, "convention", None),
        "roundtrip_threshold": getattr(args, "threshold", None),
        "objective": getattr(args, "objective", None),
        "paths_override": getattr(args, "paths", None),
    }
    config.update({k: v for k, v in overrides.items() if v is not None})
    return config


def build_manifest(argv: List[str], args, config: Dict[str, Any], exit_code: int) -> Dict[str, Any]:
    inputs = []
    for flag in INPUT_FLAGS:
        path = getattr(args, flag, None)
        if path is not None and Path(path).exists():
            inputs.append({"flag": flag, "path": str(path), "sha256": file_sha256(path)})
    return {
        "command": args.command,
        "argv": argv,
        "config": config,
        "config_hash": ConfigManager.config_hash(config),
        "seed": config["seed"],
        "generator_id": GENERATOR_ID,
        "versions": package_versions(),
        "inputs": inputs,
        "exit_code": exit_code,
    }


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    out = Path(args.out) if args.out else PathManager.get_runs_dir() / args.command
    LoggerSetup.setup_logging(log_dir=out / "logs", level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        config = resolve_config(args)
    except PeacockLabError as e:
        logger.error(f"Config error: {e}")
        return e.exit_code
    storage = StorageManager(out)

    try:
        code = COMMANDS[args.command](args, config, storage)
    except PeacockLabError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e}")
        storage.write_json("error.json", e.to_dict())
        code = e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} crashed: {e}")
        storage.write_json("error.json", {"error": type(e).__name__, "message": str(e)})
        code = EXIT_USAGE

    storage.write_json("manifest.json", build_manifest(argv, args, config, code))
    logger.info(f"{args.command} finished with exit code {code}; outputs in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
