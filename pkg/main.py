"""
Command-line entry point for penalized matrix-normal mixture clustering

    python main.py simulate --scenario II --out data/ii --seed 1
    python main.py fit --data data/ii --k 2 --penalty l1 --lambda 1.5
    python main.py select --data data/ii --kmin 2 --kmax 4 --penalty l1 --lambda 0.5 1 1.5
    python main.py eval data/ii/labels_pred.csv data/ii/labels.csv
    python main.py baseline --data data/ii --k 2
    python main.py compare --scenario III --penalty l1 --lambda 1.5 --replicates 20
"""
import argparse
import shlex
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from config import get_settings
from error_logger import log_error
from errors import NumericFailure, ValidationError
from evalgen import ScenarioName, ScenarioSpec, adjusted_rand_index, clustering_accuracy, generate_scenario, kmeans_vectorized
from experiments import calibrate_amplitude, comparison_study, comparison_to_csv
from flipflop import FlipFlopConfig
from logger import get_logger, shift_verbosity
from matnorm import derive_seeds
from mixture import FitConfig, InitMethod, PenaltyKind, PenaltySpec, fit_em
from modelsel import CvplConfig, cvpl_grid, grid_to_csv
from storage import MODEL_FILE, ModelDocument, read_dataset, read_labels, save_model, write_dataset, write_labels

logger = get_logger(__name__)

load_dotenv()

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERIC = 4

EXIT_CODES_HELP = """exit codes:
  0  success
  2  usage or validation error (bad flags, malformed data, unreadable or unwritable files)
  3  fit did not converge (outputs are still written)
  4  numeric failure (diagnostic names the component and iteration)
"""


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _print_scores(pred, truth):
    print(f"ari={_fmt(adjusted_rand_index(pred, truth))} "
          f"accuracy={_fmt(clustering_accuracy(pred, truth))}")


def _fit_config(args) -> FitConfig:
    settings = get_settings()
    return FitConfig(
        max_iter=args.max_iter or settings.max_iter,
        mean_tol=args.tol,
        eig_floor=settings.eig_floor,
        eig_cap=settings.eig_cap,
        inner_flipflop=FlipFlopConfig(tolerance=settings.inner_tol, max_iter=settings.inner_max_iter),
        init=InitMethod(args.init),
        seed=args.seed,
        n_starts=args.starts or settings.n_starts,
    )


def _scenario(args) -> ScenarioSpec:
    return ScenarioSpec.from_name(
        args.scenario, n=args.n, r=args.r, p=args.p, rho=args.rho,
        mean_amplitude=args.amplitude, seed=args.seed,
    )


def cmd_simulate(args) -> int:
    """Write one or more synthetic datasets"""
    spec = _scenario(args)
    out = Path(args.out)
    if args.replicates == 1:
        targets = [(out, spec.seed)]
    else:
        seeds = derive_seeds(spec.seed, args.replicates)
        targets = [(out / f"replicate-{i:03d}", seed) for i, seed in enumerate(seeds)]

    for target, seed in targets:
        spec.seed = seed
        data = generate_scenario(spec)
        manifest = write_dataset(target, data.stack, data.labels)
        print(f"{target}: n={manifest.n} r={manifest.r} p={manifest.p} checksum={manifest.checksum}")
    return EXIT_OK


def cmd_fit(args) -> int:
    """Fit the penalized mixture and write model.json + labels_pred.csv"""
    stack, labels, _ = read_dataset(args.data)
    penalty = PenaltySpec(PenaltyKind(args.penalty), args.lam)
    report = fit_em(stack, args.k, penalty, _fit_config(args))

    out = Path(args.out or args.data)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / MODEL_FILE, ModelDocument.from_report(report))
    write_labels(out / "labels_pred.csv", report.hard_labels)

    print(f"iterations={report.iterations} converged={str(report.converged).lower()} "
          f"objective={report.final_objective!r}")
    if labels is not None:
        _print_scores(report.hard_labels, labels)
    if not report.converged:
        logger.warning("Model written, but EM did not converge")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_select(args) -> int:
    """CVPL table over k_min..k_max for each lambda"""
    if args.kmin > args.kmax:
        raise ValidationError(f"--kmin {args.kmin} exceeds --kmax {args.kmax}")
    stack, _, _ = read_dataset(args.data)
    sel = CvplConfig(
        k_values=range(args.kmin, args.kmax + 1),
        folds=None if args.holdout is not None else args.folds,
        holdout=args.holdout,
        replicates=args.replicates,
        seed=args.seed,
    )
    penalties = [PenaltySpec(PenaltyKind(args.penalty), lam) for lam in args.lam]
    tables = cvpl_grid(stack, penalties, sel, _fit_config(args))
    text = grid_to_csv(tables)

    out = Path(args.out or args.data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cvpl.csv").write_bytes(text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    """ARI and accuracy of predicted vs true labels"""
    _print_scores(read_labels(args.pred), read_labels(args.truth))
    return EXIT_OK


def cmd_baseline(args) -> int:
    """k-means on the vectorized matrices"""
    stack, labels, _ = read_dataset(args.data)
    pred = kmeans_vectorized(stack, args.k, seed=args.seed, max_iter=args.max_iter or 100)
    out = Path(args.out or args.data)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels_kmeans.csv", pred)
    if labels is not None:
        _print_scores(pred, labels)
    return EXIT_OK


def cmd_compare(args) -> int:
    """Replicate study: penalized mixture vs k-means"""
    spec = _scenario(args)
    if args.calibrate:
        amplitude, ari = calibrate_amplitude(spec, args.calibrate, replicates=args.replicates)
        logger.info(f"Calibrated amplitude {amplitude:g} (k-means ARI {ari:.3f})")
        spec.mean_amplitude = amplitude
    cfg = _fit_config(args)
    results = [comparison_study(spec, PenaltySpec(PenaltyKind(args.penalty), lam),
                                replicates=args.replicates, k=args.k, cfg=cfg)
               for lam in args.lam]
    text = comparison_to_csv(results)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def _add_fit_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--penalty", choices=[k.value for k in PenaltyKind], default="none")
    parser.add_argument("--max-iter", type=int, default=None, help="EM iterations (env PMMN_MAX_ITER)")
    parser.add_argument("--tol", type=float, default=None, help="mean-change tolerance (default 1e-4*sqrt(r*p))")
    parser.add_argument("--starts", type=int, default=None, help="EM restarts (env PMMN_STARTS)")
    parser.add_argument("--init", choices=[m.value for m in InitMethod], default="kmeans")
    parser.add_argument("--seed", type=int, default=0)


def _add_scenario_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--scenario", required=True, choices=[s.value for s in ScenarioName])
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--r", type=int, default=None)
    parser.add_argument("--p", type=int, default=None)
    parser.add_argument("--rho", type=float, default=None)
    parser.add_argument("--amplitude", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmmn",
        description="Penalized mixture-of-matrix-normal clustering",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="less logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scenario dataset")
    _add_scenario_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=1, help="datasets to write (1 writes straight into --out)")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", help="fit the penalized mixture")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--out", default=None, help="output directory (default: the data directory)")
    _add_fit_flags(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("select", help="choose k by cross-validated penalized likelihood")
    p.add_argument("--data", required=True)
    p.add_argument("--kmin", type=int, default=1)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[0.0])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--holdout", type=float, default=None, help="holdout fraction instead of folds")
    p.add_argument("--replicates", type=int, default=20, help="CV re-splits per candidate")
    p.add_argument("--out", default=None)
    _add_fit_flags(p)
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("eval", help="ARI and accuracy between two label files")
    p.add_argument("pred")
    p.add_argument("truth")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("baseline", help="k-means on vectorized matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser("compare", help="replicate study against the k-means baseline")
    _add_scenario_flags(p)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[0.0])
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--calibrate", type=float, nargs="+", default=None,
                   help="amplitude grid; the first whose k-means ARI is in [0.4, 0.65] is used")
    p.add_argument("--out", default=None)
    _add_fit_flags(p)
    p.set_defaults(handler=cmd_compare)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.verbose or args.quiet:
        shift_verbosity(args.verbose - args.quiet)

    try:
        return args.handler(args)
    except (ValidationError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        log_error(
            error_type="Numeric Failure",
            error_message=str(e),
            context={
                "command": args.command,
                "data": getattr(args, "data", None),
                "k": getattr(args, "k", None),
                "penalty": getattr(args, "penalty", None),
                "component": e.component,
                "iteration": e.iteration,
                "command_line": shlex.join(["python", "main.py", *(sys.argv[1:] if argv is None else argv)]),
            },
            exception=e,
        )
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
