"""``baryshield`` command line: distances, barycenters, the toy defense
pipeline, MI diagnostics and the Gaussian demo."""
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import __version__
from ..defense.attacks import AttackConfig, attack_fgsm
from ..defense.info_metrics import load_predictions, mi_pairwise, mi_param_output, save_predictions
from ..defense.marginals import RESCALE_MODES, BarycenterParams, barycentric_transform
from ..defense.model import MlpModel, load_checkpoint, save_checkpoint
from ..defense.pipeline import (
    LabeledDataset,
    TrainConfig,
    barycentric_dataset,
    evaluate,
    export_features,
    finetune_barycentric,
    load_dataset,
    make_toy_digits,
    save_dataset,
    train_adversarial,
)
from ..transport.beckman import SolverConfig, solve_distance
from ..utils.compatibility import BaryShieldError, DatasetError, InputError, ensure_compatible, handle_error
from ..utils.config import load_config, merge_settings
from ..utils.image_io import read_image, write_image
from ..utils.performance import ThreadPoolManager

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DEFAULT_INTENSITY_SCALE = 255.0

DEFAULTS: Dict[str, Any] = {
    "theta": 4.0,
    "alpha": 1.0,
    "beta": 1.0,
    "rho": 0.5,
    "tau1": 0.1,
    "tau2": 1.0,
    "iters": 200,
    "trace_every": 0,
    "enforce_stepsize": False,
    "intensity_scale": None,
    "rescale": "mass",
    "seed": 0,
    "workers": 1,
    "eps": 8.0 / 255.0,
    "steps": 10,
    "epochs": 5,
    "lr": 0.05,
    "finetune_lr": 1e-4,
    "momentum": 0.9,
    "batch_size": 32,
    "hidden": 32,
}

EVAL_ATTACKS = (
    ("fgsm", lambda eps: AttackConfig.fgsm(eps)),
    ("pgd10", lambda eps: AttackConfig.pgd(eps, 10)),
    ("pgd20", lambda eps: AttackConfig.pgd(eps, 20)),
)


def _solver_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("solver")
    group.add_argument("--theta", type=float, help="rotation angle in degrees (default: 4)")
    group.add_argument("--alpha", type=float, help="slack weight (default: 1)")
    group.add_argument("--beta", type=float, help="barycenter weight (default: 1)")
    group.add_argument("--rho", type=float, help="proximal weight (default: 0.5)")
    group.add_argument("--tau1", type=float, help="primal step (default: 0.1)")
    group.add_argument("--tau2", type=float, help="dual step (default: 1)")
    group.add_argument("--iters", type=int, help="primal-dual sweeps (default: 200)")
    group.add_argument("--intensity-scale", dest="intensity_scale", type=float,
                       help="solver units per unit intensity (default: 255; defend sizes it to --eps)")
    group.add_argument("--rescale", choices=RESCALE_MODES, help="map back by channel mass or intensity (default: mass)")
    group.add_argument("--enforce-stepsize", dest="enforce_stepsize", action="store_const", const=True,
                       help="fail instead of warning when the step-size condition is violated")
    group.add_argument("--seed", type=int, help="random seed (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="baryshield", description="Beckman barycenters as an adversarial defense")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--config", help="key = value settings file (flags take precedence)")
    parser.add_argument("--workers", type=int, help="threads for per-channel and per-sample solves (default: 1)")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("distance", help="Beckman distance between two grayscale images")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--trace", help="write (iteration, objective, residual) rows to this CSV")
    p.add_argument("--trace-every", dest="trace_every", type=int, help="trace sampling interval (default: 1 with --trace)")
    p.add_argument("--tau1", type=float, help="primal step (default: 0.1)")
    p.add_argument("--tau2", type=float, help="dual step (default: 1)")
    p.add_argument("--iters", type=int, help="primal-dual sweeps (default: 200)")
    p.set_defaults(func=cmd_distance)

    p = commands.add_parser("barycenter", help="barycentric transform of a PGM/PPM image")
    p.add_argument("input")
    p.add_argument("output")
    _solver_flags(p)
    p.set_defaults(func=cmd_barycenter)

    p = commands.add_parser("defend", help="toy defense pipeline")
    stages = p.add_subparsers(dest="stage", required=True)

    s = stages.add_parser("toy-data", help="write the synthetic two-class digit set")
    s.add_argument("--out", required=True, help="dataset directory (train/ and test/ are created)")
    s.add_argument("--n-train", dest="n_train", type=int, default=512)
    s.add_argument("--n-test", dest="n_test", type=int, default=256)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_toy_data)

    s = stages.add_parser("pretrain", help="PGD adversarial training")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True, help="checkpoint to write")
    s.add_argument("--epochs", type=int, help="training epochs (default: 5)")
    s.add_argument("--eps", type=float, help="l-inf budget (default: 8/255)")
    s.add_argument("--steps", type=int, help="PGD steps (default: 10)")
    s.add_argument("--lr", type=float, help="learning rate (default: 0.05)")
    s.add_argument("--hidden", type=int, help="hidden width (default: 32)")
    s.add_argument("--limit", type=int, help="use only the first N samples")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = stages.add_parser("finetune", help="one epoch of SGD on barycenters of clean samples")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    s.add_argument("--out", required=True, help="fine-tuned checkpoint to write")
    s.add_argument("--eps", type=float, help="attack budget the barycenter floor is sized to (default: 8/255)")
    s.add_argument("--limit", type=int, help="use only the first N samples")
    _solver_flags(s)
    s.set_defaults(func=cmd_finetune)

    s = stages.add_parser("eval", help="clean / FGSM / PGD-10 / PGD-20 accuracy report")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--eps", type=float, help="l-inf budget (default: 8/255)")
    s.add_argument("--barycentric", action="store_true", help="also report barycentric inference")
    s.add_argument("--limit", type=int, help="use only the first N samples")
    _solver_flags(s)
    s.set_defaults(func=cmd_eval)

    p = commands.add_parser("mi", help="mutual information of prediction CSVs")
    p.add_argument("predictions", nargs="+", help="one CSV (surrogate) or two CSVs (pairwise)")
    p.set_defaults(func=cmd_mi)

    p = commands.add_parser("demo-gaussian", help="barycenters of a clean, noisy and adversarial Gaussian")
    p.add_argument("--noise", choices=("none", "uniform", "fgsm"), default="uniform", help="column to print")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--amplitude", type=float, default=0.2, help="uniform noise amplitude")
    p.add_argument("--fgsm-eps", dest="fgsm_eps", type=float, default=0.1, help="demo FGSM budget")
    _solver_flags(p)
    p.set_defaults(func=cmd_demo_gaussian)
    return parser


def resolve_settings(args: argparse.Namespace) -> Dict[str, Any]:
    file_settings = load_config(args.config, DEFAULTS.keys()) if args.config else None
    flags = {key: getattr(args, key, None) for key in DEFAULTS}
    return merge_settings(DEFAULTS, file_settings, flags)


def _solver_config(s: Dict[str, Any], **overrides) -> SolverConfig:
    return SolverConfig(
        tau1=s["tau1"], tau2=s["tau2"], iterations=s["iters"], enforce_stepsize=s["enforce_stepsize"], **overrides,
    )


def _params(s: Dict[str, Any], budget: Optional[float] = None) -> BarycenterParams:
    """Barycenter settings; with no explicit scale, a positive budget sizes the floor"""
    common = dict(theta=s["theta"], alpha=s["alpha"], beta=s["beta"], rho=s["rho"], rescale=s["rescale"])
    if s["intensity_scale"] is None:
        if budget:
            return BarycenterParams.for_budget(budget, **common)
        return BarycenterParams(intensity_scale=DEFAULT_INTENSITY_SCALE, **common)
    return BarycenterParams(intensity_scale=s["intensity_scale"], **common)


def _output_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"{path}: cannot create directory ({e.strerror})") from e


def _write_table(path: str, rows: List[Tuple], header: str) -> None:
    """Write string rows as CSV under a one-line header"""
    data = np.array(rows, dtype=object).reshape(len(rows), len(header.split(",")))
    try:
        np.savetxt(path, data, fmt="%s", delimiter=",", header=header, comments="")
    except OSError as e:
        raise DatasetError(f"{path}: cannot write table ({e.strerror})") from e


def _grayscale(path: str) -> np.ndarray:
    img = read_image(path)
    if img.ndim != 2:
        raise InputError(f"{path}: expected a grayscale (P5) image")
    return img


def cmd_distance(args, s) -> int:
    mu1, mu2 = _grayscale(args.first), _grayscale(args.second)
    trace_every = s["trace_every"] or (1 if args.trace else 0)
    value, _, trace = solve_distance(mu1, mu2, _solver_config(s, trace_every=trace_every))
    print(f"{value:.10g}")
    if args.trace:
        trace.write_csv(args.trace)
        logger.info("Wrote %d trace rows to %s", len(trace.records), args.trace)
    return 0


def cmd_barycenter(args, s) -> int:
    img = read_image(args.input)
    with ThreadPoolManager(s["workers"]) as pool:
        out = barycentric_transform(img, _params(s), _solver_config(s), pool=pool)
    write_image(out, args.output)
    logger.info("Wrote barycenter %s", args.output)
    return 0


def cmd_toy_data(args, s) -> int:
    seed = s["seed"]
    save_dataset(make_toy_digits(args.n_train, seed), os.path.join(args.out, "train"))
    save_dataset(make_toy_digits(args.n_test, seed + 1), os.path.join(args.out, "test"))
    return 0


def _load_split(data: str, split: str, limit: Optional[int]):
    dataset = load_dataset(os.path.join(data, split))
    if limit is not None:
        dataset = dataset.subset(slice(0, limit))
    if len(dataset) == 0:
        raise InputError(f"{os.path.join(data, split)}: dataset is empty")
    return dataset


def cmd_pretrain(args, s) -> int:
    dataset = _load_split(args.data, "train", args.limit)
    n_classes = max(2, int(dataset.labels.max()) + 1)
    model = MlpModel((dataset.images[0].size, s["hidden"], n_classes), seed=s["seed"])
    config = TrainConfig(
        epochs=s["epochs"], lr=s["lr"], momentum=s["momentum"], batch_size=s["batch_size"], seed=s["seed"],
        attack=AttackConfig.pgd(s["eps"], s["steps"]),
    )
    model, logs = train_adversarial(dataset, model, config)
    for log in logs:
        print(f"epoch {log.epoch} loss {log.loss:.4f} clean {log.clean_accuracy:.4f} "
              f"adversarial {log.adversarial_accuracy:.4f}")
    save_checkpoint(model, args.checkpoint)
    return 0


def cmd_finetune(args, s) -> int:
    dataset = _load_split(args.data, "train", args.limit)
    model = load_checkpoint(args.checkpoint)
    config = TrainConfig(epochs=1, lr=s["finetune_lr"], momentum=s["momentum"], batch_size=s["batch_size"],
                         seed=s["seed"])
    model, logs = finetune_barycentric(model, dataset, config, _params(s, s["eps"]), _solver_config(s), s["workers"])
    steps = sum(log.steps for log in logs)
    print(f"finetune steps {steps}")
    save_checkpoint(model, args.out)
    return 0


def cmd_eval(args, s) -> int:
    dataset = _load_split(args.data, "test", args.limit)
    model = load_checkpoint(args.checkpoint)
    _output_dir(args.out)
    params, solver = _params(s, s["eps"]), _solver_config(s)

    attacks: List = [("clean", None)] + [(name, make(s["eps"])) for name, make in EVAL_ATTACKS]
    modes = (False, True) if args.barycentric else (False,)
    reports = {}
    for bary in modes:
        for name, attack in attacks:
            report = evaluate(model, dataset, attack, bary, params, solver, seed=s["seed"], workers=s["workers"])
            stream = f"{name}{'_bary' if bary else ''}"
            reports[stream] = report
            save_predictions(report.predictions, os.path.join(args.out, f"predictions_{stream}.csv"))

    rows = []
    for stream, report in reports.items():
        reference = reports["clean_bary" if stream.endswith("_bary") else "clean"]
        surrogate = mi_param_output(report.predictions)
        pairwise = mi_pairwise(reference.predictions, report.predictions)
        rows.append((stream, f"{report.accuracy:.6f}", f"{surrogate:.9g}", f"{pairwise:.9g}"))
        print(f"{stream} accuracy {report.accuracy:.4f} mi_surrogate {surrogate:.6g} mi_with_clean {pairwise:.6g}")
    _write_table(os.path.join(args.out, "report.csv"), rows, "stream,accuracy,mi_surrogate,mi_with_clean")

    export_features(model, dataset, os.path.join(args.out, "features_clean.csv"))
    fgsm = attack_fgsm(model, dataset.images, dataset.labels, AttackConfig.fgsm(s["eps"]))
    export_features(model, dataset, os.path.join(args.out, "features_fgsm.csv"), images=fgsm)
    if args.barycentric:
        fgsm_bary = barycentric_dataset(LabeledDataset(fgsm, dataset.labels), params, solver, s["workers"])
        export_features(model, fgsm_bary, os.path.join(args.out, "features_fgsm_bary.csv"))
    return 0


def cmd_mi(args, s) -> int:
    if len(args.predictions) > 2:
        raise InputError(f"mi takes one or two prediction files, got {len(args.predictions)}")
    preds = [load_predictions(path) for path in args.predictions]
    if len(preds) == 1:
        print(f"mi_param_output (surrogate) {mi_param_output(preds[0]):.10g}")
    else:
        print(f"mi_pairwise {mi_pairwise(preds[0], preds[1]):.10g}")
    return 0


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images"""
    mse = float(np.mean((np.asarray(image) - np.asarray(reference)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_image(size: int = 32, sigma: float = 4.0) -> np.ndarray:
    center = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-((yy - center) ** 2 + (xx - center) ** 2) / (2.0 * sigma ** 2))


def cmd_demo_gaussian(args, s) -> int:
    clean = gaussian_image(args.size, args.sigma)
    rng = np.random.default_rng(s["seed"])
    noisy = np.clip(clean + rng.uniform(-args.amplitude, args.amplitude, size=clean.shape), 0.0, 1.0)

    model = MlpModel((clean.size, DEFAULTS["hidden"], 2), seed=s["seed"])
    probs, _ = model.predict(clean[np.newaxis])
    label = int(np.argmax(probs[0]))
    adversarial = attack_fgsm(model, clean[np.newaxis], [label], AttackConfig.fgsm(args.fgsm_eps))[0]

    _output_dir(args.out)
    params, solver = _params(s), _solver_config(s)
    columns = (("none", "clean", clean), ("uniform", "noisy", noisy), ("fgsm", "adversarial", adversarial))
    rows = []
    with ThreadPoolManager(s["workers"]) as pool:
        for noise, name, image in columns:
            bary = barycentric_transform(image, params, solver, pool=pool)
            write_image(image, os.path.join(args.out, f"{name}.pgm"))
            write_image(bary, os.path.join(args.out, f"{name}_barycenter.pgm"))
            rows.append((noise, psnr(image, clean), psnr(bary, clean)))

    _write_table(
        os.path.join(args.out, "psnr.csv"),
        [(n, f"{a:.6f}", f"{b:.6f}") for n, a, b in rows],
        "noise,psnr_input,psnr_barycenter",
    )
    for noise, before, after in rows:
        if noise == args.noise:
            print(f"{noise} psnr input {before:.4f} barycenter {after:.4f}")
    return 0


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(level)
    logging.captureWarnings(True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        ensure_compatible()
        settings = resolve_settings(args)
        return args.func(args, settings)
    except BaryShieldError as e:
        handle_error(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
