"""``mash`` command line: fit, sample, eval, info.

Exit codes: 0 success (for ``fit``: converged), 2 ``fit`` stopped at
--max-iters without converging (model still written), 1 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io as mio
from . import metrics, sampler
from .fitting import FitConfig, fit
from .model import mask_angle, param_count
from .orientation import orient_samples

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("mash")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MASH_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mash", description="Fit and use MASH shape representations.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a MASH model to a point cloud")
    f.add_argument("--input", required=True)
    f.add_argument("--format", choices=["ply", "obj", "xyz"])
    f.add_argument("--anchors", type=_positive, default=400)
    f.add_argument("--sh-degree", type=int, default=2, choices=range(0, 7), metavar="L")
    f.add_argument("--mask-degree", type=int, default=3, metavar="K")
    f.add_argument("--ndir", type=int, default=400)
    f.add_argument("--max-iters", type=_positive, default=2000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threads", type=_positive)
    f.add_argument("--out", required=True)
    f.add_argument("--report")

    s = sub.add_parser("sample", help="export surface samples of a model")
    s.add_argument("--model", required=True)
    s.add_argument("--ndir", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--normals", action="store_true")
    s.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="reconstruction metrics between two clouds")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, default=metrics.DEFAULT_TAU)
    e.add_argument("--out")
    e.add_argument("--threads", type=_positive)

    i = sub.add_parser("info", help="describe a .mash file")
    i.add_argument("--model", required=True)
    i.add_argument("--json", action="store_true")
    return p


def cmd_fit(args) -> int:
    if args.mask_degree < 0 or args.ndir < 16:
        log.error("--mask-degree must be >= 0 and --ndir >= 16")
        return EXIT_ERROR
    points = mio.load_cloud(args.input, args.format)
    if len(points) < args.anchors:
        log.error("input has %d points, fewer than --anchors %d", len(points), args.anchors)
        return EXIT_ERROR
    Q, tr = mio.normalize(points)
    cfg = FitConfig(M=args.anchors, L=args.sh_degree, K=args.mask_degree, n_dir=args.ndir,
                    max_iters=args.max_iters, seed=args.seed, workers=_threads(args.threads))
    model, report = fit(Q, cfg)
    mio.save_mash(args.out, tr.invert_model(model))
    if args.report:
        with open(args.report, "w", newline="") as fh:
            report.write_csv(fh)
    last = report.records[-1]
    log.info("%s after %d iterations: L_f=%.6g L_c=%.6g L_b=%.6g",
             "converged" if report.converged else "stopped", len(report.records),
             last.L_f, last.L_c, last.L_b)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_sample(args) -> int:
    model = mio.load_mash(args.model)
    if args.ndir is not None:
        if args.ndir < 16:
            log.error("--ndir must be >= 16")
            return EXIT_ERROR
        model.n_dir = args.ndir
    samples = sampler.sample_model(model)
    if args.normals:
        oriented = orient_samples(model, samples, rng=np.random.default_rng(args.seed))
        mio.export_oriented_ply(oriented.points, oriented.normals, args.out)
    else:
        mio.write_ply(args.out, samples.points)
    log.info("wrote %d samples to %s", len(samples.points), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, pred_n = mio.load_cloud(args.pred, with_normals=True)
    gt, gt_n = mio.load_cloud(args.gt, with_normals=True)
    result = metrics.evaluate(pred, gt, args.tau, pred_n, gt_n, workers=_threads(args.threads))
    text = json.dumps(result, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def model_summary(model) -> dict:
    alpha = mask_angle(model.mask_coeffs[:, None, :], np.linspace(0, 2 * np.pi, 64, endpoint=False)[None, :])
    angles = np.linalg.norm(model.rotvecs, axis=1)

    def stats(x):
        return {"min": float(np.min(x)), "mean": float(np.mean(x)), "max": float(np.max(x))}

    return {
        "M": model.M, "K": model.K, "L": model.L, "n_dir": model.n_dir,
        "N": param_count(model.M, model.K, model.L),
        "anchors": {
            "position_min": model.positions.min(axis=0).tolist(),
            "position_max": model.positions.max(axis=0).tolist(),
            "rotation_angle": stats(angles),
            "c00": stats(model.sh_coeffs[:, 0]),
            "mask_angle_mean": stats(alpha.mean(axis=1)),
            "rays_in_mask": stats(sampler.select_rays(model).counts(model.M)),
        },
    }


def cmd_info(args) -> int:
    summary = model_summary(mio.load_mash(args.model))
    if args.json:
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    print(f"M={summary['M']} K={summary['K']} L={summary['L']} n_dir={summary['n_dir']} N={summary['N']}")
    for key, val in summary["anchors"].items():
        print(f"  {key}: {val}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "sample": cmd_sample, "eval": cmd_eval, "info": cmd_info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        print(f"mash: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
