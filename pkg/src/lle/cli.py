"""Command-line entry points.

Subcommands: gen-prior, gen-refs, train, run, eval, sweep. Configurations
are JSON files; arrays travel in the LLEF64 container (see numerics).
"""

from __future__ import annotations

import argparse
import csv as _csv
import sys

import numpy as np

from . import diffusion as dif
from . import extrapolation as lle
from . import harness
from .numerics import RngStream, load_array, save_array


def _cmd_gen_prior(args):
    prior = harness.random_prior(args.dim, args.components, args.seed)
    prior.save(args.out)
    print(f"wrote {args.components}-component dim-{args.dim} prior to {args.out}")


def _cmd_gen_refs(args):
    cfg = harness.load_config(args.config)
    tc = cfg.train_config or lle.TrainConfig()
    if tc.base_seed == 0:
        tc.base_seed = cfg.train_seed
    stream = RngStream(tc.base_seed).child(11)
    refs = lle.generate_references(cfg.prior, cfg.schedule, tc, stream)
    save_array(args.out, refs.shape[0], refs.shape[1], refs)
    print(f"wrote {refs.shape[0]}x{refs.shape[1]} reference samples to {args.out}")


def _cmd_train(args):
    cfg = harness.load_config(args.config)
    coeffs, traces = harness.train_lle(cfg)
    coeffs.save(args.out)
    trace_path = args.out + ".trace.csv"
    with open(trace_path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["timestep", "epoch", "loss"])
        for t in sorted(traces, reverse=True):
            for epoch, val in enumerate(traces[t]):
                w.writerow([t, epoch, f"{val:.12g}"])
    print(f"wrote coefficients to {args.out} (loss trace: {trace_path})")


def _cmd_run(args):
    cfg = harness.load_config(args.config)
    coeffs = lle.LLECoefficients.load(args.coeffs) if args.coeffs else None
    recons, truths = harness.run_experiment(cfg, args.seed, coeffs=coeffs)
    save_array(args.out, recons.shape[0], recons.shape[1], recons)
    truth_path = args.out + ".truth"
    save_array(truth_path, truths.shape[0], truths.shape[1], truths)
    print(f"wrote {recons.shape[0]} reconstructions to {args.out} "
          f"(ground truth: {truth_path})")


def _cmd_eval(args):
    cfg = harness.load_config(args.config)
    _, _, recon = load_array(args.recon)
    _, _, truth = load_array(args.truth)
    oracle_means = None
    if args.oracle:
        truths, ys, op = harness.make_test_batch(cfg)
        oracle_means = np.stack(
            [harness.oracle_posterior(cfg.prior, op, ys[i], cfg.sigma_y)[0]
             for i in range(ys.shape[0])]
        )
    reports = harness.evaluate(recon, truth, cfg, oracle_means)
    text = harness.metrics_csv(reports)
    with open(args.out, "w") as f:
        f.write(text)
    mean_mse = float(np.mean([r.mse for r in reports]))
    print(f"wrote per-sample metrics to {args.out} (mean mse {mean_mse:.6g})")


def _cmd_sweep(args):
    cfg = harness.load_config(args.config)
    steps = [int(s) for s in args.steps.split(",")]
    text = harness.sweep(cfg, steps)
    with open(args.out, "w") as f:
        f.write(text)
    print(f"wrote sweep results for S in {steps} to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lle", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-prior", help="generate a seeded random mixture prior")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--components", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_prior)

    g = sub.add_parser("gen-refs", help="generate DDIM reference samples")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_refs)

    g = sub.add_parser("train", help="train extrapolation coefficients")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_train)

    g = sub.add_parser("run", help="reconstruct the held-out batch")
    g.add_argument("--config", required=True)
    g.add_argument("--coeffs", default=None)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_run)

    g = sub.add_parser("eval", help="score reconstructions against ground truth")
    g.add_argument("--recon", required=True)
    g.add_argument("--truth", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--oracle", action="store_true",
                   help="also report distance to the closed-form posterior mean")
    g.set_defaults(func=_cmd_eval)

    g = sub.add_parser("sweep", help="train + evaluate across step counts")
    g.add_argument("--config", required=True)
    g.add_argument("--steps", required=True, help="comma-separated, e.g. 3,4,5,7,10,15")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
