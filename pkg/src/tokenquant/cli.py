"""Command-line driver: ``tokenquant {gen-model,attribute,quantize,verify}``.

Set ``QIG_LOG`` (e.g. ``DEBUG``/``INFO``) for log output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .attribution import DEFAULT_IG_STEPS, attribution_baseline, qig
from .equalization import equalize_and_quantize
from .gptq import DEFAULT_DAMPING, gptq_quantize, rtn_quantize, weighted_errors, weighted_hessian
from .instances import inject_outlier
from .io import dump_json, load_json, load_tensor, rng_for, save_tensor
from .quantizers import (
    DEFAULT_GROUP_SIZE,
    activation_config,
    dequantize,
    weight_channel_config,
    weight_only_config,
)
from .toyblock import (
    BlockModel,
    DistortionObjective,
    QuantizedBlock,
    QuantizedExecution,
    block_forward,
    sublayer_inputs,
)
from .weighting import DEFAULT_IQR_K, build_sensitivity

logger = logging.getLogger("tokenquant")

METHODS = ("cwe", "gptq", "rtn")


class CLIError(Exception):
    pass


def _configs(args):
    """Weight/activation formats: group-wise asymmetric weights when weight-only,
    per-channel symmetric weights plus per-token activations otherwise."""
    abits = args.abits if args.abits is not None and args.abits < 16 else None
    if abits is None:
        return weight_only_config(args.wbits, args.group_size), None
    return weight_channel_config(args.wbits), activation_config(abits)


def _load_inputs(args):
    model = BlockModel.from_dict(load_json(args.model))
    x = load_tensor(args.calib)
    if x.ndim not in (2, 3) or x.shape[-2] != model.d:
        raise CLIError(f"calibration tensor of shape {x.shape} does not fit a d={model.d} model")
    return model, x


def _fmt(v) -> str:
    return repr(float(v))


def _parse_outlier(spec: str):
    try:
        kind, index, scale = spec.split(":")
        return kind, int(index), float(scale)
    except ValueError:
        raise CLIError(f"bad --inject-outlier {spec!r}; expected token:INDEX:SCALE or channel:INDEX:SCALE")


def cmd_gen_model(args) -> int:
    out = Path(args.out)
    model = BlockModel.random(args.kind, args.d, args.m, rng=rng_for(args.seed, "model"))
    x = rng_for(args.seed, "calib").standard_normal((args.d, args.T))
    for spec in args.inject_outlier or []:
        kind, index, scale = _parse_outlier(spec)
        limit = args.T if kind == "token" else args.d
        if not 0 <= index < limit:
            raise CLIError(f"outlier index {index} out of range for {kind}")
        x = inject_outlier(x, kind, index, scale)
    dump_json(model.to_dict(), out / "model.json")
    save_tensor(x, out / "calib.json", name="calib")
    print(f"wrote {out / 'model.json'} and {out / 'calib.json'}")
    return 0


def _attribute(model, x, args):
    wcfg, acfg = _configs(args)
    exec_ = QuantizedExecution(wcfg, acfg)
    result = qig(model, exec_, x, steps=args.ig_steps)
    sens = build_sensitivity(result.per_token_scores, args.iqr_k)
    return exec_, result, sens


def cmd_attribute(args) -> int:
    model, x = _load_inputs(args)
    exec_, result, sens = _attribute(model, x, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attribution.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token_index", "raw_qig", "abs_qig", "clipped", "lambda"])
        for i in range(len(sens.raw)):
            w.writerow([i, _fmt(sens.raw[i]), _fmt(sens.magnitude[i]), _fmt(sens.clipped[i]), _fmt(sens.lam[i])])

    obj = DistortionObjective(model, exec_)
    items = x[None] if x.ndim == 2 else x
    L_x = float(np.mean([obj.value(it) for it in items]))
    L_base = float(np.mean([obj.value(attribution_baseline(it, exec_)[0]) for it in items]))
    delta = L_x - L_base
    dump_json(
        {
            "steps": result.steps,
            "baseline_kind": result.baseline_kind,
            "weight_cfg": exec_.weight_cfg.to_dict(),
            "act_cfg": None if exec_.act_cfg is None else exec_.act_cfg.to_dict(),
            "iqr_k": args.iqr_k,
            "n_tokens": len(sens.raw),
            "sum_qig": float(np.sum(result.per_token_scores)),
            "L_input": L_x,
            "L_baseline": L_base,
            "completeness_residual": result.residual,
            "relative_residual": result.residual / abs(delta) if delta != 0 else 0.0,
        },
        out / "attribution.json",
    )
    print(f"attributed {len(sens.raw)} tokens, completeness residual {result.residual:.3e}")
    return 0


def _block_errors(model, qblock, x, lam):
    y = block_forward(model, x)
    r = qblock.forward(x) - y
    per_tok = np.sum(r * r, axis=0)
    return {
        "frobenius": float(np.sqrt(per_tok.sum())),
        "weighted_squared": float(np.dot(lam, per_tok)),
    }


def cmd_quantize(args) -> int:
    model, x = _load_inputs(args)
    if x.ndim != 2:
        raise CLIError("quantize expects a single d x T calibration matrix")
    abits = args.abits if args.abits is not None and args.abits < 16 else None
    if args.method == "gptq" and abits is not None:
        raise CLIError("gptq is weight-only; drop --abits")
    wcfg, acfg = _configs(args)
    _, result, sens = _attribute(model, x, args)
    lam = sens.lam
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rtn_block = QuantizedBlock(
        model.kind, {n: rtn_quantize(w, wcfg) for n, w in model.weights.items()}, {}, acfg
    )
    report = {
        "method": args.method,
        "seed": args.seed,
        "weight_cfg": wcfg.to_dict(),
        "act_cfg": None if acfg is None else acfg.to_dict(),
        "ig_steps": args.ig_steps,
        "iqr_k": args.iqr_k,
        "completeness_residual": result.residual,
        "lambda": lam.tolist(),
        "layers": {},
    }

    if args.method == "cwe":
        qblock, results = equalize_and_quantize(model, x, lam, wcfg, acfg)
        with open(out / "cwe_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "alpha", "weighted_error"])
            for name, res in results.items():
                for alpha, err in res.trace:
                    w.writerow([name, "identity" if alpha is None else _fmt(alpha), _fmt(err)])
        for name, res in results.items():
            report["layers"][name] = {
                "alpha": res.alpha,
                "weighted_error": res.weighted_error,
                "identity_error": res.trace[-1][1],
                "scales": res.scales.tolist(),
            }
    elif args.method == "gptq":
        inputs = sublayer_inputs(model, x)
        weights = {}
        for name, W in model.weights.items():
            H = weighted_hessian(inputs[name], lam, DEFAULT_DAMPING)
            weights[name], rep = gptq_quantize(W, H, wcfg, inputs[name])
            report["layers"][name] = rep
        qblock = QuantizedBlock(model.kind, weights, {}, None)
    else:
        qblock = rtn_block
        inputs = sublayer_inputs(model, x)
        for name, W in model.weights.items():
            per_tok = weighted_errors(W, dequantize(qblock.weights[name]), inputs[name])
            report["layers"][name] = {
                "weighted_error": float(np.dot(lam, per_tok)),
                "unweighted_error": float(per_tok.sum()),
            }

    report["block_error"] = _block_errors(model, qblock, x, lam)
    report["rtn_block_error"] = _block_errors(model, rtn_block, x, lam)
    dump_json(qblock.to_dict(), out / "quantized_model.json")
    dump_json(report, out / "report.json")
    print(
        f"{args.method}: block error {report['block_error']['frobenius']:.6g} "
        f"(rtn {report['rtn_block_error']['frobenius']:.6g})"
    )
    return 0


def _parse_seeds(text: str):
    seeds = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            seeds.append(int(part))
    return seeds


def cmd_verify(args) -> int:
    from .verify import run_checks, summary

    seeds = _parse_seeds(args.seeds) if args.seed is None else [args.seed]
    t0 = time.perf_counter()
    checks, timings = run_checks(seeds, args.tol_scale)
    elapsed = time.perf_counter() - t0
    result = summary(checks, seeds, args.tol_scale)
    if args.out:
        out = Path(args.out)
        dump_json(result, out / "verify.json")
        dump_json({"total_seconds": elapsed, "sections": timings}, out / "verify_timing.json")
    for c in checks:
        if not c.passed:
            print(f"FAIL {c.name} seed={c.seed}: {c.measured:.3e} > {c.tolerance * args.tol_scale:.3e}")
    print(f"{result['n_checks'] - result['n_failed']}/{result['n_checks']} checks passed in {elapsed:.1f}s")
    return 0 if result["passed"] else 1


def _add_run_flags(p, with_method=False):
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    if with_method:
        p.add_argument("--method", choices=METHODS, default="cwe")
    p.add_argument("--wbits", type=int, default=3)
    p.add_argument("--abits", type=int, default=None, help="omit (or >= 16) for weight-only")
    p.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE)
    p.add_argument("--ig-steps", type=int, default=DEFAULT_IG_STEPS)
    p.add_argument("--iqr-k", type=float, default=DEFAULT_IQR_K)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenquant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded random block and calibration input")
    p.add_argument("--kind", choices=("linear", "mlp", "attention"), default="mlp")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--m", type=int, default=None, help="output width (linear blocks only)")
    p.add_argument("--T", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-outlier", action="append", metavar="token:INDEX:SCALE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("attribute", help="per-token QIG scores and importance weights")
    _add_run_flags(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("quantize", help="quantize a block with cwe, gptq or rtn")
    _add_run_flags(p, with_method=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("verify", help="run the seeded property suite")
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--seed", type=int, default=None, help="run a single seed")
    p.add_argument("--tol-scale", type=float, default=1.0, help="multiply every tolerance")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("QIG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr)
    args = build_parser().parse_args(argv)
    if getattr(args, "ig_steps", 1) < 1:
        print("error: --ig-steps must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
