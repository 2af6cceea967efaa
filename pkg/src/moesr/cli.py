"""Command-line entry points.

Subcommands cover the whole pipeline: gen-data, train-codec, train, infer,
eval, diffmap, cost, ablate.  Every run is reproducible from its (seed,
config, dataset) triple; see training.py for the stream layout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

from . import training
from .config import _coerce, load_config, parse_kv_file
from .dataio import DATA_MAGIC, read_pgm, write_pgm, write_records
from .phantoms import PhantomSpec
from .training import TrainingAborted


def _phantom_spec(path: str | None) -> PhantomSpec:
    if path is None:
        return PhantomSpec()
    raw = parse_kv_file(path)
    defaults = PhantomSpec()
    names = {f.name for f in fields(defaults)}
    vals = {}
    for key, val in raw.items():
        if key not in names:
            raise KeyError(f"unknown phantom key {key!r}")
        vals[key] = _coerce(key, val, getattr(defaults, key))
    return PhantomSpec(**vals)


def _add_common(p: argparse.ArgumentParser, data=True, out=True, config=True):
    if config:
        p.add_argument("--config", default=None,
                       help="key=value config file (preset=desk|paper)")
        p.add_argument("--preset", default="desk", choices=["desk", "paper"])
    if data:
        p.add_argument("--data", required=True, help="dataset directory")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="moesr",
        description="Region-routed latent-diffusion super-resolution "
                    "on synthetic MRI phantoms.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate phantom pairs")
    p.add_argument("--spec", default=None, help="phantom key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-frac", type=float, default=0.25)

    p = sub.add_parser("train-codec", help="pretrain the latent codec")
    _add_common(p)

    p = sub.add_parser("train", help="joint training over a frozen codec")
    _add_common(p)
    p.add_argument("--codec", default=None,
                   help="codec checkpoint (default <out>/codec.bin)")

    p = sub.add_parser("infer", help="super-resolve a file or a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="PGM file or split name")
    p.add_argument("--data", default=None, help="dataset dir for split input")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["full", "async"], default="full")
    p.add_argument("--topk", type=int, default=1,
                   help="experts kept in async mode")

    p = sub.add_parser("eval", help="metrics against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="write metrics JSON here")
    p.add_argument("--topk", type=int, default=None)

    p = sub.add_parser("diffmap", help="per-expert difference maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--example", type=int, required=True,
                   help="pair seed within the split")
    p.add_argument("--split", default="train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("cost", help="parameter/MAC report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["full", "async"], default="full")
    p.add_argument("--topk", type=int, default=1)

    p = sub.add_parser("ablate", help="bias/warp conditioning ablation grid")
    _add_common(p)
    return ap


def _config(args) -> "training.TrainConfig":
    return load_config(args.config, preset=args.preset)


def _cmd_gen_data(args) -> int:
    spec = _phantom_spec(args.spec)
    splits = training.generate_dataset(args.out, args.n, args.seed, spec,
                                       val_frac=args.val_frac)
    print(f"wrote {args.n} pairs to {args.out} "
          f"(train {len(splits['train'])}, val {len(splits['val'])})")
    return 0


def _cmd_train_codec(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    _, records = training._load_pairs(args.data, "train")
    bundle = training.build_bundle(cfg)
    final_psnr = training.pretrain_codec(bundle, cfg, records)
    from .checkpoint import save_checkpoint
    from .losses import VarianceTracker
    path = os.path.join(args.out, training.CODEC_CKPT)
    save_checkpoint(path, bundle, cfg, 0, VarianceTracker(cfg.var_decay))
    print(f"codec checkpoint: {path}")
    print(f"codec reconstruction PSNR: {final_psnr:.2f} dB")
    return 0


def _cmd_train(args) -> int:
    cfg = _config(args)
    final = training.train(cfg, args.data, args.out, codec_path=args.codec)
    print(f"final checkpoint: {final}")
    print(f"training log: {os.path.join(args.out, training.LOG_NAME)}")
    return 0


def _cmd_infer(args) -> int:
    bundle, cfg = training.load_model(args.ckpt)
    top_k = args.topk if args.mode == "async" else None
    os.makedirs(args.out, exist_ok=True)
    if os.path.exists(args.input):
        if not args.input.endswith(".pgm"):
            raise ValueError("file input must be a PGM image")
        jobs = [(0, read_pgm(args.input), None)]
    else:
        if args.data is None:
            raise ValueError("--data is required when --input names a split")
        seeds, records = training._load_pairs(args.data, args.input)
        jobs = [(s, r["lr"], r["hr"]) for s, r in zip(seeds, records)]
    for ident, lr, hr in jobs:
        out = training.infer_one(bundle, cfg, lr, ident, top_k=top_k)
        write_pgm(os.path.join(args.out, f"sr_{ident}.pgm"), out["sr"])
        recs = {"lr": lr, "sr": out["sr"], "gates": out["gates"]}
        if hr is not None:
            recs["hr"] = hr
        write_records(os.path.join(args.out, f"sr_{ident}.bin"),
                      DATA_MAGIC, recs)
        gates = ", ".join(f"{g:.4f}" for g in out["gates"])
        chosen = [int(i) for i in out["selected"]]
        print(f"example {ident}: experts {chosen} gates [{gates}]")
    return 0


def _cmd_eval(args) -> int:
    bundle, cfg = training.load_model(args.ckpt)
    report = training.evaluate(bundle, cfg, args.data, args.split,
                               top_k=args.topk)
    agg = report["aggregate"]
    print(f"{report['n']} examples ({args.split}): "
          f"PSNR {agg['psnr']:.2f} dB (bicubic {agg['psnr_bicubic']:.2f}), "
          f"SSIM {agg['ssim']:.4f}, RMSE {agg['rmse']:.5f}")
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
        print(f"metrics: {args.out}")
    return 0


def _cmd_diffmap(args) -> int:
    bundle, cfg = training.load_model(args.ckpt)
    seeds, records = training._load_pairs(args.data, args.split)
    if args.example not in seeds:
        raise ValueError(f"example {args.example} not in split {args.split}")
    rec = records[seeds.index(args.example)]
    result = training.diffmap(bundle, cfg, rec, args.example, args.out)
    gates = ", ".join(f"{g:.4f}" for g in result["gates"])
    print(f"gates [{gates}]")
    for e in result["experts"]:
        regions = "  ".join(f"{k} {v:.5f}" for k, v in e["regions"].items())
        print(f"expert {e['expert']}: energy {e['energy']:.5f}  {regions}")
    return 0


def _cmd_cost(args) -> int:
    bundle, cfg = training.load_model(args.ckpt)
    top_k = args.topk if args.mode == "async" else None
    report = training.report_cost(bundle, cfg, top_k=top_k)
    print(training.cost_table(report))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config(args)
    result = training.run_ablation(cfg, args.data, args.out)
    print(f"{'arm':<6} {'first':>12} {'last':>12} {'mean(last 50)':>14}")
    for name in sorted(result["summary"]):
        s = result["summary"][name]
        print(f"{name:<6} {s['first']:>12.5f} {s['last']:>12.5f} "
              f"{s['mean_last_50']:>14.5f}")
    print(f"summary: {os.path.join(args.out, 'ablation.json')}")
    return 0


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train-codec": _cmd_train_codec,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "diffmap": _cmd_diffmap,
    "cost": _cmd_cost,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.cmd](args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
