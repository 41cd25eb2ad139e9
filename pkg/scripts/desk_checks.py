#!/usr/bin/env python3
"""Run the desk-scale directional comparisons for a few seeds and print one
line per measurement.

    python scripts/desk_checks.py --seeds 0 1 2
"""
import argparse
import json
import logging

from supmae import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lambda-cls", type=float, default=desk.LAMBDA_CLS)
    ap.add_argument("--skip", nargs="*", default=[], choices=["linprobe", "partial", "finetune"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    for seed in args.seeds:
        train, test = desk.data(seed)
        kw = dict(epochs=args.epochs, warmup_epochs=min(5, args.epochs))
        joint = desk.pretrain(train, seed, args.lambda_cls, **kw)
        row = {"seed": seed, "pretrain_cpu_s": round(joint.seconds, 1)}
        if "linprobe" not in args.skip:
            rec = desk.pretrain(train, seed, 0.0, **kw)
            row["lin_joint"] = desk.linprobe_accuracy(joint.params, train, test, seed)
            row["lin_rec"] = desk.linprobe_accuracy(rec.params, train, test, seed)
        if "partial" not in args.skip:
            row["keep1"], row["keep025"] = desk.partial_patch(joint, test)
        if "finetune" not in args.skip:
            row["ft1_pretrained"] = desk.first_finetune_epoch(joint.params, train, test, seed)
            row["ft1_random"] = desk.first_finetune_epoch(None, train, test, seed)
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
