"""Command-line front end.

Subcommands:
    make-corpus   generate a synthetic image corpus (PNG + manifest)
    train-toy     train a toy classifier on a corpus and save it
    attack        run one method against one corpus image
    experiment    run a full experiment spec (JSON) and persist records
    report        tables + figures from stored records
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

import numpy as np

from .harness import (
    AttackConfigs,
    ExperimentSpec,
    parse_method,
    run_experiment,
    run_single_attack,
)
from .metrics import lp_distances, psnr
from .models import (
    ToyConvNet,
    ToyReferenceModel,
    accuracy,
    load_model,
    make_dataset,
    save_model,
    train,
)
from .oracle import IdentityAdapter, MeanSubtractAdapter, RangeAdapter
from .reporting import write_report
from .serialize import load_corpus, save_corpus, save_image_npz
from .types import BinaryMask, GEConfig, PreprocessConfig, RSConfig

# Preset architectures: genuinely different widths/depths and input
# conventions, so "target" and "reference" are distinct models.
ARCH_PRESETS = {
    "target": {"channels": (16, 24), "adapter": "mean"},
    "reference": {"channels": (16,), "adapter": "range"},
}


def _adapter(kind: str, channels: int):
    if kind == "mean":
        return MeanSubtractAdapter([128.0] * channels)
    if kind == "range":
        return RangeAdapter()
    if kind == "identity":
        return IdentityAdapter()
    raise ValueError(f"unknown adapter {kind!r}")


def cmd_make_corpus(args) -> int:
    ds = make_dataset(
        args.n,
        size=tuple(args.size),
        seed=args.seed,
        num_classes=args.classes,
    )
    save_corpus(ds, args.out)
    print(f"wrote {args.n} images ({args.size[0]}x{args.size[1]}x{args.size[2]}, "
          f"{args.classes} classes) to {args.out}")
    return 0


def cmd_train_toy(args) -> int:
    ds, _ = load_corpus(args.corpus)
    preset = ARCH_PRESETS[args.arch]
    channels = tuple(int(c) for c in args.channels.split(",")) if args.channels else preset["channels"]
    adapter_kind = args.adapter or preset["adapter"]
    h, w, c = ds.images[0].shape
    net = ToyConvNet(
        input_shape=(h, w, c),
        conv_channels=channels,
        num_classes=max(ds.labels) + 1,
        adapter=_adapter(adapter_kind, c),
        seed=args.seed,
    )
    train(net, ds, epochs=args.epochs, seed=args.seed + 1)
    save_model(net, args.out)
    print(f"trained {args.arch} net {channels} (adapter={adapter_kind}) "
          f"accuracy={accuracy(net, ds):.3f} -> {args.out}")
    return 0


def _configs_from_file(path: Optional[str]) -> AttackConfigs:
    if path is None:
        return AttackConfigs()
    with open(path) as f:
        raw = json.load(f)
    return AttackConfigs(
        preprocess=PreprocessConfig(**raw.get("preprocess", {})),
        ge=GEConfig(**raw.get("ge", {})),
        rs=RSConfig(**raw.get("rs", {})),
        fixed_value=tuple(raw.get("fixed_value", (255.0, 255.0, 255.0))),
    )


def cmd_attack(args) -> int:
    corpus, ids = load_corpus(args.corpus)
    if not (0 <= args.index < len(corpus)):
        print(f"index {args.index} outside corpus of {len(corpus)}", file=sys.stderr)
        return 2
    x = corpus.images[args.index]
    y = corpus.labels[args.index]
    target_net = load_model(args.target)
    refs = [ToyReferenceModel(load_model(p)) for p in (args.reference or [])]
    method = parse_method(args.method)
    configs = _configs_from_file(args.config)
    region = BinaryMask(corpus.region_mask(args.index))
    result, _ = run_single_attack(
        method, x, y, target_net, refs, configs, args.seed, args.budget,
        external_mask=region,
    )
    out = {
        "example_id": ids[args.index],
        "method": args.method,
        "success": result.success,
        "noq": result.noq,
        "phase": result.phase,
        "final_label": result.final_label,
        "final_prob": result.final_prob,
    }
    if result.final_image is not None:
        q = psnr(x, result.final_image)
        lp = lp_distances(x, result.final_image)
        out.update(psnr_db=None if np.isinf(q) else q, l0=lp.l0, l2=lp.l2, linf=lp.linf)
        if args.save_adv:
            save_image_npz(result.final_image, args.save_adv)
            out["adv_file"] = args.save_adv
    print(json.dumps(out, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=2)
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_file(args.spec)
    records = run_experiment(spec, out_dir=args.out)
    print(f"ran {len(records)} attacks -> {args.out}/records.jsonl")
    print(write_report(records, args.out))
    return 0


def _parse_pairs(pairs: Optional[List[str]]):
    out = []
    for p in pairs or []:
        if ":" not in p:
            raise ValueError(f"pairing {p!r} must look like METHOD_A:METHOD_B")
        a, b = p.split(":", 1)
        out.append((a, b))
    return out


def cmd_report(args) -> int:
    from .harness import read_records

    records = read_records(args.records)
    print(write_report(records, args.out, pairs=_parse_pairs(args.pair)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localadv",
        description="Query-efficient local black-box adversarial attacks on toy classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=3, default=[32, 32, 3], metavar=("H", "W", "C"))
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train-toy", help="train a toy model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="target")
    p.add_argument("--channels", help="comma-separated conv widths, overrides the preset")
    p.add_argument("--adapter", choices=["mean", "range", "identity"])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("attack", help="run one method on one corpus image")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--reference", action="append", help="reference model (repeatable)")
    p.add_argument("--method", default="IAE&MI-RS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=5000)
    p.add_argument("--config", help="JSON file with preprocess/ge/rs/fixed_value settings")
    p.add_argument("--out", help="write the result summary to this JSON file")
    p.add_argument("--save-adv", help="write the final image to this npz file")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("experiment", help="run an experiment spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="tables and figures from stored records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pair", action="append", help="Case-Both pairing METHOD_A:METHOD_B")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
