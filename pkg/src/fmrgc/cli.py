"""Command line entry point: ``fmrgc <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .attacks import AttackConfig, load_adversarial, pgd, save_adversarial, cw_margin_attack, fgsm
from .data import DatasetSpec, load_dataset
from .layer import FmrGcConfig
from .models import SLOTS, BackboneConfig, accuracy, build_backbone
from .training import TrainConfig, config_hash, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("fmrgc")

def load_config(args) -> dict:
    """Resolve the JSON config plus command-line overrides into plain dicts."""
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    unknown = set(raw) - {"backbone", "train", "attack", "data", "fmrgc", "sweep"}
    if unknown:
        raise SystemExit(f"unknown config sections: {sorted(unknown)}")
    data = {**DatasetSpec().to_dict(), **raw.get("data", {})}
    if args.data:
        data.update(source="cifar10", path=args.data)
    if args.synthetic:
        data.update(source="synthetic", path=None)
    if data["source"] == "cifar10" and data.get("path") is None:
        raise SystemExit("--data <dir> is required for CIFAR-10 (or pass --synthetic)")
    train = {**harness.DESK_TRAIN, **raw.get("train", {}), "seed": args.seed}
    if "attack" in raw:
        train["attack"] = raw["attack"]
    backbone = dict(raw.get("backbone", {}))
    if data["source"] == "synthetic":
        size = data.get("image_size", 32)
        backbone.setdefault("input_shape", [3, size, size])
        backbone.setdefault("num_classes", data.get("classes", 10))
    return {
        "data": data,
        "train": TrainConfig.from_dict(train).to_dict(),
        "backbone": BackboneConfig.from_dict(backbone).to_dict(),
        "fmrgc": FmrGcConfig(**raw.get("fmrgc", {})).__dict__,
        "sweep": raw.get("sweep", {}),
    }


def _datasets(cfg):
    return load_dataset(DatasetSpec(**cfg["data"]))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, cfg, command, extra):
    return {
        "command": command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config": cfg,
        "config_hash": config_hash(cfg),
        **extra,
    }


def cmd_train(args, cfg):
    train, _ = _datasets(cfg)
    bcfg = BackboneConfig.from_dict(cfg["backbone"])
    for s in args.slots or []:
        bcfg.slots[s] = FmrGcConfig(**cfg["fmrgc"])
    bcfg = BackboneConfig.from_dict(bcfg.to_dict())
    tcfg = TrainConfig.from_dict(cfg["train"])
    if args.objective:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "objective": args.objective})
    model = build_backbone(bcfg, args.seed)
    t0 = time.perf_counter()
    ckpt = fit(model, train.x, train.y, tcfg)
    out = _out(args)
    path = save_checkpoint(ckpt, out / "model.fmrgc")
    harness.write_csv(out / "history.csv", ckpt.metrics["history"], ["epoch", "lr", "train_loss"])
    harness.write_manifest(
        out / "train.json",
        _manifest(args, cfg, "train", {"checkpoint": str(path), "model_hash": model.fingerprint(),
                                       "wall_time_s": time.perf_counter() - t0}),
    )
    print(path)


def cmd_eval(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    _, test = _datasets(cfg)
    suite = harness.attack_suite(args.epsilon / 255, args.rows)
    report = harness.evaluate_robustness(model, test.x, test.y, suite, args.seed)
    out = _out(args)
    harness.write_csv(out / "robustness.csv", report.table(), ["attack", "accuracy"])
    harness.write_manifest(out / "eval.json", _manifest(args, cfg, "eval", {"report": report.rows, **report.metadata}))
    for k, v in report.rows.items():
        print(f"{k:8s} {v:6.2f}")


def cmd_attack(args, cfg):
    model = load_checkpoint(args.checkpoint).model()
    _, test = _datasets(cfg)
    eps = args.epsilon / 255
    acfg = AttackConfig(epsilon=eps, steps=args.steps)
    if args.attack == "fgsm":
        x_adv = fgsm(model, test.x, test.y, eps)
    elif args.attack == "cw":
        x_adv = cw_margin_attack(model, test.x, test.y, acfg, args.seed, evaluate=False).x_adv
    else:
        x_adv = pgd(model, test.x, test.y, acfg, args.seed, evaluate=False).x_adv
    out = _out(args)
    blob = save_adversarial(out / "adversarial", x_adv, epsilon=eps, attack=f"{args.attack}-{args.steps}",
                            seed=args.seed, labels=test.y)
    print(f"{blob}  robust accuracy {accuracy(model, x_adv, test.y):.2f}")


def cmd_transfer(args, cfg):
    target = load_checkpoint(args.target).model()
    out = _out(args)
    if args.adv:
        x_adv, meta = load_adversarial(args.adv)
        y = np.asarray(meta["labels"])
        rows = [{"source": meta["attack"], "target": args.target, "accuracy": accuracy(target, x_adv, y)}]
    else:
        if not args.source:
            raise SystemExit("transfer needs --source or --adv")
        source = load_checkpoint(args.source).model()
        _, test = _datasets(cfg)
        rows = harness.transfer_table({"source": source}, {"target": target}, test.x, test.y,
                                      args.epsilon / 255, args.rows or ("FGSM", "PGD-10", "PGD-20"), args.seed)
    harness.write_csv(out / "transfer.csv", rows)
    print(harness.rows_to_csv(rows), end="")


def cmd_sweep(args, cfg):
    out = _out(args)
    seeds = [args.seed + i for i in range(args.num_seeds)]
    base = BackboneConfig.from_dict(cfg["backbone"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    gc = FmrGcConfig(**cfg["fmrgc"])
    sweep = cfg["sweep"]
    ckdir = out / "checkpoints" if args.keep_checkpoints else None
    if args.kind == "epsilon":
        if not args.checkpoint:
            raise SystemExit("sweep epsilon needs --checkpoint")
        model = load_checkpoint(args.checkpoint).model()
        _, test = _datasets(cfg)
        eps = [e / 255 for e in sweep.get("epsilons", [0, 2, 4, 8, 12, 16])]
        rows = harness.sweep_epsilon(model, test.x, test.y, eps, args.seed, tuple(sweep.get("steps", (10, 100))))
    else:
        train, test = _datasets(cfg)
        suite = harness.attack_suite(names=args.rows) if args.rows else None
        common = dict(seeds=seeds, gc=gc, suite=suite, checkpoint_dir=ckdir)
        if args.kind == "positions":
            sets = sweep.get("slot_sets", harness.POSITION_SETS)
            rows = harness.sweep_block_positions(base, tcfg, train, test, slot_sets=sets, **common)
        elif args.kind == "density":
            c = base.stage_shapes()[SLOTS.index(sweep.get("slot", "conv1"))][0]
            ks = sweep.get("k_values", sorted({1, min(5, c - 1), c - 1}))
            rows = harness.sweep_graph_density(base, tcfg, train, test, ks, slot=sweep.get("slot", "conv1"), **common)
        elif args.kind == "descriptors":
            rows = harness.ablate_descriptors(base, tcfg, train, test, **common)
        else:
            rows = harness.ablate_components(base, tcfg, train, test, **common)
    path = harness.write_csv(out / f"sweep_{args.kind}.csv", rows)
    harness.write_manifest(out / f"sweep_{args.kind}.json", _manifest(args, cfg, f"sweep {args.kind}", {"seeds": seeds}))
    print(harness.rows_to_csv(rows), end="")
    log.info("wrote %s", path)


def cmd_cost(args, cfg):
    bcfg = BackboneConfig.from_dict(cfg["backbone"])
    for s in args.slots or []:
        bcfg.slots[s] = FmrGcConfig(**cfg["fmrgc"])
    bcfg = BackboneConfig.from_dict(bcfg.to_dict())
    plain = harness.cost_report(build_backbone(bcfg.with_slots({}), args.seed))
    rep = harness.cost_report(build_backbone(bcfg, args.seed))
    rows = rep.table() + [{"layer": "delta_vs_plain", "params": rep.params - plain.params, "macs": rep.macs - plain.macs}]
    out = _out(args)
    harness.write_csv(out / "cost.csv", rows, ["layer", "params", "macs"])
    print(harness.rows_to_csv(rows, ["layer", "params", "macs"]), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with backbone/train/attack/data/fmrgc/sweep sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("--data", help="directory holding the CIFAR-10 binary batches")
    common.add_argument("--synthetic", action="store_true", help="use the synthetic blob dataset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fmrgc", description="FMR-GC adversarial robustness lab", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    t.add_argument("--objective", choices=["standard", "pgd_at", "trades", "awp"])
    t.add_argument("--slots", nargs="*", choices=SLOTS, help="FMR-GC insertion points")

    e = sub.add_parser("eval", parents=[common], help="robustness report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--epsilon", type=float, default=8.0, help="L-inf radius in 1/255 units")
    e.add_argument("--rows", nargs="*", default=list(harness.REPORT_ROWS))

    a = sub.add_parser("attack", parents=[common], help="export adversarial test examples")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--attack", choices=["fgsm", "pgd", "cw"], default="pgd")
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--epsilon", type=float, default=8.0)

    tr = sub.add_parser("transfer", parents=[common], help="evaluate a target on examples crafted elsewhere")
    tr.add_argument("--target", required=True)
    tr.add_argument("--source")
    tr.add_argument("--adv", help="replay an exported adversarial batch instead of crafting")
    tr.add_argument("--epsilon", type=float, default=8.0)
    tr.add_argument("--rows", nargs="*")

    s = sub.add_parser("sweep", parents=[common], help="ablation sweeps")
    s.add_argument("kind", choices=["positions", "density", "epsilon", "descriptors", "components"])
    s.add_argument("--checkpoint", help="trained model for the epsilon sweep")
    s.add_argument("--num-seeds", type=int, default=3)
    s.add_argument("--rows", nargs="*", help="report rows to evaluate, e.g. Clean FGSM PGD-10")
    s.add_argument("--keep-checkpoints", action="store_true")

    c = sub.add_parser("cost", parents=[common], help="parameter and MAC accounting")
    c.add_argument("--slots", nargs="*", choices=SLOTS)
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args)
    COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    main()
