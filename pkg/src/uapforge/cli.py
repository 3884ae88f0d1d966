"""Command-line entry point: ``uapforge <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .adapters import load_adapter
from .dataset import load_manifest, synth_toy_dataset, write_manifest
from .errors import ConfigError, UapForgeError
from .evaluation import AttackReport, evaluate_attack, format_report
from .optimizer import run_image_attack
from .persistence import (load_json, load_triggers, load_uap, save_json, save_triggers,
                          save_uap)
from .text_attack import TextTrigger, mine_triggers

log = logging.getLogger("uapforge")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _run_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--workdir", default=".", help="base directory for every relative path")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--manifest", help="JSONL dataset manifest")
    p.add_argument("--adapter", help="'toy' or 'external:<module>[:<factory>]'")
    p.add_argument("--seed", type=int, help="overrides the config and $UAPFORGE_SEED")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uapforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = _run_parent()

    p = sub.add_parser("attack-image", parents=[run], help="learn an image UAP")
    p.add_argument("--out", default="uap.bin")
    p.add_argument("--trace", help="trace CSV path (default: next to --out)")

    p = sub.add_parser("attack-text", parents=[run], help="mine universal trigger words")
    p.add_argument("--out", default="triggers.json")

    p = sub.add_parser("evaluate", parents=[run], help="clean/adversarial recall and ASR@K")
    p.add_argument("--uap")
    p.add_argument("--triggers")
    p.add_argument("--k", type=_int_list, help="comma-separated K values, e.g. 1,5,10")
    p.add_argument("--report", default="report.json")

    p = sub.add_parser("report", help="print a stored report as a table")
    p.add_argument("--workdir", default=".")
    p.add_argument("--report", default="report.json")

    p = sub.add_parser("make-toy", help="write a synthetic toy corpus")
    p.add_argument("--workdir", default=".")
    p.add_argument("--out", default="toy", help="output directory")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--geometry", type=_int_list, default=[32, 32, 3])
    p.add_argument("--vocab-size", type=int, default=48)
    p.add_argument("--caption-len", type=int, default=6)

    sub.add_parser("print-config", help="print a config file holding every default")
    return parser


def _resolve_config(args, base: Path, extra=None):
    flags = {"manifest": args.manifest, "adapter": args.adapter, "seed": args.seed}
    flags.update(extra or {})
    cfg_path = base / args.config if args.config else None
    return config_mod.resolve(cfg_path, args.overrides, flags)


def _load_run(cfg, base: Path):
    dataset = load_manifest(base / cfg.manifest)
    bundle = load_adapter(cfg.adapter, dataset.image_geometry, **cfg.adapter_args)
    return dataset, bundle


def _snapshot(cfg, out: Path, command: str) -> None:
    snap = cfg.to_dict()
    snap["command"] = command
    snap["config_digest"] = cfg.digest()
    save_json(snap, out.parent / f"{command}.resolved_config.json")


def _prepare_out(base: Path, rel: str) -> Path:
    out = base / rel
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_attack_image(args, base: Path) -> int:
    cfg = _resolve_config(args, base)
    dataset, bundle = _load_run(cfg, base)
    uap, trace = run_image_attack(dataset, bundle, cfg.attack)
    out = _prepare_out(base, args.out)
    save_uap(uap, out)
    trace_path = base / args.trace if args.trace else out.with_name("trace.csv")
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "l1", "l2", "linf"])
        for row in trace:
            w.writerow([row.step, row.epoch, repr(row.l1), repr(row.l2), repr(row.linf)])
    _snapshot(cfg, out, "attack-image")
    print(f"wrote {out} (linf={uap.linf:.6g}, {len(trace)} steps) and {trace_path}")
    return 0


def cmd_attack_text(args, base: Path) -> int:
    cfg = _resolve_config(args, base)
    dataset, bundle = _load_run(cfg, base)
    lexicon = mine_triggers(dataset, bundle, cfg.text)
    trigger = TextTrigger(lexicon.top, cfg.text.epsilon_T, cfg.text.policy)
    out = _prepare_out(base, args.out)
    save_triggers(lexicon, trigger, out)
    _snapshot(cfg, out, "attack-text")
    print(f"wrote {out} (trigger={trigger.token!r}, {len(lexicon)} candidates)")
    return 0


def cmd_evaluate(args, base: Path) -> int:
    extra = {"eval.k": args.k} if args.k else {}
    cfg = _resolve_config(args, base, extra)
    dataset, bundle = _load_run(cfg, base)
    uap = load_uap(base / args.uap) if args.uap else None
    trigger = load_triggers(base / args.triggers)[1] if args.triggers else None
    rep = evaluate_attack(bundle, dataset, cfg.eval_k, uap, trigger, cfg.text, cfg.seed,
                          adapter_name=cfg.adapter, config_digest=cfg.digest())
    out = _prepare_out(base, args.report)
    save_json(rep.to_dict(), out)
    _snapshot(cfg, out, "evaluate")
    print(format_report(rep))
    return 0


def cmd_report(args, base: Path) -> int:
    print(format_report(AttackReport.from_dict(load_json(base / args.report))))
    return 0


def cmd_make_toy(args, base: Path) -> int:
    ds = synth_toy_dataset(args.seed, args.n, tuple(args.geometry), args.vocab_size, args.caption_len)
    path = write_manifest(ds, base / args.out)
    print(f"wrote {path} ({ds.n} images, {ds.n_t} captions)")
    return 0


COMMANDS = {
    "attack-image": cmd_attack_image,
    "attack-text": cmd_attack_text,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "make-toy": cmd_make_toy,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "print-config":
        print(config_mod.default_toml())
        return 0
    base = Path(args.workdir)
    try:
        return COMMANDS[args.command](args, base)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UapForgeError, OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
