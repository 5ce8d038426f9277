"""Command-line entry point: generate, pretrain, finetune, fuse, eval, ablate.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as rc
from . import dataset as ds
from .ablation import run_ablation
from .errors import ConfigError, DataError, NumericalError
from .finetune import finetune
from .fusion import evaluate_dataset, fuse_all, parse_grid, select_weights
from .pretrain.checkpoint import load_checkpoint, save_checkpoint
from .pretrain.engine import set_determinism, train
from .records import read_logits, write_logits
from .synth import SynthSpec, generate

log = logging.getLogger("sos_oic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

PRETRAIN_CKPT = "pretrain.ckpt"
FINETUNE_CKPT = "finetune.ckpt"
OIC_LOGITS = "oic_logits.jsonl"
FUSED_LOGITS = "fused_logits.jsonl"
WEIGHTS_FILE = "weights.json"
REPORT_FILE = "report.json"


def _file_hash(path) -> str:
    return rc.blob_hash(Path(path).read_bytes())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {"seed": args.seed, "threads": args.threads}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _parse_value(value)
    objective = getattr(args, "objective", None)
    if objective:
        out["pretrain.objective"] = objective
    lt = getattr(args, "lt_loss", None)
    if lt:
        out["finetune.lt_loss"] = lt == "on"
    if getattr(args, "pilot_fraction", None) is not None:
        out["fusion.pilot_fraction"] = args.pilot_fraction
        out["finetune.pilot_fraction"] = args.pilot_fraction
    return out


def _init_value(text: str) -> str:
    if text != "random" and not (text.startswith("external:") and len(text) > len("external:")):
        raise argparse.ArgumentTypeError("expected 'random' or 'external:PATH'")
    return text


def _load_config(args) -> rc.RunConfig:
    cfg = rc.resolve(args.config, _overrides(args))
    cfg.synth.validate()
    cfg.pretrain.validate()
    cfg.finetune.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _open_data(path):
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return ds.open_dataset(root)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_config(args)
    if args.spec:
        spec_doc = rc.load_document(args.spec)
        merged = {**asdict(cfg.synth), **spec_doc}
        if args.seed is not None:
            merged["seed"] = args.seed
        cfg.synth = SynthSpec.from_dict(merged)
    out = _out_dir(args)
    data = generate(cfg.synth)
    data.write(out)
    rc.write_resolved(out, cfg, "generate", {"manifest_hash": _file_hash(out / ds.MANIFEST_FILE)})
    print(f"wrote {len(data.labels)} videos to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if args.init:
        cfg.pretrain.encoder.init = args.init
    out = _out_dir(args)
    data = _open_data(args.data)
    videos = data.split(args.split) if args.split else data.region_sets
    result = train(videos, data.frames, cfg.pretrain, log_path=out / "pretrain_log.jsonl")
    ckpt_path = save_checkpoint(out / PRETRAIN_CKPT, result.checkpoint)
    final = result.history[-1]["loss"]
    rc.write_resolved(out, cfg, "pretrain", {
        "data": str(args.data), "manifest_hash": _file_hash(Path(args.data) / ds.MANIFEST_FILE),
        "checkpoint_hash": _file_hash(ckpt_path), "final_loss": final})
    print(f"final loss {final:.6f}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    init = args.init or cfg.finetune.encoder.init
    if args.checkpoint:
        if args.init and args.init != f"external:{args.checkpoint}":
            raise ConfigError("give either --checkpoint or --init, not both")
        init = f"external:{args.checkpoint}"
    cfg.finetune.encoder.init = init
    source = load_checkpoint(init.split(":", 1)[1]) if init.startswith("external:") else None
    out = _out_dir(args)
    data = _open_data(args.data)
    set_determinism(cfg.finetune.seed, cfg.finetune.threads)
    result = finetune(data, source, cfg.finetune, log_path=out / "finetune_log.jsonl")
    ckpt_path = save_checkpoint(out / FINETUNE_CKPT, result.checkpoint)
    seen, records = set(), []
    for name in sorted(data.header.splits):
        for r in result.records[name]:
            if r.video_id not in seen:
                seen.add(r.video_id)
                records.append(r)
    records.sort(key=lambda r: r.video_id)
    write_logits(out / OIC_LOGITS, records)
    (out / "pilot_ids.json").write_text(json.dumps(result.pilot_ids, indent=1) + "\n")
    final = result.history[-1]["loss"]
    rc.write_resolved(out, cfg, "finetune", {
        "data": str(args.data), "init": init, "checkpoint_hash": _file_hash(ckpt_path),
        "logits_hash": _file_hash(out / OIC_LOGITS), "final_loss": final})
    print(f"final loss {final:.6f}; checkpoint {ckpt_path}; logits {out / OIC_LOGITS}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _load_config(args)
    if args.grid:
        cfg.fusion.grid = [list(p) for p in parse_grid(args.grid)]
    out = _out_dir(args)
    data = _open_data(args.data)
    header = data.header
    base_path = args.base or Path(args.data) / ds.BASE_LOGITS_FILE
    oic = read_logits(args.oic, header.n_verbs, header.n_nouns)
    base = read_logits(base_path, header.n_verbs, header.n_nouns)
    # weights are chosen on the pilot carved from the training split, as in fine-tuning
    train_ids = set(header.splits.get(cfg.finetune.train_split, []))
    selection = select_weights([r for r in oic if r.video_id in train_ids],
                               [r for r in base if r.video_id in train_ids], data.labels,
                               cfg.fusion.pilot_fraction, cfg.fusion.grid, cfg.seed)
    fused = fuse_all(oic, base, selection.weights)
    write_logits(out / FUSED_LOGITS, fused)
    doc = {"weights": selection.weights.to_dict(), "pilot_accuracy": selection.pilot_accuracy,
           "pilot_ids": selection.pilot_ids}
    (out / WEIGHTS_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rc.write_resolved(out, cfg, "fuse", {"oic": str(args.oic), "base": str(base_path),
                                         "oic_hash": _file_hash(args.oic), "base_hash": _file_hash(base_path)})
    print(json.dumps(doc["weights"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    data = _open_data(args.data)
    header = data.header
    if args.split and args.split not in header.splits:
        raise ConfigError(f"dataset has no split {args.split!r}")
    wanted = set(header.splits[args.split]) if args.split else None
    reports = {}
    for path in args.logits:
        records = read_logits(path, header.n_verbs, header.n_nouns)
        if wanted is not None:
            records = [r for r in records if r.video_id in wanted]
        if not records:
            raise DataError(f"{path} holds no records for the requested split")
        report = evaluate_dataset(records, header, data.labels, model_tag=Path(path).stem)
        reports[Path(path).stem] = report.to_dict()
        print(f"== {path} ({args.split or 'all videos'})")
        print(report.table())
    doc = {"split": args.split, "reports": reports}
    (out / REPORT_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rc.write_resolved(out, cfg, "eval", {"logits": {str(p): _file_hash(p) for p in args.logits}})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    set_determinism(cfg.seed, cfg.threads)
    result = run_ablation(cfg.synth, cfg.pretrain, cfg.finetune, cfg.ablation.pretrain_epochs,
                          cfg.ablation.finetune_epochs, cfg.ablation.heldout_seed_offset, out)
    rc.write_resolved(out, cfg, "ablate")
    print(result.table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int, help="run-wide seed")
    common.add_argument("--threads", type=int, help="torch intra-op threads (default 1)")
    common.add_argument("--out-dir", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. pretrain.epochs=5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sos-oic", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("--spec", help="JSON SynthSpec; overrides the config's synth section")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", parents=[common], help="set-based self-supervised pre-training")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", help="restrict to one split (default: every video, labels unused)")
    p.add_argument("--objective", choices=("swav", "swav_s"))
    p.add_argument("--init", type=_init_value, help="random or external:PATH")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune the OIC classifier")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", help="pre-training checkpoint (same as --init external:PATH)")
    p.add_argument("--init", type=_init_value, help="random or external:PATH")
    p.add_argument("--lt-loss", choices=("on", "off"))
    p.add_argument("--pilot-fraction", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("fuse", parents=[common], help="late fusion with a base model's logits")
    p.add_argument("--data", required=True, help="dataset directory (labels and splits)")
    p.add_argument("--oic", required=True, help="OIC logit file")
    p.add_argument("--base", help="base model logit file (default: the dataset's base_logits.jsonl)")
    p.add_argument("--pilot-fraction", type=float)
    p.add_argument("--grid", help="'a:b,a:b,...' weight pairs or 'step=0.1'")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="accuracy report for logit files")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--logits", required=True, nargs="+", help="one or more logit files")
    p.add_argument("--split", default="val", help="split to score (default val; '' for every video)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run both ablation grids on synthetic data")
    p.add_argument("--lt-loss", choices=("on", "off"), help="LT loss for the components grid")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
