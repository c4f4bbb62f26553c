"""Command-line entry point.

Subcommands: synth (generate toy corpora), build-corpus (assemble a manifest
from raw images and captions), pretrain, eval, and report. Every run writes a
manifest with the resolved configuration so it can be reproduced exactly.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .data import (
    DEFAULT_PROMPT_TEMPLATE,
    SyntheticConfig,
    load_corpus,
    make_synthetic_corpus,
    save_corpus,
)
from .training import ConfigError, NonFiniteLossError, TrainConfig, config_hash, fit, load_checkpoint

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _args_hash(args: dict) -> str:
    blob = json.dumps(args, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_run_manifest(
    out_dir: Path, command: str, resolved: dict, seed: int, started: str, artifacts: list[str]
) -> Path:
    """One manifest per run; a run is reproducible from this file alone."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": _args_hash(resolved),
        "seed": seed,
        "started_at": started,
        "finished_at": _utcnow(),
        "resolved_args": resolved,
        "artifacts": artifacts,
        "version": __version__,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")
    return path


def cmd_synth(args: argparse.Namespace) -> int:
    started = _utcnow()
    config = SyntheticConfig(
        num_categories=args.categories,
        samples_per_category=args.per_class,
        image_size=args.image_size,
        seed=args.seed,
        noise_level=args.noise,
    )
    expert, public = make_synthetic_corpus(config)
    out = Path(args.out)
    expert_path = save_corpus(expert, out / "expert" / "manifest.jsonl")
    public_path = save_corpus(public, out / "public" / "manifest.jsonl")
    write_run_manifest(
        out,
        "synth",
        dataclasses.asdict(config),
        args.seed,
        started,
        [str(expert_path), str(public_path)],
    )
    print(f"wrote {len(expert)} expert and {len(public)} public records under {out}")
    return 0


def cmd_build_corpus(args: argparse.Namespace) -> int:
    from .corpus_tools import build_corpus_from_raw

    started = _utcnow()
    corpus = build_corpus_from_raw(
        args.input,
        name=args.name,
        dehaze_gamma=args.dehaze_gamma,
        ffa_ref_path=args.ffa_ref,
        oct_ref_path=args.oct_ref,
    )
    out = Path(args.out)
    manifest = save_corpus(corpus, out / "manifest.jsonl")
    write_run_manifest(
        out,
        "build-corpus",
        {k: str(v) for k, v in vars(args).items() if k != "func"},
        0,
        started,
        [str(manifest)],
    )
    print(f"wrote {len(corpus)} records to {manifest}")
    return 0


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    raw: dict = {}
    if args.config:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise FileNotFoundError(f"config file not found: {config_path}")
        raw = json.loads(config_path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a flat JSON object")
    overrides = {
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "lr": args.lr,
        "alpha": args.alpha,
        "seed": args.seed,
        "encoder": args.encoder,
        "embed_dim": args.embed_dim,
        "image_size": args.image_size,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    for ablation in args.ablation or ():
        raw.update(
            {
                "no-revision": {"revision_on": False},
                "no-mixed": {"mixed_on": False},
                "fusion": {"fusion_on": True, "revision_on": False},
            }[ablation]
        )
    return TrainConfig.from_dict(raw)


def cmd_pretrain(args: argparse.Namespace) -> int:
    started = _utcnow()
    config = _resolve_train_config(args)
    expert = load_corpus(args.expert)
    public = load_corpus(args.public)
    ckpt = fit(expert, public, config, args.out)
    write_run_manifest(
        Path(args.out),
        "pretrain",
        config.to_dict(),
        config.seed,
        started,
        [str(ckpt), str(Path(args.out) / "loss_log.jsonl")],
    )
    print(f"checkpoint written to {ckpt} (config hash {config_hash(config)})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .adaptation import kfold_evaluate

    started = _utcnow()
    model, train_config = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    report = kfold_evaluate(
        model,
        corpus,
        protocol=args.protocol,
        k=args.folds,
        seed=args.seed,
        shots=args.shots,
        template=args.template,
        balanced=not args.plain_accuracy,
        tip_beta=args.tip_beta,
        tip_mix=args.tip_mix,
        adapter_ratio=args.adapter_ratio,
    )
    payload = {
        "protocol": args.protocol,
        "shots": args.shots if args.protocol not in ("zeroshot", "linear") else None,
        "corpus": str(args.corpus),
        "checkpoint": str(args.checkpoint),
        "config_hash": config_hash(train_config),
        **report.as_dict(),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"eval_{args.protocol}.json"
    report_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    write_run_manifest(
        out,
        "eval",
        {k: str(v) for k, v in vars(args).items() if k != "func"},
        args.seed,
        started,
        [str(report_path)],
    )
    print(json.dumps(payload, indent=2))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    started = _utcnow()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.inputs:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        rows.append(payload)
    if not rows:
        print("warning: no eval reports given; nothing to merge", file=sys.stderr)
        write_run_manifest(out, "report", {"inputs": []}, 0, started, [])
        return 0

    hashes = {r.get("config_hash") for r in rows}
    lines = [f"{'protocol':<14} {'shots':>5} {'aca':>7} {'auc':>7} {'f1':>7}"]
    lines.append("-" * 45)
    for r in sorted(rows, key=lambda r: str(r.get("protocol"))):
        shots = r.get("shots")
        lines.append(
            f"{r.get('protocol', '?'):<14} {str(shots) if shots else '-':>5} "
            f"{r.get('aca', float('nan')):>7.3f} {r.get('auc', float('nan')):>7.3f} "
            f"{r.get('f1', float('nan')):>7.3f}"
        )
    if len(hashes) > 1:
        lines.append(f"note: reports mix {len(hashes)} different checkpoint config hashes")
    table = "\n".join(lines)
    table_path = out / "report.txt"
    table_path.write_text(table + "\n", encoding="utf-8")
    print(table)

    plot_path = out / "report.png"
    _plot_report(rows, plot_path)
    write_run_manifest(
        out,
        "report",
        {"inputs": [str(p) for p in args.inputs]},
        0,
        started,
        [str(table_path), str(plot_path)],
    )
    return 0


def _plot_report(rows: list[dict], path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [
        f"{r.get('protocol')}" + (f"@{r['shots']}" if r.get("shots") else "") for r in rows
    ]
    fig, ax = plt.subplots(figsize=(max(4, len(rows) * 1.2), 3.2))
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], [r.get("aca", 0) for r in rows], width=0.2, label="ACA")
    ax.bar(list(x), [r.get("auc", 0) for r in rows], width=0.2, label="AUC")
    ax.bar([i + 0.2 for i in x], [r.get("f1", 0) for r in rows], width=0.2, label="F1")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fundusvl",
        description="Knowledge-enhanced fundus image-text pretraining and evaluation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus pair", formatter_class=fmt)
    p.add_argument("--categories", type=int, default=2, help="number of categories")
    p.add_argument("--per-class", type=int, default=8, help="samples per category per corpus")
    p.add_argument("--image-size", type=int, default=32, help="square image side")
    p.add_argument("--noise", type=float, default=0.05, help="pixel noise level in [0,1)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-corpus", help="build a manifest from raw images and captions", formatter_class=fmt)
    p.add_argument("--input", required=True, help="directory of images and caption .txt files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="book-corpus", help="corpus name")
    p.add_argument(
        "--dehaze-gamma",
        type=float,
        default=None,
        help="apply gamma dehazing before saving (0.8 brightens a dark-toned source)",
    )
    p.add_argument("--ffa-ref", default=None, help="reference FFA image for modality classification")
    p.add_argument("--oct-ref", default=None, help="reference OCT image for modality classification")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("pretrain", help="run mixed-batch contrastive pretraining", formatter_class=fmt)
    p.add_argument("--expert", required=True, help="expert-pair corpus manifest")
    p.add_argument("--public", required=True, help="labeled public corpus manifest")
    p.add_argument("--config", default=None, help="JSON config file (flags win over file values)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--batch-size", type=int, default=None, help="even batch size")
    p.add_argument("--epochs", type=int, default=None, help="training epochs")
    p.add_argument("--lr", type=float, default=None, help="base learning rate")
    p.add_argument("--alpha", type=float, default=None, help="revision loss weight")
    p.add_argument("--seed", type=int, default=None, help="training seed")
    p.add_argument("--encoder", choices=("tiny", "resnet_transformer"), default=None, help="encoder configuration")
    p.add_argument("--embed-dim", type=int, default=None, help="shared embedding width")
    p.add_argument("--image-size", type=int, default=None, help="input image side")
    p.add_argument(
        "--ablation",
        action="append",
        choices=("no-revision", "no-mixed", "fusion"),
        help="disable a training component (repeatable)",
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a transfer protocol", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file from pretrain")
    p.add_argument("--corpus", required=True, help="labeled corpus manifest")
    p.add_argument(
        "--protocol",
        required=True,
        choices=("zeroshot", "clipadapter", "tipadapter", "tipadapter-f", "linear"),
        help="transfer protocol",
    )
    p.add_argument("--shots", type=int, choices=(1, 5, 10), default=5, help="shots per class")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--seed", type=int, default=0, help="fold/shot selection seed")
    p.add_argument("--template", default=DEFAULT_PROMPT_TEMPLATE, help="class prompt template")
    p.add_argument("--plain-accuracy", action="store_true", help="report plain instead of balanced accuracy")
    p.add_argument("--tip-beta", type=float, default=5.5, help="cache affinity sharpness")
    p.add_argument("--tip-mix", type=float, default=1.0, help="cache logit blend weight")
    p.add_argument("--adapter-ratio", type=float, default=0.2, help="bottleneck residual blend ratio")
    p.add_argument("--out", default="eval-out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval reports into a table and plot", formatter_class=fmt)
    p.add_argument("--inputs", nargs="*", default=[], help="eval JSON files")
    p.add_argument("--out", default="report-out", help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NonFiniteLossError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
