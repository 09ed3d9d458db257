"""Command-line entry point; one batch-oriented command per workflow.

Exit codes: 0 success, 1 typed runtime failure, 2 usage error (argparse),
3 config parse failure.  Every run writes a resolved-config snapshot next
to its outputs so experiments are machine-diffable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import FormatError, ModmaeError
from .corpus import load_manifest, save_manifest, scan_corpus, write_volume
from .training import (
    ManifestSource,
    RunConfig,
    SynthSpec,
    SynthSource,
    finetune,
    load_checkpoint,
    pretrain_loop,
    synth_corpus,
)

_CONFIG_ERROR_EXIT = 3


def _limit_threads(n: int) -> None:
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=max(1, n))
    except ImportError:  # pragma: no cover - dependency is declared
        pass


def _load_config_file(path) -> tuple[RunConfig, dict | None]:
    """Run config plus the optional "data" section from one JSON file."""
    if path is None:
        return RunConfig(), None
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: expected a JSON object")
    data_spec = raw.pop("data", None)
    return RunConfig.from_dict(raw), data_spec


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.preprocess.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg.validate()


def _data_source(data_spec, args, cfg: RunConfig):
    """Build the session source; --data/--labels/--classes flags win."""
    data_path = getattr(args, "data", None)
    if data_path is not None:
        manifest = load_manifest(data_path)
        classes = None
        classes_path = getattr(args, "classes", None)
        if classes_path:
            with open(classes_path, "r", encoding="utf-8") as fh:
                classes = json.load(fh)
        return ManifestSource(manifest, labels_dir=getattr(args, "labels", None),
                              classes=classes)
    if data_spec is None:
        raise ModmaeError("no data given: pass --data or a config data section")
    kind = data_spec.get("kind", "synth")
    if kind == "synth":
        spec = SynthSpec.from_dict({k: v for k, v in data_spec.items()
                                    if k != "kind"})
        return SynthSource(spec, seed=cfg.seed)
    if kind == "manifest":
        manifest = load_manifest(data_spec["path"])
        classes = None
        if data_spec.get("classes"):
            with open(data_spec["classes"], "r", encoding="utf-8") as fh:
                classes = json.load(fh)
        return ManifestSource(manifest, labels_dir=data_spec.get("labels"),
                              classes=classes)
    raise ModmaeError(f"unknown data kind {kind!r}")


def _write_snapshot(out_dir, command: str, cfg: RunConfig | None,
                    extra: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "extra": extra}
    if cfg is not None:
        snapshot["config"] = cfg.to_dict()
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------- commands

def _cmd_build_dict(args, cfg, data_spec) -> int:
    manifest = scan_corpus(args.root)
    out = Path(args.out or "manifest.json")
    save_manifest(manifest, out)
    _write_snapshot(out.parent, "build-dict", None,
                    {"root": str(args.root), "out": str(out),
                     "n_cases": len(manifest)})
    print(f"wrote manifest with {len(manifest)} cases to {out}")
    return 0


def _cmd_synth_data(args, cfg, data_spec) -> int:
    dims = tuple(int(d) for d in args.dims.split(","))
    if len(dims) == 1:
        dims = dims * 3
    spec = SynthSpec(
        modalities=tuple(args.modalities.split(",")),
        dims=dims,
        lesion=args.lesion,
        lesion_fraction=args.lesion_fraction,
        n_cases=args.cases,
    )
    out = Path(args.out or "synth_data")
    manifest = synth_corpus(out, spec, seed=args.seed or 0)
    _write_snapshot(out, "synth-data", None,
                    {"spec": spec.to_dict(), "seed": args.seed or 0})
    print(f"wrote {len(manifest)} synthetic cases to {out}")
    return 0


def _cmd_pretrain(args, cfg, data_spec) -> int:
    source = _data_source(data_spec, args, cfg)
    out = Path(args.out or cfg.checkpoint_dir)
    ckpt, metrics_path = pretrain_loop(cfg, source, out_dir=out,
                                       resume_from=args.resume)
    _write_snapshot(out, "pretrain", cfg,
                    {"resume": args.resume, "metrics": str(metrics_path)})
    print(f"pretraining done: step {ckpt.step}, checkpoint in {out}")
    return 0


def _cmd_gradcheck(args, cfg, data_spec) -> int:
    import numpy as np

    from .modality_embed import EmbeddingSource
    from .network import init_params
    from .objectives import gradcheck
    from .preprocess import evaluation_config, preprocess_session
    from .tokenizer import BatchConfig, assemble_batch
    from .training import as_source

    source = (as_source(_data_source(data_spec, args, cfg), seed=cfg.seed)
              if (data_spec is not None or getattr(args, "data", None))
              else SynthSource(SynthSpec(dims=(16, 16, 16), n_cases=2),
                               seed=cfg.seed))
    pre_cfg = evaluation_config(cfg.preprocess)
    ids = source.case_ids()[:2]
    prepared = [preprocess_session(source.load(cid), pre_cfg) for cid in ids]
    batch = assemble_batch(
        prepared,
        BatchConfig(patch_size=cfg.preprocess.patch_size, rho=cfg.rho,
                    p_drop=cfg.p_drop, seed=cfg.seed),
        EmbeddingSource(mode="hash", dim=cfg.net.d_m),
    )
    params = init_params(cfg.net, seed=cfg.seed, scheme="dense",
                         dtype=np.float64)
    report = gradcheck(params, cfg.net, batch, h=args.h, tol_rel=args.tol,
                       coords_per_tensor=args.coords_per_tensor, seed=cfg.seed)
    print(f"gradcheck: max relative error {report.max_rel_error:.3e} over "
          f"{report.n_checked} coordinates (tolerance {report.tolerance:g}), "
          f"worst at {report.worst[0]}[{report.worst[1]}]")
    if args.out:
        _write_snapshot(args.out, "gradcheck", cfg, {
            "max_rel_error": report.max_rel_error,
            "n_checked": report.n_checked,
            "passed": report.passed,
        })
    return 0 if report.passed else 1


def _cmd_finetune(args, cfg, data_spec) -> int:
    source = _data_source(data_spec, args, cfg)
    out = Path(args.out or cfg.checkpoint_dir)
    ckpt = finetune(cfg, args.task, args.init, source, out_dir=out)
    _write_snapshot(out, "finetune", cfg,
                    {"task": args.task, "init": str(args.init),
                     "best_metric": ckpt.meta.get("best_metric")})
    print(f"finetune done: best {ckpt.meta.get('metric_name')} = "
          f"{ckpt.meta.get('best_metric'):.4f}, checkpoint in {out}")
    return 0


def _cmd_evaluate(args, cfg, data_spec) -> int:
    from .evaluation import AvailabilityConfig, availability_matrix_eval

    source = _data_source(data_spec, args, cfg)
    configs = None
    if args.matrix and args.matrix != "default":
        with open(args.matrix, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        configs = [AvailabilityConfig(r["name"], frozenset(r["available"]))
                   for r in raw]
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    rows, text = availability_matrix_eval(
        args.checkpoint, source, configs=configs, task=args.task,
        out_csv=out / "matrix.csv",
    )
    _write_snapshot(out, "evaluate", None,
                    {"checkpoint": str(args.checkpoint), "task": args.task,
                     "matrix": args.matrix or "default"})
    print(text, end="")
    return 0


def _cmd_impute(args, cfg, data_spec) -> int:
    from .corpus import RawVolume
    from .evaluation import impute_modality

    source = _data_source(data_spec, args, cfg)
    session = source.load(args.case)
    ckpt = load_checkpoint(args.checkpoint)
    volume = impute_modality(ckpt, session, args.target)
    out = Path(args.out or f"{args.case}_{args.target}_imputed.nii")
    out.parent.mkdir(parents=True, exist_ok=True)
    spacing = next(iter(session.volumes.values())).spacing
    write_volume(RawVolume(dims=volume.dims, spacing=spacing,
                           voxels=volume.voxels, modality=args.target), out)
    _write_snapshot(out.parent, "impute", None,
                    {"checkpoint": str(args.checkpoint), "case": args.case,
                     "target": args.target, "out": str(out)})
    print(f"imputed {args.target} for case {args.case} -> {out}")
    return 0


def _cmd_report(args, cfg, data_spec) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = []
    with open(args.metrics, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ModmaeError(f"{args.metrics}: no metric records")
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)

    steps = [r["step"] for r in records]
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(11, 4))
    for key in ("l_total", "l_mae", "l_var", "l_cov"):
        ax_loss.plot(steps, [r[key] for r in records], label=key)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend()
    ax_lr.plot(steps, [r["lr"] for r in records], label="lr")
    ax_lr.plot(steps, [r["grad_norm"] for r in records], label="grad_norm")
    ax_lr.set_xlabel("step")
    ax_lr.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)

    series = ("l_total", "l_mae", "l_var", "l_cov", "lr", "grad_norm")
    lines = ["series,first,last,min,mean"]
    for key in series:
        values = [r[key] for r in records]
        lines.append(f"{key},{values[0]!r},{values[-1]!r},"
                     f"{min(values)!r},{sum(values) / len(values)!r}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_snapshot(out, "report", None,
                    {"metrics": str(args.metrics), "n_steps": len(records)})
    print(f"report written to {out}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modmae",
        description="Modality-conditioned masked autoencoder workflows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--config", type=str, default=None,
                       help="run config JSON file")
        p.add_argument("--out", type=str, default=None,
                       help="output file or directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker/BLAS thread cap (1 = bit-reproducible)")

    p = sub.add_parser("build-dict", help="scan a corpus into a manifest")
    common(p)
    p.add_argument("--root", required=True, help="corpus root directory")
    p.set_defaults(func=_cmd_build_dict)

    p = sub.add_parser("synth-data", help="write a synthetic phantom corpus")
    common(p)
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--modalities", type=str, default="t1,flair")
    p.add_argument("--dims", type=str, default="32,32,32")
    p.add_argument("--lesion", action="store_true")
    p.add_argument("--lesion-fraction", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.add_argument("--data", type=str, default=None, help="manifest JSON")
    p.add_argument("--labels", type=str, default=None)
    p.add_argument("--classes", type=str, default=None)
    p.add_argument("--resume", type=str, default=None, help="checkpoint")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.add_argument("--data", type=str, default=None, help="manifest JSON")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords-per-tensor", type=int, default=2)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("finetune", help="adapt the encoder to a task")
    common(p)
    p.add_argument("--task", required=True,
                   choices=("segmentation", "classification"))
    p.add_argument("--init", required=True, help="pretraining checkpoint")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--labels", type=str, default=None)
    p.add_argument("--classes", type=str, default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="modality-availability matrix eval")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--labels", type=str, default=None)
    p.add_argument("--classes", type=str, default=None)
    p.add_argument("--matrix", type=str, default="default",
                   help='"default" or a JSON list of configs')
    p.add_argument("--task", type=str, default="segmentation",
                   choices=("segmentation", "classification"))
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("impute", help="reconstruct an absent modality")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--case", required=True)
    p.add_argument("--target", required=True)
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("report", help="render a metrics log to plots")
    common(p)
    p.add_argument("--metrics", required=True, help="metrics JSONL file")
    p.set_defaults(func=_cmd_report)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)

    try:
        cfg, data_spec = _load_config_file(args.config)
        cfg = _apply_overrides(cfg, args)
    except (json.JSONDecodeError, OSError, ModmaeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _CONFIG_ERROR_EXIT

    _limit_threads(cfg.threads)
    try:
        return args.func(args, cfg, data_spec)
    except ModmaeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
