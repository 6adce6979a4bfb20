"""Operator command line: preprocess, train, ensemble, evaluate, predict, serve.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
Results go to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataset, ensemble, imaging, metrics, network, training
from .errors import (
    CorruptBundle,
    DuplicatePath,
    EmptyImage,
    EmptySample,
    ImageTooSmall,
    InvalidRatio,
    MalformedImage,
    ManifestParseError,
    NonFiniteLoss,
    ShapeMismatch,
    UnsupportedFormat,
    WeightsUnavailable,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MODEL = 3

_DATA_ERRORS = (
    ManifestParseError,
    DuplicatePath,
    InvalidRatio,
    MalformedImage,
    UnsupportedFormat,
    EmptyImage,
    ImageTooSmall,
    ShapeMismatch,
    EmptySample,
    FileNotFoundError,
    NonFiniteLoss,
)
_MODEL_ERRORS = (WeightsUnavailable, CorruptBundle)


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage errors instead of exiting with code 2."""

    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise _UsageExit(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="woundcare", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="cache resized + CLAHE images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=imaging.INPUT_SIZE)
    p.add_argument("--tile-grid", type=int, default=8)
    p.add_argument("--clip-factor", type=float, default=1.0)

    p = sub.add_parser("train", help="fine-tune classifier variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True, choices=["A", "B", "C", "all"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON training-config overrides")

    p = sub.add_parser("ensemble", help="assemble a 3-member bundle directory")
    p.add_argument("--model", action="append", required=True,
                   help="path to a trained model bundle (give three times)")
    p.add_argument("--out", required=True)
    p.add_argument("--version", default="dev")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("evaluate", help="metrics + ROC exports for a manifest")
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--saliency", type=int, default=0,
                   help="also export saliency heat maps for the first N images")

    p = sub.add_parser("predict", help="assess one image, print 9 label lines")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("serve", help="run the HTTP assessment service")
    p.add_argument("--bundle", required=True)
    p.add_argument("--storage", default="woundcare.sqlite")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _cmd_preprocess(args) -> int:
    entries = dataset.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = imaging.ClaheConfig(tile_grid=args.tile_grid, clip_factor=args.clip_factor)
    cached = []
    for i, entry in enumerate(entries):
        img = imaging.decode_image(Path(entry.image_path).read_bytes())
        img = imaging.apply_clahe(imaging.resize_image(img, args.size), cfg)
        name = f"{i:05d}.png"
        from PIL import Image

        Image.fromarray(img.pixels, mode="RGB").save(out_dir / name)
        cached.append(
            dataset.ManifestEntry(
                image_path=str(out_dir / name),
                labels=entry.labels,
                source_tag=entry.source_tag,
            )
        )
    dataset.save_manifest(cached, out_dir / "manifest.csv")
    print(f"cached {len(cached)} images under {out_dir}")
    return EXIT_OK


def _train_config(args) -> tuple[training.TrainConfig, dict]:
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    phase1 = training.PhaseConfig(
        "adam",
        overrides.get("phase1", {}).get("learning_rate", 1e-3),
        overrides.get("phase1", {}).get("epochs", 30),
    )
    phase2 = training.PhaseConfig(
        "sgd",
        overrides.get("phase2", {}).get("learning_rate", 1e-4),
        overrides.get("phase2", {}).get("epochs", 50),
    )
    augment_cfg = overrides.get("augment", {})
    augment = None if augment_cfg is None else training.AugmentConfig(**augment_cfg)
    cfg = training.TrainConfig(
        batch_size=overrides.get("batch_size", 64),
        phase1=phase1,
        phase2=phase2,
        augment=augment,
        seed=args.seed,
    )
    meta = {
        "input_size": overrides.get("input_size", imaging.INPUT_SIZE),
        "pretrained": overrides.get("pretrained", True),
        "split_ratio": overrides.get("split_ratio", 0.8),
    }
    return cfg, meta


def _cmd_train(args) -> int:
    entries = dataset.load_manifest(args.manifest)
    cfg, meta = _train_config(args)
    split = dataset.split_dataset(entries, meta["split_ratio"], args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ["A", "B", "C"] if args.variant == "all" else [args.variant]
    for vid in variants:
        print(f"training variant {vid} "
              f"(freeze index {network.VARIANTS[vid].freeze_through_index})",
              file=sys.stderr)
        handle = network.build_model(
            network.VARIANTS[vid],
            input_size=meta["input_size"],
            pretrained=meta["pretrained"],
        )
        handle, report = training.train(handle, split, cfg, checkpoint_dir=out_dir)
        network.save_model(handle, out_dir / f"model-{vid}.pt")
        report.save(out_dir / f"train-report-{vid}.jsonl")
        print(f"variant {vid}: {len(report.records)} epochs, "
              f"bundle {out_dir / f'model-{vid}.pt'}")
    return EXIT_OK


def _cmd_ensemble(args) -> int:
    if len(args.model) != 3:
        print("error: exactly three --model paths are required", file=sys.stderr)
        return EXIT_USAGE
    members = tuple(network.load_model(p) for p in args.model)
    bundle = ensemble.EnsembleBundle(
        members=members, decision_threshold=args.threshold, version=args.version
    )
    ensemble.save_bundle(bundle, args.out)
    print(f"ensemble {args.version} written to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    bundle = ensemble.load_bundle(args.bundle)
    entries = dataset.load_manifest(args.manifest)
    result = metrics.evaluate_ensemble(bundle, entries)
    out_dir = Path(args.out)
    metrics.write_evaluation(result, out_dir)
    if args.saliency > 0:
        member = bundle.members[0]
        for i, entry in enumerate(entries[: args.saliency]):
            img = imaging.decode_image(Path(entry.image_path).read_bytes())
            prepared = imaging.apply_clahe(
                imaging.resize_image(img, bundle.input_size)
            )
            model_input = imaging.to_model_input(prepared, bundle.input_size)
            probs = network.predict(member, [model_input])[0]
            label_index = int(probs.argmax())
            smap = metrics.saliency_map(member, model_input, label_index)
            name = f"saliency_{i:03d}_{dataset.LABELS[label_index]}.png"
            metrics.blend_saliency(smap, prepared.pixels).save(out_dir / name)
    degenerate = [n for n, ev in result.labels.items() if ev.roc is None]
    print(f"evaluated {len(entries)} images; report in {out_dir}")
    if degenerate:
        print(f"ROC degenerate (single-class truth): {', '.join(degenerate)}",
              file=sys.stderr)
    return EXIT_OK


def _cmd_predict(args) -> int:
    bundle = ensemble.load_bundle(args.bundle)
    img = imaging.decode_image(Path(args.image).read_bytes())
    assessment = ensemble.assess(bundle, img)
    for la in assessment.labels:
        print(f"{la.label}\t{int(la.decision)}\t{la.mean_probability:.4f}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(bundle_path=args.bundle, storage_path=args.storage)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "ensemble": _cmd_ensemble,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit:
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _MODEL_ERRORS as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
