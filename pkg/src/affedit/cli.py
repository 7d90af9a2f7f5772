"""``affedit`` command-line entry point.

Errors are reported as one JSON object on stderr with a nonzero exit code:
``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import workflow
from .config import config_hash, load_config
from .errors import AffEditError, InvalidInputError

log = logging.getLogger("affedit")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--endpoint", default=None, help="supervisor HTTP endpoint (disables offline mode)")
    p.add_argument("--offline", action="store_true", help="force the offline stub supervisor and classifiers")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affedit", description="Affective image editing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-spectrum", help="train the emotional request encoder")
    _common(p)

    p = sub.add_parser("train-backbone", help="train the toy autoencoder and denoiser")
    _common(p)

    p = sub.add_parser("train-mapper", help="train the emotional mapper on the frozen backbone")
    _common(p)

    p = sub.add_parser("edit", help="edit an image towards the emotion in a text")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--t", type=int, default=None, help="noise level (default from config, 37)")
    p.add_argument("--mask", type=Path, default=None, help="0/255 PNG; white regions are editable")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("generate", help="generate an image from Gaussian noise")
    _common(p)
    p.add_argument("--text", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="compute FID, Sem-C and KLD over an evaluation manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = sub.add_parser("toy-corpus", help="write the synthetic warm/dark corpus as PNGs plus a manifest")
    _common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("dataset", help="annotation, validation and eval-split building")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    d = dsub.add_parser("annotate", help="add manifest images to the record store and annotate pending ones")
    _common(d)
    d.add_argument("--manifest", type=Path, default=None)
    d = dsub.add_parser("validate", help="run the keyword, emotion and retrieval filters")
    _common(d)
    d = dsub.add_parser("split", help="pair validated records with their nearest neighbour")
    _common(d)
    d.add_argument("--n", type=int, default=None)
    d.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args) -> dict:
    overrides = {"seed": args.seed, "supervisor.endpoint": args.endpoint}
    if args.endpoint:
        overrides["supervisor.offline"] = False
    if args.offline:
        overrides["supervisor.offline"] = True
    if getattr(args, "t", None) is not None:
        overrides["edit.t"] = args.t
    cfg = load_config(args.config, overrides)
    log.info("resolved config hash %s", config_hash(cfg))
    return cfg


def _print(obj: dict):
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_build_spectrum(args, cfg):
    _, history = workflow.build_spectrum(cfg)
    _print({"checkpoint": cfg["paths"]["spectrum_checkpoint"], "steps": len(history),
            "final_loss": history[-1]["loss"] if history else None, "config_hash": config_hash(cfg)})


def cmd_train_backbone(args, cfg):
    workflow.train_backbone(cfg)
    _print({"checkpoint": cfg["paths"]["backbone_checkpoint"], "config_hash": config_hash(cfg)})


def cmd_train_mapper(args, cfg):
    workflow.build_pipeline(cfg)
    _print({"checkpoint": cfg["paths"]["pipeline_checkpoint"], "config_hash": config_hash(cfg)})


def _pipeline(cfg):
    from .editing import Pipeline

    return Pipeline.load(cfg["paths"]["pipeline_checkpoint"], producer="train-mapper")


def cmd_edit(args, cfg):
    from .editing import EditRequest, edit, edit_masked, load_image, load_mask, save_image

    pipe = _pipeline(cfg)
    if not args.image.exists():
        raise InvalidInputError(f"image not found: {args.image}")
    image = load_image(args.image, pipe.autoencoder.image_size)
    mask = load_mask(args.mask) if args.mask is not None else None
    req = EditRequest(image, args.text, cfg["edit"]["t"], mask, cfg["seed"])
    result = edit_masked(req, pipe) if mask is not None else edit(req, pipe)
    save_image(result.image, args.out)
    _print({"out": str(args.out), "t": req.t, "seed": req.seed, "config_hash": config_hash(cfg)})


def cmd_generate(args, cfg):
    from .editing import generate, save_image

    pipe = _pipeline(cfg)
    result = generate(args.text, cfg["seed"], pipe)
    save_image(result.image, args.out)
    _print({"out": str(args.out), "seed": cfg["seed"], "config_hash": config_hash(cfg)})


def cmd_evaluate(args, cfg):
    from .checkpoint import load_into, read_header
    from .diffusion import Autoencoder
    from .editing import load_image
    from .evaluation import EvalHandles, LatentFeatures, evaluate_suite, load_eval_manifest
    from .toy import BrightnessSceneClassifier, HueObjectClassifier

    if not args.manifest.exists():
        raise InvalidInputError(f"manifest not found: {args.manifest}")
    records = load_eval_manifest(args.manifest)
    if not records:
        raise InvalidInputError(f"manifest {args.manifest} has no records")
    m = cfg["model"]
    ae = Autoencoder(latent_channels=m["latent_channels"], width=m["autoencoder_width"], image_size=m["image_size"])
    path = cfg["paths"]["backbone_checkpoint"]
    read_header(path, "train-backbone")
    load_into(path, {"autoencoder": ae}, "train-backbone")
    ae.eval()
    handles = EvalHandles(LatentFeatures(ae), HueObjectClassifier(), BrightnessSceneClassifier(),
                          workflow.emotion_classifier(cfg), lambda p: load_image(p, m["image_size"]),
                          cfg["evaluation"]["kld_direction"], cfg["evaluation"]["kld_eps"], cfg)
    report = evaluate_suite(records, handles, args.out)
    _print(report)
    if report["errors"]:
        raise AffEditError(f"{len(report['errors'])} metric(s) failed; see {args.out / 'report.json'}")


def cmd_toy_corpus(args, cfg):
    from .editing import save_image
    from .toy import warm_dark_corpus

    n = args.n or cfg["corpus"]["size"]
    corpus = warm_dark_corpus(n, seed=cfg["corpus"]["seed"], size=cfg["model"]["image_size"])
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "manifest.jsonl", "w") as fh:
        for i in range(n):
            name = f"toy-{i:05d}.png"
            save_image(corpus.images[i], args.out / "images" / name)
            fh.write(json.dumps({"id": f"toy-{i:05d}", "text": corpus.texts[i], "image_path": f"images/{name}",
                                 "category": corpus.categories[i]}) + "\n")
    _print({"manifest": str(args.out / "manifest.jsonl"), "n": n})


def _dataset_handles(cfg):
    from .dataset import PolarityLexicon, ValidationHandles
    from .editing import load_image
    from .toy import TOY_VALENCE, ColorRetriever, KeywordEmotionClassifier

    lex_path = cfg["paths"]["lexicon"]
    lexicon = PolarityLexicon.from_tsv(lex_path) if lex_path else PolarityLexicon(TOY_VALENCE, (0.0, 1.0))
    size = cfg["model"]["image_size"]
    return ValidationHandles(lexicon, KeywordEmotionClassifier(), workflow.emotion_classifier(cfg), ColorRetriever(),
                             lambda p: load_image(p, size), cfg["dataset"]["policy"], cfg["seed"])


def cmd_dataset(args, cfg):
    from .dataset import (AnnotationRecord, RecordStore, annotate_store, build_eval_split, load_templates,
                          validate_store, write_split)
    from .editing import load_image
    from .spectrum import estimate_distribution

    store = RecordStore(cfg["paths"]["store"])
    size = cfg["model"]["image_size"]
    loader = lambda p: load_image(p, size)  # noqa: E731
    if args.dataset_command == "annotate":
        manifest = args.manifest or (Path(cfg["paths"]["manifest"]) if cfg["paths"]["manifest"] else None)
        if manifest is not None:
            if not manifest.exists():
                raise InvalidInputError(f"manifest not found: {manifest}")
            base = manifest.parent
            for line in manifest.read_text().splitlines():
                if line.strip():
                    obj = json.loads(line)
                    if str(obj["id"]) not in store:
                        store.put(AnnotationRecord(str(obj["id"]), str((base / obj["image_path"]).resolve())))
        if len(store) == 0:
            raise InvalidInputError("record store is empty; pass --manifest")
        client = workflow.make_supervisor(cfg)
        counts = annotate_store(store, client, loader, load_templates(cfg["paths"]["templates"]),
                                cfg["dataset"]["max_retries"])
    elif args.dataset_command == "validate":
        counts = validate_store(store, _dataset_handles(cfg))
    else:
        clf = workflow.emotion_classifier(cfg)
        embed = lambda r: torch.nn.functional.adaptive_avg_pool2d(loader(r.image), 8).flatten().numpy()  # noqa: E731
        dist = lambda r: estimate_distribution(loader(r.image), clf)  # noqa: E731
        n = args.n if args.n is not None else cfg["dataset"]["split_size"]
        samples = build_eval_split(store.records(), embed, dist, n, cfg["dataset"]["percentile"])
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_split(args.out, samples)
        counts = {"split": len(samples), "out": str(args.out)}
    _print({"store": str(store.path), **counts, "config_hash": config_hash(cfg)})


COMMANDS = {
    "build-spectrum": cmd_build_spectrum,
    "train-backbone": cmd_train_backbone,
    "train-mapper": cmd_train_mapper,
    "edit": cmd_edit,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "toy-corpus": cmd_toy_corpus,
    "dataset": cmd_dataset,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.manual_seed(cfg["seed"])
        np.random.seed(cfg["seed"] % 2**32)
        COMMANDS[args.command](args, cfg)
    except AffEditError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
