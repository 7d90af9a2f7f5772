"""Training workflows shared by the CLI and the end-to-end tests.

Each stage reads its inputs from the config and writes one checkpoint:
spectrum encoder, backbone (autoencoder + denoiser), then the full
pipeline after mapper training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checksum, load_into, read_header, save_checkpoint
from .diffusion import Autoencoder, Denoiser, build_schedule, train_autoencoder, train_denoiser
from .editing import Pipeline, load_image
from .errors import ConfigurationError, InvalidInputError
from .mapper import EmotionalMapper, MapperConfig, SemanticEncoder
from .spectrum import (RequestEncoder, SpectrumSource, SpectrumTrainConfig, estimate_distribution,
                       train_spectrum, write_history_csv)
from .supervision import (DEFAULT_PROMPTS, HttpSupervisor, LossWeights, MapperBatch, RateLimiter, ResponseCache,
                          collect_many, train_mapper, write_loss_csv)
from .toy import ColorEmotionClassifier, HeuristicSupervisor, warm_dark_corpus

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    ids: list
    images: torch.Tensor  # (N, 3, H, W)
    texts: list


def load_corpus(cfg: dict) -> Corpus:
    """Images and texts from ``paths.manifest`` or, when unset, the synthetic warm/dark corpus."""
    manifest = cfg["paths"]["manifest"]
    size = cfg["model"]["image_size"]
    if manifest is None:
        toy = warm_dark_corpus(cfg["corpus"]["size"], seed=cfg["corpus"]["seed"], size=size)
        return Corpus([f"toy-{i:05d}" for i in range(len(toy))], toy.images, toy.texts)
    base = Path(manifest).parent
    ids, images, texts = [], [], []
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "image_path" not in obj:
                raise InvalidInputError(f"manifest record {obj.get('id')} has no image_path")
            ids.append(str(obj["id"]))
            images.append(load_image(base / obj["image_path"], size))
            texts.append(obj["text"])
    if not ids:
        raise InvalidInputError(f"manifest {manifest} is empty")
    return Corpus(ids, torch.stack(images), texts)


def emotion_classifier(cfg: dict):
    return ColorEmotionClassifier(gain=cfg["corpus"]["classifier_gain"])


def make_supervisor(cfg: dict):
    sc = cfg["supervisor"]
    if sc["offline"] or not sc["endpoint"]:
        return HeuristicSupervisor()
    return HttpSupervisor(sc["endpoint"], sc["model"], sc["api_key_env"], sc["timeout"], sc["max_retries"],
                          rate_limiter=RateLimiter(sc["min_interval"]))


def new_request_encoder(cfg: dict) -> RequestEncoder:
    m = cfg["model"]
    return RequestEncoder(m["vocab_size"], m["request_channels"], m["max_len"], seed=cfg["seed"])


def new_semantic_encoder(cfg: dict) -> SemanticEncoder:
    m = cfg["model"]
    return SemanticEncoder(m["vocab_size"], m["semantic_channels"], m["max_len"])


def new_backbone(cfg: dict) -> tuple[Autoencoder, Denoiser]:
    m = cfg["model"]
    ae = Autoencoder(latent_channels=m["latent_channels"], width=m["autoencoder_width"], image_size=m["image_size"])
    den = Denoiser(latent_channels=m["latent_channels"], width=m["denoiser_width"],
                   cond_channels=m["semantic_channels"])
    return ae, den


# --------------------------------------------------------------------- stages


def build_spectrum(cfg: dict, corpus: Corpus | None = None) -> tuple[RequestEncoder, list]:
    corpus = corpus or load_corpus(cfg)
    clf = emotion_classifier(cfg)
    sources = [SpectrumSource(i, t, estimate_distribution(img, clf))
               for i, t, img in zip(corpus.ids, corpus.texts, corpus.images)]
    sc = cfg["spectrum"]
    tc = SpectrumTrainConfig(steps=sc["steps"], batch_size=sc["batch_size"], lr=sc["lr"], alpha=sc["alpha"],
                             eps=sc["eps"], seed=cfg["seed"])
    torch.manual_seed(cfg["seed"])
    encoder, history = train_spectrum(sources, tc, new_request_encoder(cfg))
    path = Path(cfg["paths"]["spectrum_checkpoint"])
    save_checkpoint(path, {"request_encoder": encoder}, {"request_encoder": encoder.config(), "seed": cfg["seed"],
                                                         "categories": _categories()})
    write_history_csv(path.with_suffix(".loss.csv"), history)
    return encoder, history


def _categories():
    from .spectrum import CATEGORIES

    return list(CATEGORIES)


def corpus_responses(cfg: dict, corpus: Corpus, semantic_encoder: SemanticEncoder) -> torch.Tensor:
    """Encoded supervisor answers ``(N, N^r, C^s, N^l)``; empty answers are replaced by
    the mean of the image's other answers so the row stays usable.
    """
    cache = ResponseCache(cfg["paths"]["cache"])
    answers = collect_many(list(corpus.images), DEFAULT_PROMPTS, make_supervisor(cfg), cache,
                           cfg["supervisor"]["workers"])
    rows = []
    with torch.no_grad():
        for resp in answers:
            good = [r.text for r in resp if not r.flagged]
            if not good:
                raise InvalidInputError("supervisor returned no usable answer for an image")
            emb = semantic_encoder.encode(good)
            if len(good) < len(resp):
                emb = torch.cat([emb, emb.mean(0, keepdim=True).expand(len(resp) - len(good), -1, -1)])
            rows.append(emb)
    return torch.stack(rows)


def train_backbone(cfg: dict, corpus: Corpus | None = None):
    corpus = corpus or load_corpus(cfg)
    torch.manual_seed(cfg["seed"])
    ae, den = new_backbone(cfg)
    bc = cfg["backbone"]
    train_autoencoder(ae, corpus.images, steps=bc["autoencoder_steps"], batch_size=32, lr=bc["autoencoder_lr"],
                      seed=cfg["seed"])
    latents = encode_all(ae, corpus.images)
    responses = corpus_responses(cfg, corpus, new_semantic_encoder(cfg))

    def conditions(idx, gen):
        pick = torch.randint(0, responses.shape[1], (len(idx),), generator=gen)
        return responses[idx, pick]

    sc = cfg["schedule"]
    schedule = build_schedule(sc["T"], sc["kind"], sc["eta"])
    train_denoiser(den, latents, conditions, schedule, steps=bc["denoiser_steps"], batch_size=bc["batch_size"],
                   lr=bc["denoiser_lr"], seed=cfg["seed"])
    save_checkpoint(cfg["paths"]["backbone_checkpoint"], {"autoencoder": ae, "denoiser": den},
                    {"model": cfg["model"], "seed": cfg["seed"]})
    return ae, den


def encode_all(ae: Autoencoder, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([ae.encode(images[i:i + chunk]) for i in range(0, len(images), chunk)])


def load_spectrum(cfg: dict) -> RequestEncoder:
    path = cfg["paths"]["spectrum_checkpoint"]
    header = read_header(path, "build-spectrum")
    enc = RequestEncoder(**header["request_encoder"])
    load_into(path, {"request_encoder": enc}, "build-spectrum")
    return enc.freeze()


def load_backbone(cfg: dict) -> tuple[Autoencoder, Denoiser]:
    path = cfg["paths"]["backbone_checkpoint"]
    header = read_header(path, "train-backbone")
    if header["model"] != cfg["model"]:
        raise ConfigurationError(f"{path} was trained with different model dimensions")
    ae, den = new_backbone(cfg)
    load_into(path, {"autoencoder": ae, "denoiser": den}, "train-backbone")
    for m in (ae, den):
        m.eval().requires_grad_(False)
    return ae, den


def build_pipeline(cfg: dict, corpus: Corpus | None = None, request_encoder=None, backbone=None) -> Pipeline:
    """Train the mapper on top of the frozen spectrum encoder and backbone."""
    corpus = corpus or load_corpus(cfg)
    enc = request_encoder or load_spectrum(cfg)
    ae, den = backbone or load_backbone(cfg)
    sem = new_semantic_encoder(cfg)
    m = cfg["model"]
    torch.manual_seed(cfg["seed"])
    mapper = EmotionalMapper(MapperConfig(m["mapper_depth"], m["mapper_heads"], m["semantic_channels"],
                                          m["request_channels"], m["max_len"]))
    latents = encode_all(ae, corpus.images)
    responses = corpus_responses(cfg, corpus, sem)
    with torch.no_grad():
        requests = enc.encode(corpus.texts)
        semantics = sem.encode(corpus.texts)
    sc = cfg["schedule"]
    schedule = build_schedule(sc["T"], sc["kind"], sc["eta"])
    mc = cfg["mapper"]
    n = len(corpus.ids)

    def batches(gen):
        idx = torch.randint(0, n, (min(mc["batch_size"], n),), generator=gen)
        return MapperBatch(requests[idx], semantics[idx], responses[idx], latents[idx])

    frozen = [enc, sem, ae, den]
    before = checksum(*frozen)
    state = train_mapper(batches, mapper, den, schedule, mc["steps"], frozen, lr=mc["lr"], seed=cfg["seed"],
                         weights=LossWeights(mc["beta"]), squared=mc["squared"])
    assert checksum(*frozen) == before
    pipe = Pipeline(enc, sem, mapper, ae, den, schedule).freeze()
    path = Path(cfg["paths"]["pipeline_checkpoint"])
    pipe.save(path)
    write_loss_csv(path.with_suffix(".loss.csv"), state.history)
    return pipe


def train_all(cfg: dict) -> Pipeline:
    corpus = load_corpus(cfg)
    enc, _ = build_spectrum(cfg, corpus)
    backbone = train_backbone(cfg, corpus)
    return build_pipeline(cfg, corpus, enc.freeze(), backbone)


def warm_statistic(images: torch.Tensor) -> np.ndarray:
    from .toy import warmth

    return warmth(images).numpy()
