"""Synthetic corpora and heuristic stand-ins for pretrained components.

Everything here is deterministic given a seed and small enough to train on
a single CPU core. The heuristics (color-statistic classifier, supervisor)
only make sense on the synthetic warm/dark images produced below.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np
import torch

from .spectrum import CATEGORIES, EmotionDistribution, SpectrumSource, category_index

# ----------------------------------------------------------- text clusters

CLUSTER_WORDS = {
    "awe": ["majestic", "vast", "towering", "breathtaking", "sublime", "grand", "immense", "wondrous"],
    "contentment": ["peaceful", "calm", "cozy", "serene", "relaxed", "gentle", "content", "restful"],
    "disgust": ["filthy", "rotten", "revolting", "grimy", "putrid", "slimy", "foul", "nauseating"],
    "fear": ["terrified", "ominous", "dreadful", "menacing", "haunted", "eerie", "trembling", "sinister"],
}
FILLER = ["the", "a", "scene", "with", "people", "near", "old", "house", "field", "sky", "water",
          "street", "tree", "it", "is", "and", "of", "in", "this", "picture", "shows", "there"]


def cluster_distribution(category: str, rng: np.random.Generator) -> EmotionDistribution:
    """Distribution peaked on ``category`` (weight 0.5-0.9), noise elsewhere."""
    main = rng.uniform(0.5, 0.9)
    rest = rng.dirichlet(np.ones(len(CATEGORIES) - 1)) * (1.0 - main)
    k = category_index(category)
    p = np.insert(rest, k, main)
    return EmotionDistribution(p / p.sum())


def cluster_text(category: str, rng: np.random.Generator, length=(6, 12)) -> str:
    n = int(rng.integers(length[0], length[1] + 1))
    n_key = int(rng.integers(2, 4))
    words = list(rng.choice(CLUSTER_WORDS[category], size=n_key)) + list(rng.choice(FILLER, size=n - n_key))
    rng.shuffle(words)
    return " ".join(words)


def cluster_corpus(categories=("awe", "contentment", "disgust"), per_cluster: int = 200,
                   seed: int = 0) -> list[SpectrumSource]:
    rng = np.random.default_rng(seed)
    out = []
    for cat in categories:
        for i in range(per_cluster):
            out.append(SpectrumSource(f"{cat}-{i:04d}", cluster_text(cat, rng), cluster_distribution(cat, rng)))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ------------------------------------------------------------ warm/dark images

PALETTES = {
    # hue range, saturation range, value range (HSV in [0, 1])
    "contentment": ((0.00, 0.14), (0.55, 0.95), (0.70, 1.00)),
    "fear": ((0.55, 0.75), (0.25, 0.70), (0.08, 0.38)),
}
HUE_WORDS = [(0.04, "red"), (0.09, "orange"), (0.16, "golden"), (0.45, "green"),
             (0.62, "blue"), (0.80, "purple"), (1.01, "red")]
SUBJECTS = ["a family", "a child", "two friends", "an old man", "a woman", "a dog", "a traveler", "a couple"]
PLACES = ["by the lake", "in the garden", "on the hill", "near the house", "in the street", "at the beach",
          "in the forest", "on the bridge"]
EMOTION_TEXT = {
    "contentment": ["feels peaceful and content", "rests in a calm and cozy moment",
                    "enjoys a serene and relaxed afternoon", "smiles in gentle restful comfort"],
    "fear": ["feels terrified and alone", "trembles in an ominous silence",
             "senses a menacing and eerie presence", "waits in dreadful sinister darkness"],
}


def _hsv_to_rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _palette_color(category: str, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    (h0, h1), (s0, s1), (v0, v1) = PALETTES[category]
    h = rng.uniform(h0, h1)
    return _hsv_to_rgb(h, rng.uniform(s0, s1), rng.uniform(v0, v1)), h


def hue_word(h: float) -> str:
    for limit, word in HUE_WORDS:
        if h % 1.0 < limit:
            return word
    return "gray"


def render_image(category: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth synthetic scene: two-color vertical gradient plus soft blobs."""
    top, _ = _palette_color(category, rng)
    bottom, _ = _palette_color(category, rng)
    y = np.linspace(0, 1, size)[:, None, None]
    img = np.broadcast_to(top * (1 - y) + bottom * y, (size, size, 3)).copy()
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(int(rng.integers(1, 4))):
        color, _ = _palette_color(category, rng)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.08, 0.22)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        alpha = np.clip((r - d) / 0.04 + 0.5, 0, 1)[..., None]
        img = img * (1 - alpha) + color * alpha
    return np.clip(img, 0, 1).transpose(2, 0, 1).astype(np.float32)


def emotion_text(category: str, rng: np.random.Generator) -> str:
    return f"{rng.choice(SUBJECTS)} {rng.choice(PLACES)} {rng.choice(EMOTION_TEXT[category])}"


@dataclass
class ToyCorpus:
    images: torch.Tensor  # (N, 3, 64, 64) in [0, 1]
    texts: list
    categories: list

    def __len__(self):
        return len(self.texts)


def warm_dark_corpus(n: int = 2000, seed: int = 0, size: int = 64) -> ToyCorpus:
    """Balanced warm-palette "contentment" / dark-palette "fear" image-text pairs."""
    rng = np.random.default_rng(seed)
    cats = ["contentment" if i % 2 == 0 else "fear" for i in range(n)]
    images = np.stack([render_image(c, rng, size) for c in cats])
    texts = [emotion_text(c, rng) for c in cats]
    return ToyCorpus(torch.from_numpy(images), texts, cats)


# ------------------------------------------------------------- heuristics


def warmth(images: torch.Tensor) -> torch.Tensor:
    """Warm-channel statistic: mean red minus mean blue, per image."""
    x = images if images.dim() == 4 else images.unsqueeze(0)
    return x[:, 0].mean(dim=(1, 2)) - x[:, 2].mean(dim=(1, 2))


def brightness(images: torch.Tensor) -> torch.Tensor:
    x = images if images.dim() == 4 else images.unsqueeze(0)
    return x.mean(dim=(1, 2, 3))


class ColorEmotionClassifier:
    """Emotion logits from color statistics; warm/bright -> contentment, cold/dark -> fear."""

    def __init__(self, gain: float = 8.0):
        self.gain = gain

    def __call__(self, image) -> np.ndarray:
        img = torch.as_tensor(image, dtype=torch.float32)
        w = float(warmth(img)[0])
        b = float(brightness(img)[0]) - 0.45
        score = self.gain * (w + b)
        logits = np.full(len(CATEGORIES), -2.0)
        logits[category_index("contentment")] = score
        logits[category_index("fear")] = -score
        logits[category_index("amusement")] = 0.5 * score - 1.0
        logits[category_index("sadness")] = -0.5 * score - 1.0
        return logits


class HeuristicSupervisor:
    """Offline MLLM stand-in answering the four factor prompts from color statistics.

    Only meaningful for the synthetic scenes of :func:`warm_dark_corpus`.
    """

    def __init__(self):
        self.calls = 0

    def ask(self, image, prompt_id: str, prompt: str = "") -> str:
        self.calls += 1
        img = torch.as_tensor(image, dtype=torch.float32)
        if img.dim() == 4:
            img = img[0]
        rgb = img.mean(dim=(1, 2)).numpy()
        h, s, v = colorsys.rgb_to_hsv(*np.clip(rgb, 0, 1))
        warm = float(warmth(img)[0]) > 0
        tone = ("bright", "warm") if warm else ("dim", "cold")
        word = hue_word(h)
        if prompt_id == "color_tone":
            return f"the color tone is {tone[0]} and {tone[1]} with soft {word} hues"
        if prompt_id == "object_category":
            return f"round {word} shapes float over a {tone[0]} {word} background"
        if prompt_id == "facial_expression":
            return "no faces are visible and the scene feels " + ("relaxed and calm" if warm else "tense and uneasy")
        if prompt_id == "overall_atmosphere":
            return "the overall atmosphere is " + ("cheerful warm and content" if warm else "dark cold and frightening")
        if prompt_id == "cot_objects":
            return f"round {word} shapes rest over a {tone[0]} background"
        if prompt_id == "cot_cues":
            return ("the warm light suggests peaceful and content feelings" if warm
                    else "the dim cold light suggests terrified and uneasy feelings")
        if prompt_id == "cot_description":
            return ("the shapes rest in a peaceful and content scene" if warm
                    else "the shapes wait in a terrified and uneasy scene")
        return f"the image looks {tone[0]} and {tone[1]}"


# ------------------------------------------------------- dataset stand-ins

TOY_VALENCE = {
    "peaceful": 0.85, "content": 0.82, "calm": 0.8, "cozy": 0.78, "serene": 0.84, "relaxed": 0.8,
    "gentle": 0.75, "cheerful": 0.9, "joyful": 0.95, "happy": 0.92, "restful": 0.74, "smiles": 0.85,
    "terrified": 0.08, "uneasy": 0.2, "ominous": 0.15, "dreadful": 0.1, "menacing": 0.12, "eerie": 0.2,
    "frightening": 0.1, "trembles": 0.2, "sinister": 0.1, "alone": 0.25, "filthy": 0.12, "rotten": 0.1,
    "scene": 0.5, "light": 0.55, "shapes": 0.5, "dark": 0.3,
}

TOY_TEXT_CATEGORIES = {
    **{w: "contentment" for w in CLUSTER_WORDS["contentment"] + ["cheerful", "smiles", "comfort"]},
    **{w: "fear" for w in CLUSTER_WORDS["fear"] + ["uneasy", "frightening", "trembles", "darkness"]},
    **{w: "awe" for w in CLUSTER_WORDS["awe"]},
    **{w: "disgust" for w in CLUSTER_WORDS["disgust"]},
}


class KeywordEmotionClassifier:
    """Text classifier counting category keywords; returns 8 scores."""

    def __init__(self, table: dict | None = None):
        self.table = TOY_TEXT_CATEGORIES if table is None else table

    def __call__(self, text: str) -> np.ndarray:
        from .text import normalize_words

        scores = np.zeros(len(CATEGORIES))
        for w in normalize_words(text):
            if w in self.table:
                scores[category_index(self.table[w])] += 1.0
        return scores


class ColorRetriever:
    """Text-image retriever for the synthetic scenes.

    Scores each image by how well its warmth agrees with the warm/cold
    vocabulary of the text, so warm texts rank warm images first.
    """

    WARM = {"warm", "bright", "peaceful", "content", "cheerful", "calm", "cozy", "golden", "orange", "red"}
    COLD = {"cold", "dim", "dark", "terrified", "uneasy", "frightening", "blue", "purple", "eerie"}

    def __call__(self, text: str, images) -> np.ndarray:
        from .text import normalize_words

        words = normalize_words(text)
        sign = sum(w in self.WARM for w in words) - sum(w in self.COLD for w in words)
        stack = torch.stack([torch.as_tensor(img, dtype=torch.float32) for img in images])
        return (np.sign(sign) * warmth(stack)).numpy().astype(np.float64)


class HueObjectClassifier:
    """Stand-in object classifier: softmax over 10 hue bins of the mean color."""

    def __init__(self, bins: int = 10, sharpness: float = 4.0):
        self.bins, self.sharpness = bins, sharpness

    def __call__(self, image) -> np.ndarray:
        img = torch.as_tensor(image, dtype=torch.float32)
        rgb = np.clip(img.mean(dim=(1, 2)).numpy(), 0, 1)
        h, s, _ = colorsys.rgb_to_hsv(*rgb)
        centers = (np.arange(self.bins) + 0.5) / self.bins
        gap = np.abs(((h - centers) + 0.5) % 1.0 - 0.5)
        logits = -self.sharpness * self.bins * gap * (0.5 + s)
        p = np.exp(logits - logits.max())
        return p / p.sum()


class BrightnessSceneClassifier:
    """Stand-in scene classifier: softmax over 4 brightness levels."""

    def __call__(self, image) -> np.ndarray:
        b = float(brightness(torch.as_tensor(image, dtype=torch.float32))[0])
        centers = np.array([0.15, 0.4, 0.65, 0.9])
        logits = -20.0 * np.abs(b - centers)
        p = np.exp(logits - logits.max())
        return p / p.sum()
