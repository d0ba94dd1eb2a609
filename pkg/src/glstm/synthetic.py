"""Small synthetic image/caption datasets for demos and tests.

Each image is a noisy concatenation of a one-hot noun and a one-hot verb;
its captions mention that noun and verb inside a few templates of different
lengths, so the two views are linearly related.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from glstm.container import atomic_write_text
from glstm.textcorpus import write_features_binary, write_features_csv

NOUNS = ["dog", "cat", "bird", "horse", "car", "boat", "child", "man", "woman", "ball", "tree", "bike"]
VERBS = ["runs", "sits", "jumps", "swims", "rides", "plays", "waits", "stands"]
TEMPLATES = [
    "a {n} {v}",
    "the {n} {v} in the park",
    "{n} {v}",
    "a small {n} {v} on the green grass today",
    "one {n} {v} near the water",
]

FEATURE_DIM = len(NOUNS) + len(VERBS)


def synthetic_items(
    n_images: int,
    captions_per_image: int = 3,
    seed: int = 0,
    noise: float = 0.05,
    splits: tuple[float, float] = (0.6, 0.2),
) -> list[dict]:
    """Items as dicts ``{id, feature, captions, split}``.

    The first ``splits[0]`` fraction is train, the next ``splits[1]`` val,
    the rest test.
    """
    rng = np.random.default_rng(seed)
    n_train = int(round(splits[0] * n_images))
    n_val = int(round(splits[1] * n_images))
    items = []
    for i in range(n_images):
        noun = NOUNS[i % len(NOUNS)]
        verb = VERBS[(i // len(NOUNS) + 3 * i) % len(VERBS)]
        feature = rng.normal(0.0, noise, FEATURE_DIM)
        feature[NOUNS.index(noun)] += 1.0
        feature[len(NOUNS) + VERBS.index(verb)] += 1.0
        picks = rng.choice(len(TEMPLATES), size=captions_per_image, replace=captions_per_image > len(TEMPLATES))
        captions = [TEMPLATES[k].format(n=noun, v=verb) for k in picks]
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        items.append({"id": f"img{i:04d}", "feature": feature, "captions": captions, "split": split})
    return items


def write_dataset(directory, items: list[dict], feature_format: str = "csv") -> Path:
    """Write a manifest plus one shared feature file; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    matrix = np.array([it["feature"] for it in items])
    if feature_format == "csv":
        fname = "features.csv"
        write_features_csv(directory / fname, matrix)
    elif feature_format == "binary":
        fname = "features.glsf"
        write_features_binary(directory / fname, matrix)
    else:
        raise ValueError(f"unknown feature format {feature_format!r}")
    manifest = {
        "feature_dim": int(matrix.shape[1]),
        "feature_file": fname,
        "items": [
            {"id": it["id"], "feature_row": k, "captions": list(it["captions"]), "split": it["split"]}
            for k, it in enumerate(items)
        ],
    }
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=1))
    return path
