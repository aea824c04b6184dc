"""Synthetic desk-scale corpora: deterministic images plus caption/VQA records.

Nothing here resembles real medical data; the generators exist so the
pipeline, tests and demos can run end to end without licensed datasets.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

ORGANS = ("liver", "spleen", "kidney", "heart", "left lung")
MARKERS = ("alpha", "beta", "gamma", "delta")


def save_pattern_image(path: Path, index: int, seed: int, size: int = 32) -> None:
    """Write a deterministic, index-distinct PNG; odd indices are grayscale."""
    rng = np.random.default_rng([seed, index])
    arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    # Stamp a coarse index-dependent block so images differ structurally too.
    block = (index * 7) % (size - 8)
    arr[block:block + 8, block:block + 8] = (index * 37) % 256
    if index % 2:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def make_caption_corpus(root: str | Path, n: int = 200, seed: int = 0) -> Path:
    """Generate images plus a caption record file; returns the record path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records_path = root / "captions.jsonl"
    with records_path.open("w", encoding="utf-8") as fh:
        for i in range(n):
            name = f"images/cap_{i:04d}.png"
            save_pattern_image(root / name, i, seed)
            marker = MARKERS[i % len(MARKERS)]
            fh.write(json.dumps({
                "image": name,
                "caption": f"synthetic scan {i} showing marker {marker}",
            }) + "\n")
    return records_path


def make_vqa_corpus(root: str | Path, n_train: int = 16, n_test: int = 8,
                    seed: int = 0) -> Path:
    """Generate a small VQA record file with train and test splits."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records_path = root / "vqa.jsonl"
    rng = np.random.default_rng(seed)
    with records_path.open("w", encoding="utf-8") as fh:
        for i in range(n_train + n_test):
            split = "train" if i < n_train else "test"
            name = f"images/vqa_{i:04d}.png"
            save_pattern_image(root / name, i, seed + 1)
            if i % 2 == 0:
                organ = ORGANS[int(rng.integers(len(ORGANS)))]
                rec = {"question": f"Which organ is highlighted in scan {i}?",
                       "answer": organ, "answer_type": "open"}
            else:
                rec = {"question": f"Is marker {MARKERS[i % len(MARKERS)]} visible in scan {i}?",
                       "answer": "yes" if rng.integers(2) else "no",
                       "answer_type": "closed"}
            rec.update({"image": name, "split": split})
            fh.write(json.dumps(rec) + "\n")
    return records_path


OVERFIT_TRIPLETS = (
    ("Is the spleen visible?", "yes", "closed"),
    ("Is there a fracture?", "no", "closed"),
    ("Is the heart enlarged?", "yes", "closed"),
    ("Is fluid present?", "no", "closed"),
    ("Which organ is highlighted?", "liver", "open"),
    ("Where is the mass located?", "spleen", "open"),
    ("What side shows opacity?", "left", "open"),
    ("Which chamber is dilated?", "atrium", "open"),
)


def make_overfit_corpus(root: str | Path, seed: int = 7) -> Path:
    """Eight fixed triplets with distinct images, for memorization runs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records_path = root / "overfit.jsonl"
    with records_path.open("w", encoding="utf-8") as fh:
        for i, (question, answer, answer_type) in enumerate(OVERFIT_TRIPLETS):
            name = f"images/train_{i}.png"
            save_pattern_image(root / name, i, seed)
            fh.write(json.dumps({
                "image": name, "question": question, "answer": answer,
                "answer_type": answer_type, "split": "train",
            }) + "\n")
    return records_path
