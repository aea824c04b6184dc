"""Dataset loading, validation and image preparation.

Record files are line-delimited JSON (UTF-8). Caption records carry
``image`` and ``caption``; VQA records carry ``image``, ``question``,
``answer``, ``answer_type`` (open|closed) and ``split`` (train|test).
Image paths are resolved relative to the record file's directory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

ANSWER_TYPES = ("open", "closed")
SPLITS = ("train", "test")

# The public radiology VQA benchmark's published split sizes, used as a
# sanity check when a manifest claims to be that dataset.
BENCHMARK_NAME = "vqa-rad"
BENCHMARK_TRAIN = 3064
BENCHMARK_TEST = 451

# Standardization defaults shared by the common pretrained vision encoders.
DEFAULT_MEAN = (0.48145466, 0.4578275, 0.40821073)
DEFAULT_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class CaptionRecord:
    image_path: str
    caption: str


@dataclass(frozen=True)
class VqaRecord:
    image_path: str
    question: str
    answer: str
    answer_type: str
    split: str


@dataclass
class DatasetManifest:
    records: list[VqaRecord]
    source_name: str = ""
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        tallies = {s: {t: 0 for t in ANSWER_TYPES} for s in SPLITS}
        for r in self.records:
            tallies[r.split][r.answer_type] += 1
        self.counts = {
            "by_split": {s: sum(tallies[s].values()) for s in SPLITS},
            "by_type": {t: sum(tallies[s][t] for s in SPLITS) for t in ANSWER_TYPES},
            "detail": tallies,
            "total": len(self.records),
        }

    def split_records(self, split: str) -> list[VqaRecord]:
        return [r for r in self.records if r.split == split]


def _read_lines(path: str | Path) -> list[tuple[int, dict]]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: record must be a JSON object")
            out.append((lineno, obj))
    return out


def _require(obj: dict, key: str, path: Path, lineno: int) -> str:
    if key not in obj or not isinstance(obj[key], str):
        raise ValueError(f"{path}:{lineno}: missing or non-string field {key!r}")
    return obj[key]


def load_caption_dataset(path: str | Path, check_images: bool = True) -> list[CaptionRecord]:
    """Load caption records in file order, validating every line."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, obj in _read_lines(path):
        image = _require(obj, "image", path, lineno)
        caption = _require(obj, "caption", path, lineno)
        if not caption.strip():
            raise ValueError(f"{path}:{lineno}: empty caption")
        if check_images and not (base / image).is_file():
            raise ValueError(f"{path}:{lineno}: image file not found: {base / image}")
        records.append(CaptionRecord(str(base / image), caption.strip()))
    return records


def load_vqa_dataset(path: str | Path, source_name: str = "",
                     check_images: bool = True) -> DatasetManifest:
    """Load VQA records into a manifest with recomputed split/type tallies."""
    path = Path(path)
    base = path.parent
    records: list[VqaRecord] = []
    seen: dict[tuple[str, str], str] = {}
    for lineno, obj in _read_lines(path):
        image = _require(obj, "image", path, lineno)
        question = _require(obj, "question", path, lineno)
        answer = _require(obj, "answer", path, lineno)
        answer_type = _require(obj, "answer_type", path, lineno)
        split = _require(obj, "split", path, lineno)
        if answer_type not in ANSWER_TYPES:
            raise ValueError(
                f"{path}:{lineno}: unknown answer_type {answer_type!r}, "
                f"expected one of {ANSWER_TYPES}")
        if split not in SPLITS:
            raise ValueError(
                f"{path}:{lineno}: unknown split {split!r}, expected one of {SPLITS}")
        if not question.strip() or not answer.strip():
            raise ValueError(f"{path}:{lineno}: empty question or answer")
        if check_images and not (base / image).is_file():
            raise ValueError(f"{path}:{lineno}: image file not found: {base / image}")
        key = (image, question.strip())
        if key in seen and seen[key] != split:
            raise ValueError(
                f"{path}:{lineno}: (image, question) pair appears in both train and test")
        seen.setdefault(key, split)
        records.append(VqaRecord(str(base / image), question.strip(),
                                 answer.strip(), answer_type, split))
    manifest = DatasetManifest(records, source_name=source_name)
    if source_name.lower() == BENCHMARK_NAME:
        got = (manifest.counts["by_split"]["train"], manifest.counts["by_split"]["test"])
        if got != (BENCHMARK_TRAIN, BENCHMARK_TEST):
            warnings.warn(
                f"manifest claims {BENCHMARK_NAME} but has train/test counts {got}, "
                f"expected ({BENCHMARK_TRAIN}, {BENCHMARK_TEST})", stacklevel=2)
    return manifest


# ---------------------------------------------------------------------------
# Image loading
# ---------------------------------------------------------------------------

def _triangle_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for antialiased linear resampling.

    Each output sample averages input samples under a triangle kernel whose
    support widens by in/out when downsampling, which is what keeps constant
    images constant and avoids aliasing.
    """
    scale = n_in / n_out
    support = max(1.0, scale)
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = int(np.floor(center - support))
        hi = int(np.ceil(center + support))
        for j in range(max(lo, 0), min(hi + 1, n_in)):
            t = abs((j + 0.5) - center) / support
            if t < 1.0:
                w[i, j] = 1.0 - t
        w[i] /= w[i].sum()
    return w


def resize_bilinear(image: np.ndarray, out_size: int) -> np.ndarray:
    """Separable antialiased linear resize of an (H, W, C) float array."""
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) array, got shape {image.shape}")
    h, w, _ = image.shape
    if (h, w) == (out_size, out_size):
        return image.copy()
    wy = _triangle_weights(h, out_size)
    wx = _triangle_weights(w, out_size)
    tmp = np.einsum("oh,hwc->owc", wy, image)
    return np.einsum("ow,hwc->hoc", wx, tmp)


def load_image(path: str | Path, image_size: int,
               mean: tuple[float, ...] = DEFAULT_MEAN,
               std: tuple[float, ...] = DEFAULT_STD) -> np.ndarray:
    """Decode, resize to (image_size, image_size, 3) and standardize.

    Grayscale inputs are replicated across channels; pixel values are scaled
    to [0, 1] before the per-channel mean/std standardization.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "L"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from None
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = resize_bilinear(arr / 255.0, image_size)
    return (arr - np.asarray(mean)) / np.asarray(std)
