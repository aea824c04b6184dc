"""Instruction template assembly and visual-embedding splicing.

Two templates exist: the captioning template used by stage-1 training and
the VQA template used by stage 2 and inference. Both are literal strings
with a single image slot; casing of the image tags intentionally differs
between the two and is preserved verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import SPECIAL_TOKENS, ByteTokenizer

CAPTION_SLOT = "<ImageHere>"
VQA_SLOT = "<ImageFeature>"

CAPTION_SKELETON = "<Img>" + CAPTION_SLOT + "</Img> [caption] {instruction}"

# Kept as one constant: the exact spacing around the image tags is the single
# most fragile piece of the wire format.
VQA_SKELETON = (
    "[INST] <img>" + VQA_SLOT + "</img> [VQA] "
    "Based on the image, respond to this question with a short answer: "
    "{question} [/INST]"
)

# Only the first caption instruction is fixed by the upstream recipe; the
# other three are shipped defaults and may be overridden via config.
DEFAULT_CAPTION_INSTRUCTIONS = (
    "Briefly describe this image",
    "Describe this image in detail",
    "What does this image show?",
    "Summarize the visual content of this image",
)

# Strings that may never appear inside user-supplied question text.
RESERVED_MARKERS = tuple(SPECIAL_TOKENS) + (CAPTION_SLOT, VQA_SLOT)


@dataclass(frozen=True)
class AssembledPrompt:
    """A template split around its image slot."""

    pre_image_text: str
    post_image_text: str
    image_slot: str

    @property
    def full_text(self) -> str:
        return self.pre_image_text + self.image_slot + self.post_image_text


def assemble_caption_prompt(instruction_index: int | None = None,
                            rng: np.random.Generator | None = None,
                            pool: tuple[str, ...] = DEFAULT_CAPTION_INSTRUCTIONS
                            ) -> AssembledPrompt:
    """Stage-1 captioning prompt; the instruction comes from a pool of four."""
    if len(pool) != 4:
        raise ValueError(f"caption instruction pool must hold 4 entries, got {len(pool)}")
    if instruction_index is None:
        if rng is None:
            raise ValueError("need an instruction_index or an rng to draw one")
        instruction_index = int(rng.integers(0, len(pool)))
    if not 0 <= instruction_index < len(pool):
        raise ValueError(f"instruction index {instruction_index} outside [0, {len(pool)})")
    text = CAPTION_SKELETON.format(instruction=pool[instruction_index])
    pre, post = text.split(CAPTION_SLOT)
    return AssembledPrompt(pre, post, CAPTION_SLOT)


def assemble_vqa_prompt(question: str) -> AssembledPrompt:
    """The single VQA prompt, identical for open and closed questions."""
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    for marker in RESERVED_MARKERS:
        if marker in question:
            raise ValueError(f"question contains reserved marker {marker!r}")
    text = VQA_SKELETON.format(question=question)
    pre, post = text.split(VQA_SLOT)
    return AssembledPrompt(pre, post, VQA_SLOT)


def splice_embeddings(prompt: AssembledPrompt, visual: Tensor,
                      tokenizer: ByteTokenizer, embedding_table: Tensor,
                      max_text_len: int) -> Tensor:
    """embed(pre) || visual rows || embed(post), stacked along the sequence.

    ``visual`` must already live in the LM embedding space; zero visual rows
    yield a pure-text prompt.
    """
    if visual.ndim != 2 or visual.shape[-1] != embedding_table.shape[1]:
        raise ValueError(
            f"visual embedding {visual.shape} does not match LM width "
            f"{embedding_table.shape[1]}")
    pre = T.embedding(embedding_table, tokenizer.tokenize(prompt.pre_image_text))
    post = T.embedding(embedding_table, tokenizer.tokenize(prompt.post_image_text))
    total = pre.shape[0] + visual.shape[0] + post.shape[0]
    if total > max_text_len:
        raise ValueError(
            f"spliced sequence of {total} embeddings exceeds max_text_len {max_text_len}")
    return T.concat([pre, visual, post], axis=0)


def golden_template(name: str) -> str:
    """Read a golden template file shipped with the package (UTF-8, exact bytes)."""
    return (resources.files("medvqa") / "templates" / name).read_text(encoding="utf-8")
