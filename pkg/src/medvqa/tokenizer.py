"""Byte-level tokenizer with reserved single-id markers.

Plain text maps to UTF-8 bytes offset past the reserved ids, so any string
free of reserved markers round-trips exactly. The reserved markers used by
the prompt templates always tokenize to a single id and are never byte-split.
"""

from __future__ import annotations

PAD = "<pad>"
EOS = "<eos>"

# Order is part of the vocabulary contract; ids are frozen by position.
SPECIAL_TOKENS = [
    PAD,
    EOS,
    "[INST]",
    "[/INST]",
    "<img>",
    "</img>",
    "[VQA]",
    "[caption]",
    "<Img>",
    "</Img>",
]

_N_SPECIAL = len(SPECIAL_TOKENS)


class ByteTokenizer:
    """UTF-8 bytes plus reserved marker ids; vocabulary size 256 + markers."""

    def __init__(self):
        self.special_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        self.pad_id = self.special_to_id[PAD]
        self.eos_id = self.special_to_id[EOS]
        self.vocab_size = 256 + _N_SPECIAL
        # Sorted longest-first so overlapping markers resolve deterministically.
        self._markers = sorted(SPECIAL_TOKENS, key=len, reverse=True)

    def byte_id(self, b: int) -> int:
        return _N_SPECIAL + b

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        while i < len(text):
            for marker in self._markers:
                if text.startswith(marker, i):
                    ids.append(self.special_to_id[marker])
                    i += len(marker)
                    break
            else:
                ch = text[i]
                ids.extend(_N_SPECIAL + b for b in ch.encode("utf-8"))
                i += 1
        return ids

    def detokenize(self, ids: list[int]) -> str:
        pieces: list[str] = []
        byte_run: list[int] = []

        def flush():
            if byte_run:
                pieces.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for tid in ids:
            if not 0 <= tid < self.vocab_size:
                raise ValueError(f"unknown token id {tid} for vocabulary of {self.vocab_size}")
            if tid < _N_SPECIAL:
                flush()
                pieces.append(SPECIAL_TOKENS[tid])
            else:
                byte_run.append(tid - _N_SPECIAL)
        flush()
        return "".join(pieces)

    def contains_special(self, text: str) -> bool:
        return any(marker in text for marker in SPECIAL_TOKENS)
