"""The multimodal model: frozen vision encoder, visual token grouping, a
single trainable projection into the language-model embedding space, and a
frozen decoder-only LM whose attention projections carry LoRA adapters.

Generation is greedy (beam width 1): repeated argmax until the end token.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .lora import LoraAdapter, init_lora, lora_forward
from .tensor import ParameterRegistry, Tensor, no_grad
from .tokenizer import ByteTokenizer


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    d_vis: int = 32
    group_size: int = 4
    d_lm: int = 64
    n_layers_vis: int = 2
    n_layers_lm: int = 2
    n_heads: int = 4
    vocab_size: int = 266
    max_text_len: int = 256
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.lora_alpha is None:
            self.lora_alpha = 2.0 * self.lora_rank
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_patches % self.group_size:
            raise ValueError(
                f"{self.n_patches} patches not divisible by group_size {self.group_size}")
        if self.d_lm % self.n_heads or self.d_vis % self.n_heads:
            raise ValueError(
                f"widths d_lm={self.d_lm}, d_vis={self.d_vis} must divide by "
                f"n_heads={self.n_heads}")
        if not 0 < self.lora_rank < self.d_lm:
            raise ValueError(
                f"lora_rank {self.lora_rank} must lie in (0, d_lm={self.d_lm})")
        bad = set(self.lora_targets) - {"q", "k", "v", "o"}
        if bad:
            raise ValueError(f"unknown lora targets {sorted(bad)}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_grouped(self) -> int:
        return self.n_patches // self.group_size

    @classmethod
    def paper_scale(cls, d_vis: int = 1408) -> "ModelConfig":
        """The full-scale configuration; expressible but far beyond desk RAM."""
        return cls(
            image_size=448, patch_size=14, d_vis=d_vis, d_lm=4096,
            n_layers_vis=40, n_layers_lm=32, n_heads=32,
            max_text_len=1024, lora_rank=64, lora_alpha=128.0,
        )

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "d_vis": self.d_vis, "group_size": self.group_size,
            "d_lm": self.d_lm, "n_layers_vis": self.n_layers_vis,
            "n_layers_lm": self.n_layers_lm, "n_heads": self.n_heads,
            "vocab_size": self.vocab_size, "max_text_len": self.max_text_len,
            "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
            "lora_targets": list(self.lora_targets),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["lora_targets"] = tuple(d.get("lora_targets", ("q", "v")))
        return cls(**d)


def group_visual_tokens(tokens: Tensor, group_size: int = 4) -> Tensor:
    """Concatenate each run of ``group_size`` consecutive token embeddings.

    (N, d) -> (N / group_size, group_size * d); row i is the concatenation of
    input rows [g*i, g*i + group_size). N not divisible by the group size is
    an error, never padded.
    """
    if tokens.ndim != 2:
        raise ValueError(f"expected (tokens, dim), got shape {tokens.shape}")
    n, d = tokens.shape
    if n % group_size:
        raise ValueError(f"{n} tokens not divisible by group size {group_size}")
    return T.reshape(tokens, (n // group_size, group_size * d))


def ungroup_visual_tokens(grouped: Tensor, group_size: int = 4) -> Tensor:
    """Inverse of :func:`group_visual_tokens`."""
    m, gd = grouped.shape
    if gd % group_size:
        raise ValueError(f"width {gd} not divisible by group size {group_size}")
    return T.reshape(grouped, (m * group_size, gd // group_size))


class Linear:
    def __init__(self, reg: ParameterRegistry, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = reg.register(f"{name}.weight", rng.normal(0.0, 0.02, size=(d_out, d_in)))
        self.bias = reg.register(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight.tensor))
        if self.bias is not None:
            out = T.bias_add(out, self.bias.tensor)
        return out


class LoraLinear(Linear):
    """Linear map with an optional low-rank correction that can be toggled."""

    def __init__(self, reg, name, d_in, d_out, rng, *, rank: int, alpha: float):
        super().__init__(reg, name, d_in, d_out, rng, bias=False)
        self.adapter: LoraAdapter = init_lora(reg, name, d_in, d_out, rank, alpha, rng)
        self.adapter_enabled = True

    def __call__(self, x: Tensor) -> Tensor:
        adapter = self.adapter if self.adapter_enabled else None
        return lora_forward(x, self.weight.tensor, adapter)


class LayerNorm:
    def __init__(self, reg: ParameterRegistry, name: str, dim: int):
        self.gain = reg.register(f"{name}.gain", np.ones(dim))
        self.bias = reg.register(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.tensor, self.bias.tensor)


class Attention:
    """Multi-head self-attention; optionally causal, optionally LoRA-adapted."""

    def __init__(self, reg, name, dim, n_heads, rng, *, causal: bool,
                 lora_targets: tuple[str, ...] = (), rank: int = 0, alpha: float = 0.0):
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.causal = causal
        self.proj: dict[str, Linear] = {}
        for key in ("q", "k", "v", "o"):
            if key in lora_targets:
                self.proj[key] = LoraLinear(reg, f"{name}.{key}", dim, dim, rng,
                                            rank=rank, alpha=alpha)
            else:
                self.proj[key] = Linear(reg, f"{name}.{key}", dim, dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        s, d = x.shape
        h, hd = self.n_heads, self.head_dim

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (s, h, hd)), (1, 0, 2))

        q = heads(self.proj["q"](x))
        k = heads(self.proj["k"](x))
        v = heads(self.proj["v"](x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        if self.causal:
            mask = np.triu(np.full((s, s), T.MASK_VALUE), k=1)
            scores = T.add(scores, Tensor(mask))
        attn = T.softmax(scores)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (s, d))
        return self.proj["o"](ctx)


class Mlp:
    def __init__(self, reg, name, dim, rng):
        self.fc1 = Linear(reg, f"{name}.fc1", dim, 4 * dim, rng)
        self.fc2 = Linear(reg, f"{name}.fc2", 4 * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block:
    """Pre-norm transformer block: x + attn(ln1 x); x + mlp(ln2 x)."""

    def __init__(self, reg, name, dim, n_heads, rng, *, causal,
                 lora_targets=(), rank=0, alpha=0.0):
        self.ln1 = LayerNorm(reg, f"{name}.ln1", dim)
        self.attn = Attention(reg, f"{name}.attn", dim, n_heads, rng, causal=causal,
                              lora_targets=lora_targets, rank=rank, alpha=alpha)
        self.ln2 = LayerNorm(reg, f"{name}.ln2", dim)
        self.mlp = Mlp(reg, f"{name}.mlp", dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.mlp(self.ln2(x)))


class VisionEncoder:
    """Patch embedding + learned positions + pre-norm transformer stack."""

    def __init__(self, reg, cfg: ModelConfig, rng):
        p = cfg.patch_size
        self.cfg = cfg
        self.patch_embed = Linear(reg, "vision.patch_embed", p * p * 3, cfg.d_vis, rng)
        self.pos_embed = reg.register(
            "vision.pos_embed", rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.d_vis)))
        self.blocks = [
            Block(reg, f"vision.blocks.{i}", cfg.d_vis, cfg.n_heads, rng, causal=False)
            for i in range(cfg.n_layers_vis)
        ]
        self.ln_f = LayerNorm(reg, "vision.ln_f", cfg.d_vis)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        s, p = self.cfg.image_size, self.cfg.patch_size
        grid = s // p
        return (image.reshape(grid, p, grid, p, 3)
                     .transpose(0, 2, 1, 3, 4)
                     .reshape(grid * grid, p * p * 3))

    def __call__(self, image: np.ndarray) -> Tensor:
        s = self.cfg.image_size
        if image.shape != (s, s, 3):
            raise ValueError(
                f"image shape {image.shape} does not match configured ({s}, {s}, 3)")
        x = self.patch_embed(Tensor(self.patchify(image)))
        x = T.add(x, self.pos_embed.tensor)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class DecoderLM:
    """Causal decoder stack over token/visual embeddings, LoRA on attention."""

    def __init__(self, reg, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.tok_embed = reg.register(
            "lm.tok_embed", rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_lm)))
        self.pos_embed = reg.register(
            "lm.pos_embed", rng.normal(0.0, 0.02, size=(cfg.max_text_len, cfg.d_lm)))
        self.blocks = [
            Block(reg, f"lm.blocks.{i}", cfg.d_lm, cfg.n_heads, rng, causal=True,
                  lora_targets=cfg.lora_targets, rank=cfg.lora_rank, alpha=cfg.lora_alpha)
            for i in range(cfg.n_layers_lm)
        ]
        self.ln_f = LayerNorm(reg, "lm.ln_f", cfg.d_lm)
        self.head = Linear(reg, "lm.head", cfg.d_lm, cfg.vocab_size, rng, bias=False)

    def __call__(self, embeds: Tensor) -> Tensor:
        seq = embeds.shape[0]
        if seq > self.cfg.max_text_len:
            raise ValueError(
                f"sequence length {seq} exceeds max_text_len {self.cfg.max_text_len}")
        pos_rows = T.split_first_dim(self.pos_embed.tensor,
                                     [seq, self.cfg.max_text_len - seq])[0]
        x = T.add(embeds, pos_rows)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


class MultimodalModel:
    """Fig-style composition: encode -> group -> project -> decode -> generate."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParameterRegistry()
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(self.params, cfg, rng)
        self.projector_w = self.params.register(
            "projector.weight",
            rng.normal(0.0, 0.02, size=(cfg.d_lm, cfg.group_size * cfg.d_vis)))
        self.projector_b = self.params.register("projector.bias", np.zeros(cfg.d_lm))
        self.lm = DecoderLM(self.params, cfg, rng)
        self.tokenizer = ByteTokenizer()
        if self.tokenizer.vocab_size != cfg.vocab_size:
            raise ValueError(
                f"config vocab_size {cfg.vocab_size} does not match tokenizer "
                f"vocabulary {self.tokenizer.vocab_size}")
        self._apply_default_freeze()

    def _apply_default_freeze(self):
        for p in self.params.all():
            frozen = not (p.name.startswith("projector.")
                          or p.name.endswith(".lora_A") or p.name.endswith(".lora_B"))
            p.set_trainable(not frozen)

    # -- forward pieces ----------------------------------------------------

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Frozen patch encoder; runs without graph recording by construction."""
        with no_grad():
            return self.vision(image)

    def group_tokens(self, visual: Tensor) -> Tensor:
        return group_visual_tokens(visual, self.cfg.group_size)

    def project_to_lm(self, grouped: Tensor) -> Tensor:
        if grouped.shape[-1] != self.cfg.group_size * self.cfg.d_vis:
            raise ValueError(
                f"grouped width {grouped.shape} does not match projector input "
                f"{self.cfg.group_size * self.cfg.d_vis}")
        out = T.matmul(grouped, T.transpose(self.projector_w.tensor))
        return T.bias_add(out, self.projector_b.tensor)

    def visual_features(self, image: np.ndarray) -> Tensor:
        return self.project_to_lm(self.group_tokens(self.encode_image(image)))

    def embed_ids(self, ids: list[int]) -> Tensor:
        return T.embedding(self.lm.tok_embed.tensor, ids)

    def lm_forward(self, embeds: Tensor) -> Tensor:
        return self.lm(embeds)

    def set_adapters_enabled(self, enabled: bool) -> None:
        for block in self.lm.blocks:
            for proj in block.attn.proj.values():
                if isinstance(proj, LoraLinear):
                    proj.adapter_enabled = enabled

    def adapters(self) -> list[LoraAdapter]:
        out = []
        for block in self.lm.blocks:
            for proj in block.attn.proj.values():
                if isinstance(proj, LoraLinear):
                    out.append(proj.adapter)
        return out

    # -- generation ----------------------------------------------------------

    def generate_greedy(self, prompt_embeds: Tensor, max_new_tokens: int) -> list[int]:
        """Append argmax tokens until the end token or the budget runs out.

        Returns generated ids, end token excluded. Deterministic: equal
        prompts give equal outputs.
        """
        if prompt_embeds.ndim != 2 or prompt_embeds.shape[0] == 0:
            raise ValueError("empty prompt; generation needs at least one position")
        if prompt_embeds.shape[0] > self.cfg.max_text_len:
            raise ValueError(
                f"prompt length {prompt_embeds.shape[0]} exceeds max_text_len "
                f"{self.cfg.max_text_len}")
        eos = self.tokenizer.eos_id
        out: list[int] = []
        with no_grad():
            embeds = prompt_embeds
            for _ in range(max_new_tokens):
                if embeds.shape[0] >= self.cfg.max_text_len:
                    break
                logits = self.lm_forward(embeds)
                next_id = int(np.argmax(logits.data[-1]))
                if next_id == eos:
                    break
                out.append(next_id)
                row = self.embed_ids([next_id])
                embeds = T.concat([embeds, row], axis=0)
        return out

    # -- bookkeeping -----------------------------------------------------------

    def checksum(self, trainable: bool | None = None) -> str:
        """SHA-256 over parameter bytes in name order, filtered by flag."""
        h = hashlib.sha256()
        for name in sorted(self.params.names()):
            p = self.params[name]
            if trainable is not None and p.trainable != trainable:
                continue
            h.update(name.encode())
            h.update(p.tensor.data.tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, bytes]:
        return {name: self.params[name].tensor.data.tobytes()
                for name in self.params.names()}
