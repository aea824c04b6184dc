"""Two-stage fine-tuning orchestration.

Stage 1 trains on caption records, stage 2 on VQA records, both under the
same freeze policy: only the projection layer and the LoRA factors receive
gradients, everything else stays byte-identical. Runs are fully determined
by (seed, config, data).
"""

from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import load_caption_dataset, load_vqa_dataset
from .model import ModelConfig, MultimodalModel
from .optim import OptimizerState, ScheduleConfig, adamw_step, lr_at
from .prompts import assemble_caption_prompt, assemble_vqa_prompt, splice_embeddings
from .tensor import Tensor, backward
from . import data as data_mod


class TrainingError(RuntimeError):
    pass


DEFAULT_TRAINABLE_PATTERNS = ("projector.*", "*.lora_A", "*.lora_B")


@dataclass(frozen=True)
class FreezePolicy:
    trainable_patterns: tuple[str, ...] = DEFAULT_TRAINABLE_PATTERNS

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, pat) for pat in self.trainable_patterns)


@dataclass
class StageConfig:
    stage: int
    dataset_path: str
    epochs: int = 50
    batch_size: int = 1
    max_lr: float = 1e-5
    warmup_lr: float = 1e-6
    min_lr: float = 0.0
    warmup_steps: int | None = None  # None: one epoch of steps
    weight_decay: float = 0.05
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainReport:
    losses: list[float]
    checkpoint_path: str
    trainable_count: dict
    frozen_checksum_before: str
    frozen_checksum_after: str
    changed_params: list[str] = field(default_factory=list)


def apply_freeze_policy(model: MultimodalModel,
                        policy: FreezePolicy | None = None) -> MultimodalModel:
    """Set trainable flags from the policy patterns; reject an empty result."""
    policy = policy or FreezePolicy()
    n_trainable = 0
    for p in model.params.all():
        flag = policy.matches(p.name)
        p.set_trainable(flag)
        n_trainable += flag
    if n_trainable == 0:
        raise ValueError(
            f"freeze policy {policy.trainable_patterns} leaves nothing trainable")
    return model


def count_trainable(model: MultimodalModel) -> dict:
    """Element counts of the trainable set, grouped by role."""
    lora = projector = other = 0
    for p in model.params.trainable():
        if p.name.endswith(".lora_A") or p.name.endswith(".lora_B"):
            lora += p.tensor.size
        elif p.name.startswith("projector."):
            projector += p.tensor.size
        else:
            other += p.tensor.size
    return {"lora_total": lora, "projector_total": projector,
            "grand_total": lora + projector + other}


def trainable_param_counts(cfg: ModelConfig) -> dict:
    """Same accounting from configuration arithmetic alone.

    Usable at scales where the model itself would never fit in memory.
    """
    lora = cfg.n_layers_lm * len(cfg.lora_targets) * 2 * cfg.lora_rank * cfg.d_lm
    projector = cfg.d_lm * cfg.group_size * cfg.d_vis + cfg.d_lm
    return {"lora_total": lora, "projector_total": projector,
            "grand_total": lora + projector}


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _sample_loss(model: MultimodalModel, visual: Tensor, prompt, target_text: str) -> Tensor:
    """Next-token cross-entropy on target positions; prompt and image masked."""
    if not target_text:
        raise ValueError("empty target text")
    tok = model.tokenizer
    target_ids = tok.tokenize(target_text) + [tok.eos_id]
    spliced = splice_embeddings(prompt, visual, tok, model.lm.tok_embed.tensor,
                                model.cfg.max_text_len)
    prompt_len = spliced.shape[0]
    # Teacher forcing: feed all target tokens but the last; the position
    # before each target token predicts it, everything else is padding.
    if len(target_ids) > 1:
        embeds = T.concat([spliced, model.embed_ids(target_ids[:-1])], axis=0)
    else:
        embeds = spliced
    labels = np.full(embeds.shape[0], tok.pad_id, dtype=np.int64)
    labels[prompt_len - 1:] = target_ids
    logits = model.lm_forward(embeds)
    return T.cross_entropy(logits, labels, ignore_index=tok.pad_id)


def _record_prompt(record, stage: int, rng: np.random.Generator | None):
    if stage == 1:
        if rng is not None:
            return assemble_caption_prompt(rng=rng)
        return assemble_caption_prompt(instruction_index=0)
    return assemble_vqa_prompt(record.question)


def _record_target(record, stage: int) -> str:
    return record.caption if stage == 1 else record.answer


def compute_loss(batch, model: MultimodalModel, stage: int,
                 rng: np.random.Generator | None = None,
                 visuals: list[Tensor] | None = None) -> Tensor:
    """Mean loss over a batch of caption (stage 1) or VQA (stage 2) records."""
    if not batch:
        raise ValueError("empty batch")
    losses = []
    for i, record in enumerate(batch):
        if visuals is not None:
            visual = model.project_to_lm(visuals[i])
        else:
            image = data_mod.load_image(record.image_path, model.cfg.image_size)
            visual = model.project_to_lm(model.group_tokens(model.encode_image(image)))
        prompt = _record_prompt(record, stage, rng)
        losses.append(_sample_loss(model, visual, prompt, _record_target(record, stage)))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _load_records(cfg: StageConfig):
    if cfg.stage == 1:
        return load_caption_dataset(cfg.dataset_path)
    return load_vqa_dataset(cfg.dataset_path).split_records("train")


def run_stage(cfg: StageConfig, model: MultimodalModel, out_dir: str | Path,
              policy: FreezePolicy | None = None) -> TrainReport:
    """Run one fine-tuning stage and write its checkpoint.

    Shuffles per epoch under a seed-derived rng, steps AdamW under the
    warmup-cosine schedule, and proves after the fact that frozen weights
    never moved.
    """
    apply_freeze_policy(model, policy)
    records = _load_records(cfg)
    if not records:
        raise ValueError(f"dataset {cfg.dataset_path} holds no stage-{cfg.stage} records")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = (len(records) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else steps_per_epoch
    warmup = max(1, min(warmup, total_steps - 1))
    schedule = ScheduleConfig(max_lr=cfg.max_lr, warmup_lr=cfg.warmup_lr,
                              min_lr=cfg.min_lr, warmup_steps=warmup,
                              total_steps=total_steps)
    opt = OptimizerState(weight_decay=cfg.weight_decay)

    checksum_before = model.checksum(trainable=False)
    snapshot_before = model.snapshot()

    # The encoder is frozen, so grouped visual tokens per image are constants
    # of the run; cache them before the projector.
    feature_cache: dict[str, np.ndarray] = {}

    def grouped_features(record) -> Tensor:
        cached = feature_cache.get(record.image_path)
        if cached is None:
            image = data_mod.load_image(record.image_path, model.cfg.image_size)
            cached = model.group_tokens(model.encode_image(image)).data
            feature_cache[record.image_path] = cached
        return Tensor(cached)

    losses: list[float] = []
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
        instr_rng = np.random.default_rng([cfg.seed, 1, epoch])
        for start in range(0, len(records), cfg.batch_size):
            batch = [records[i] for i in order[start:start + cfg.batch_size]]
            lr = lr_at(step, schedule)
            try:
                loss = compute_loss(batch, model, cfg.stage, rng=instr_rng,
                                    visuals=[grouped_features(r) for r in batch])
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise TrainingError(f"non-finite loss at step {step}") from exc
                raise
            backward(loss)
            adamw_step(model.params.trainable(), opt, lr)
            model.params.zero_grads()
            losses.append(loss.item())
            step += 1
            if step >= total_steps:
                done = True
                break
        if done:
            break

    checksum_after = model.checksum(trainable=False)
    if checksum_after != checksum_before:
        raise TrainingError("frozen weights changed during training")
    snapshot_after = model.snapshot()
    changed = sorted(name for name, blob in snapshot_after.items()
                     if blob != snapshot_before[name])

    ckpt_path = out_dir / f"stage{cfg.stage}.ckpt"
    save_checkpoint(model, ckpt_path)
    return TrainReport(
        losses=losses,
        checkpoint_path=str(ckpt_path),
        trainable_count=count_trainable(model),
        frozen_checksum_before=checksum_before,
        frozen_checksum_after=checksum_after,
        changed_params=changed,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (all integers little-endian):
#   bytes 0..7    magic "MVQACKPT"
#   bytes 8..11   u32 format version (currently 1)
#   bytes 12..19  u64 header length H
#   bytes 20..20+H  JSON header: {"config": {...}, "params": [
#       {"name", "shape", "trainable", "offset", "size"}, ...]} sorted by name
#   remainder     concatenated float64 little-endian parameter data

CKPT_MAGIC = b"MVQACKPT"
CKPT_VERSION = 1


def save_checkpoint(model: MultimodalModel, path: str | Path) -> None:
    """Write the model to a single self-describing binary container."""
    names = sorted(model.params.names())
    entries = []
    offset = 0
    blobs = []
    for name in names:
        p = model.params[name]
        blob = p.tensor.data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.tensor.shape),
                        "trainable": p.trainable, "offset": offset,
                        "size": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.cfg.to_dict(), "params": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> MultimodalModel:
    """Rebuild a model bit-exactly from :func:`save_checkpoint` output."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != CKPT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version}, this build reads {CKPT_VERSION}")
    header_len = struct.unpack("<Q", raw[12:20])[0]
    if len(raw) < 20 + header_len:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    data = raw[20 + header_len:]

    model = MultimodalModel(ModelConfig.from_dict(header["config"]), seed=0)
    seen = set()
    for entry in header["params"]:
        name = entry["name"]
        if name not in model.params:
            raise ValueError(f"{path}: unknown parameter {name!r} in checkpoint")
        lo, hi = entry["offset"], entry["offset"] + entry["size"]
        if hi > len(data):
            raise ValueError(f"{path}: truncated checkpoint data at {name!r}")
        arr = np.frombuffer(data[lo:hi], dtype="<f8").reshape(entry["shape"])
        p = model.params[name]
        if tuple(arr.shape) != p.tensor.shape:
            raise ValueError(
                f"{path}: shape {arr.shape} for {name!r} does not match model "
                f"{p.tensor.shape}")
        p.tensor.data = np.ascontiguousarray(arr, dtype=np.float64)
        p.set_trainable(bool(entry["trainable"]))
        seen.add(name)
    missing = set(model.params.names()) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint missing parameters {sorted(missing)[:5]}")
    return model
