"""Mixed-batch pretraining loop, schedule, and checkpointing.

Every training batch pairs expert records with labeled public records in a
1:1 ratio; the loop optimizes the composite objective (expert contrastive +
public contrastive + weighted revision loss) with AdamW under a linear-warmup
cosine schedule.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attention import KnowledgeAttention, extract_expert_knowledge, fuse_expert_knowledge
from .data import (
    DEFAULT_PROMPT_TEMPLATE,
    Corpus,
    ImageTextRecord,
    SourceKind,
    fill_prompt,
)
from .encoders import EncoderBundle, TemperatureScale, build_encoder_bundle
from .objectives import (
    LossBreakdown,
    cooccurrence_targets,
    expert_contrastive_loss,
    paired_cross_entropy,
    public_contrastive_loss,
    revision_loss,
)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A training config carries unknown keys or invalid values."""


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN/inf; the message names the component."""


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; defaults follow the reference recipe."""

    batch_size: int = 24
    epochs: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-5
    alpha: float = 100.0
    seed: int = 0
    revision_on: bool = True
    mixed_on: bool = True
    fusion_on: bool = False
    ek_detach: bool = False
    encoder: str = "resnet_transformer"
    embed_dim: int = 512
    heads: int = 8
    image_size: int = 512
    text_len: int = 256
    vocab_size: int = 30000
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.revision_on and self.fusion_on:
            raise ConfigError("revision_on and fusion_on cannot both be true")
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        valid = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - valid)
        if unknown:
            raise ConfigError(
                f"unknown config keys {unknown}; valid keys: {sorted(valid)}"
            )
        return cls(**raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(config: TrainConfig) -> str:
    """Deterministic hash of the resolved config."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MixedBatch:
    """One training batch: an expert half and a labeled public half.

    Under mixed training the halves are exactly equal in size; with mixing
    disabled the expert half is empty and the public half fills the batch.
    """

    expert_half: tuple[ImageTextRecord, ...]
    public_half: tuple[ImageTextRecord, ...]

    def __post_init__(self):
        for rec in self.expert_half:
            if rec.source_kind != SourceKind.EXPERT_PAIR:
                raise ValueError(f"record {rec.id!r} in expert half is not an expert pair")
        for rec in self.public_half:
            if rec.source_kind != SourceKind.LABELED_PUBLIC:
                raise ValueError(f"record {rec.id!r} in public half is not labeled public")


def expand_public_records(corpus: Corpus) -> list[ImageTextRecord]:
    """One single-category record per (record, category) pair.

    Multi-label records are replicated with a restricted category tuple so a
    batch entry always carries exactly one category assignment.
    """
    out = []
    for rec in corpus.records:
        for cat in rec.categories:
            out.append(dataclasses.replace(rec, categories=(cat,)))
    return out


def mixed_batches(
    expert: Corpus, public: Corpus, config: TrainConfig, epoch: int = 0
) -> list[MixedBatch]:
    """Deterministic batch sequence for one epoch.

    An epoch is one seeded-shuffle pass over the larger corpus in half-batch
    chunks; the smaller corpus is resampled with replacement to fill its half
    of every batch. Trailing records that do not fill a half are dropped.
    """
    if len(expert) == 0 or len(public) == 0:
        raise ValueError("both corpora must be nonempty")
    if config.batch_size % 2 != 0:
        raise ValueError("batch_size must be even")
    rng = np.random.default_rng([config.seed, epoch])

    public_pool = expand_public_records(public)
    expert_pool = list(expert.records)

    if not config.mixed_on:
        order = rng.permutation(len(public_pool))
        batches = []
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            chunk = order[start : start + config.batch_size]
            batches.append(
                MixedBatch(
                    expert_half=(),
                    public_half=tuple(public_pool[int(i)] for i in chunk),
                )
            )
        return batches

    half = config.batch_size // 2
    pools = {"expert": expert_pool, "public": public_pool}
    larger = "public" if len(public_pool) >= len(expert_pool) else "expert"
    smaller = "expert" if larger == "public" else "public"
    order = rng.permutation(len(pools[larger]))

    batches = []
    for start in range(0, len(order) - half + 1, half):
        large_idx = order[start : start + half]
        small_idx = rng.integers(0, len(pools[smaller]), size=half)
        halves = {
            larger: tuple(pools[larger][int(i)] for i in large_idx),
            smaller: tuple(pools[smaller][int(i)] for i in small_idx),
        }
        batches.append(MixedBatch(expert_half=halves["expert"], public_half=halves["public"]))
    return batches


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then a cosine decay to ~0 at the last step."""
    if not (0 <= step < total_steps):
        raise ValueError(f"step {step} out of range [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


class PretrainModel(nn.Module):
    """Encoder bundle, similarity scale, and knowledge attention in one unit."""

    def __init__(self, bundle: EncoderBundle, scale: TemperatureScale, knowledge: KnowledgeAttention):
        super().__init__()
        self.bundle = bundle
        self.scale = scale
        self.knowledge = knowledge

    def encode_expert(self, records):
        v = self.bundle.encode_images([r.image for r in records])
        t = self.bundle.encode_texts([r.text_en for r in records])
        return v, t

    def encode_public(self, records, template: str):
        categories = [r.categories[0] for r in records]
        prompts = [fill_prompt(c, template) for c in categories]
        v = self.bundle.encode_images([r.image for r in records])
        t = self.bundle.encode_texts(prompts)
        return v, t, categories


def build_model(config: TrainConfig) -> PretrainModel:
    """Seeded model construction; identical configs yield identical weights."""
    torch.manual_seed(config.seed)
    bundle = build_encoder_bundle(
        arch=config.encoder,
        embed_dim=config.embed_dim,
        image_size=config.image_size,
        text_len=config.text_len,
        vocab_size=config.vocab_size,
    )
    return PretrainModel(
        bundle=bundle,
        scale=TemperatureScale(),
        knowledge=KnowledgeAttention(dim=config.embed_dim, heads=config.heads),
    )


def make_optimizer(model: PretrainModel, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled decay on everything but the scale and norm gains."""
    no_decay_params = {id(model.scale.log_scale)}
    for module in model.modules():
        if isinstance(module, (nn.LayerNorm, nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm)):
            no_decay_params.update(id(p) for p in module.parameters(recurse=False))
    decay, no_decay = [], []
    for p in model.parameters():
        (no_decay if id(p) in no_decay_params else decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.lr,
        betas=(0.9, 0.999),
        eps=1e-8,
    )


def _check_finite(name: str, value: torch.Tensor):
    if not torch.isfinite(value):
        raise NonFiniteLossError(f"loss component {name} is non-finite: {value.item()}")


def train_step(
    model: PretrainModel,
    batch: MixedBatch,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    step: int,
    total_steps: int,
    warmup_steps: int,
) -> LossBreakdown:
    """One optimization step on a mixed batch; returns the loss breakdown.

    Ablation flags reroute the knowledge path: revision adds the weighted MSE
    term, fusion instead adds the extracted knowledge onto the public text
    features before the public contrastive loss, and with both off the
    knowledge module is never touched.
    """
    lr = lr_at(step, total_steps, warmup_steps, config.lr)
    for group in optimizer.param_groups:
        group["lr"] = lr

    zero = torch.zeros((), dtype=torch.float32)
    expert_term = zero
    v_m = t_m = None
    if batch.expert_half:
        v_m, t_m = model.encode_expert(batch.expert_half)
        expert_term = expert_contrastive_loss(v_m, t_m, model.scale)

    if not batch.public_half:
        raise ValueError("batch has no public half")
    v_p, t_p, categories = model.encode_public(batch.public_half, config.prompt_template)

    knowledge_term = zero
    use_knowledge = (config.revision_on or config.fusion_on) and batch.expert_half
    if use_knowledge:
        q, k, val = v_p.matrix, v_m.matrix, t_m.matrix
        if config.ek_detach:
            q, k, val = q.detach(), k.detach(), val.detach()
        knowledge = extract_expert_knowledge(q, k, val, model.knowledge)

    if use_knowledge and config.fusion_on:
        fused = fuse_expert_knowledge(knowledge, t_p.matrix)
        targets = cooccurrence_targets(
            categories, dtype=v_p.matrix.dtype, device=v_p.matrix.device
        )
        public_term = paired_cross_entropy(v_p.matrix, fused, model.scale, targets)
    else:
        public_term = public_contrastive_loss(v_p, t_p, model.scale, categories)
        if use_knowledge and config.revision_on:
            knowledge_term = revision_loss(knowledge, t_p.matrix)

    _check_finite("l_m", expert_term)
    _check_finite("l_p", public_term)
    _check_finite("l_ek", knowledge_term)

    total = public_term + expert_term
    # alpha == 0 leaves the revision value reported but out of the graph, so
    # no zero gradients reach the attention parameters.
    if config.revision_on and config.alpha > 0 and use_knowledge:
        total = total + config.alpha * knowledge_term
    _check_finite("total", total)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    model.scale.clamp_()

    reported_ek = float(knowledge_term.detach()) if config.revision_on else 0.0
    return LossBreakdown(
        l_p=float(public_term.detach()),
        l_m=float(expert_term.detach()),
        l_ek=reported_ek,
        alpha=config.alpha,
    )


def fit(expert: Corpus, public: Corpus, config: TrainConfig, out_dir: str | Path) -> Path:
    """Run the full pretraining recipe and write checkpoint plus loss log.

    Warmup spans exactly the first epoch. Returns the checkpoint path; the
    per-step loss log lands next to it as JSON lines.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config)
    optimizer = make_optimizer(model, config)

    per_epoch = len(mixed_batches(expert, public, config, epoch=0))
    if per_epoch == 0:
        raise ValueError("corpora too small for even one batch")
    total_steps = config.epochs * per_epoch
    warmup_steps = per_epoch

    log_path = out_dir / "loss_log.jsonl"
    step = 0
    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            for batch in mixed_batches(expert, public, config, epoch=epoch):
                breakdown = train_step(
                    model, batch, optimizer, config, step, total_steps, warmup_steps
                )
                record = {
                    "step": step,
                    "l_p": breakdown.l_p,
                    "l_m": breakdown.l_m,
                    "l_ek": breakdown.l_ek,
                    "total": breakdown.total,
                    "lambda": float(model.scale.value().detach()),
                }
                log.write(json.dumps(record) + "\n")
                step += 1

    ckpt_path = out_dir / "checkpoint.pt"
    save_checkpoint(model, config, ckpt_path)
    return ckpt_path


def save_checkpoint(model: PretrainModel, config: TrainConfig, path: str | Path) -> Path:
    """Versioned checkpoint: config, config hash, and full parameter state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": config.to_dict(),
            "config_hash": config_hash(config),
            "state": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[PretrainModel, TrainConfig]:
    """Rebuild a model from a checkpoint with exact parameter round-trip."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config)
    model.load_state_dict(payload["state"], strict=True)
    return model, config
