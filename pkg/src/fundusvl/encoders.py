"""Image/text encoders, projection heads, and the learnable similarity scale.

Encoders are pluggable: the "tiny" configuration (small conv net plus a
bag-of-tokens text embedding) keeps tests and toy runs fast on CPU, while the
"resnet_transformer" configuration mirrors the reference recipe (ResNet-50
image encoder, small transformer text encoder, 512-dim shared space).
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MAX_SCALE = 100.0
INIT_SCALE = 1.0 / 0.07  # CLIP convention

_WORD = re.compile(r"\w+", re.UNICODE)


class HashingTokenizer:
    """Deterministic vocabulary-free tokenizer.

    Words hash into a fixed id range via crc32, so token ids are stable across
    runs and platforms. Id 0 is padding; id 1 is a BOS token prepended to every
    sequence so even empty text yields a nonzero embedding.
    """

    PAD = 0
    BOS = 1

    def __init__(self, vocab_size: int = 4096, max_len: int = 16):
        if vocab_size < 3:
            raise ValueError("vocab_size must leave room for PAD and BOS")
        if max_len < 2:
            raise ValueError("max_len must allow BOS plus at least one word")
        self.vocab_size = vocab_size
        self.max_len = max_len

    def encode(self, text: str) -> list[int]:
        words = _WORD.findall(text.lower())
        ids = [self.BOS]
        for w in words[: self.max_len - 1]:
            ids.append(2 + zlib.crc32(w.encode("utf-8")) % (self.vocab_size - 2))
        ids.extend([self.PAD] * (self.max_len - len(ids)))
        return ids

    def __call__(self, texts: list[str]) -> torch.Tensor:
        return torch.tensor([self.encode(t) for t in texts], dtype=torch.long)


class TinyImageEncoder(nn.Module):
    """Two-conv feature extractor for desk-scale runs."""

    def __init__(self, out_dim: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)
        self.head = nn.Linear(32, out_dim)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)


class BagOfTokensTextEncoder(nn.Module):
    """Mean of token embeddings over non-pad positions."""

    def __init__(self, vocab_size: int = 4096, out_dim: int = 32):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, out_dim, padding_idx=0)
        self.out_dim = out_dim

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        mask = (tokens != 0).unsqueeze(-1).to(self.embedding.weight.dtype)
        summed = (self.embedding(tokens) * mask).sum(dim=1)
        return summed / mask.sum(dim=1).clamp(min=1.0)


class TransformerTextEncoder(nn.Module):
    """Small transformer encoder with masked mean pooling."""

    def __init__(self, vocab_size: int, out_dim: int, max_len: int, layers: int = 4, heads: int = 8):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, out_dim, padding_idx=0)
        self.positions = nn.Parameter(torch.zeros(max_len, out_dim))
        layer = nn.TransformerEncoderLayer(
            d_model=out_dim, nhead=heads, dim_feedforward=4 * out_dim, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        self.out_dim = out_dim

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        pad = tokens == 0
        x = self.embedding(tokens) + self.positions[: tokens.shape[1]]
        x = self.encoder(x, src_key_padding_mask=pad)
        mask = (~pad).unsqueeze(-1).to(x.dtype)
        return (x * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)


class TemperatureScale(nn.Module):
    """Learnable positive similarity scale, capped at MAX_SCALE."""

    def __init__(self, initial: float = INIT_SCALE):
        super().__init__()
        self.log_scale = nn.Parameter(torch.tensor(math.log(initial) if initial > 0 else -math.inf))

    @classmethod
    def from_value(cls, value: float) -> "TemperatureScale":
        return cls(initial=value)

    def value(self) -> torch.Tensor:
        return torch.exp(torch.clamp(self.log_scale, max=math.log(MAX_SCALE)))

    def clamp_(self):
        """Hard-cap the parameter after an optimizer step."""
        with torch.no_grad():
            self.log_scale.clamp_(max=math.log(MAX_SCALE))


@dataclass
class EmbeddingBatch:
    """A BxD matrix of projected features; unit_norm promises unit L2 rows."""

    matrix: torch.Tensor
    unit_norm: bool = False

    def validate(self) -> "EmbeddingBatch":
        if self.matrix.ndim != 2:
            raise ValueError(f"expected a 2-d matrix, got shape {tuple(self.matrix.shape)}")
        if self.unit_norm:
            norms = self.matrix.detach().norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
                raise ValueError("unit_norm flag set but rows are not unit length")
        return self

    def __len__(self) -> int:
        return self.matrix.shape[0]


class EncoderBundle(nn.Module):
    """Paired encoders with projection heads into a shared embedding space."""

    def __init__(
        self,
        image_encoder: nn.Module,
        text_encoder: nn.Module,
        image_dim: int,
        text_dim: int,
        embed_dim: int,
        image_size: int,
        tokenizer: HashingTokenizer,
    ):
        super().__init__()
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.image_projection = nn.Linear(image_dim, embed_dim)
        self.text_projection = nn.Linear(text_dim, embed_dim)
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.tokenizer = tokenizer

    def _to_image_tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            batch = images.to(torch.float32)
            if batch.ndim == 4 and batch.shape[-1] == 3:  # NHWC -> NCHW
                batch = batch.permute(0, 3, 1, 2)
        else:
            arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
            batch = torch.from_numpy(arr).permute(0, 3, 1, 2)
        if batch.max() > 1.5:
            batch = batch / 255.0
        if batch.shape[-2:] != (self.image_size, self.image_size):
            batch = F.interpolate(
                batch, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False
            )
        return batch

    def encode_images(self, images) -> EmbeddingBatch:
        """Encode and project an image batch to unit-norm rows.

        Accepts a list/array of HxWx3 uint8 images or an NCHW float tensor;
        inputs are resized to the configured side.
        """
        batch = self._to_image_tensor(images)
        if batch.shape[0] == 0:
            raise ValueError("empty image batch")
        raw = self.image_encoder(batch)
        if raw.shape[1] != self.image_projection.in_features:
            raise ValueError(
                f"image encoder produced {raw.shape[1]} features, "
                f"projection expects {self.image_projection.in_features}"
            )
        projected = self.image_projection(raw)
        return EmbeddingBatch(F.normalize(projected, dim=1), unit_norm=True)

    def encode_texts(self, texts: list[str]) -> EmbeddingBatch:
        """Encode and project a text batch to unit-norm rows (truncating)."""
        if len(texts) == 0:
            raise ValueError("empty text batch")
        tokens = self.tokenizer(list(texts))
        raw = self.text_encoder(tokens)
        if raw.shape[1] != self.text_projection.in_features:
            raise ValueError(
                f"text encoder produced {raw.shape[1]} features, "
                f"projection expects {self.text_projection.in_features}"
            )
        projected = self.text_projection(raw)
        return EmbeddingBatch(F.normalize(projected, dim=1), unit_norm=True)


def scaled_similarities(
    v: EmbeddingBatch, t: EmbeddingBatch, scale: TemperatureScale
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled cosine-similarity logits in both directions.

    Returns (image_to_text, text_to_image) where text_to_image is exactly the
    transpose of image_to_text.
    """
    if not (v.unit_norm and t.unit_norm):
        raise ValueError("similarities require unit-normalized embeddings")
    if v.matrix.shape != t.matrix.shape:
        raise ValueError(
            f"batch shapes differ: {tuple(v.matrix.shape)} vs {tuple(t.matrix.shape)}"
        )
    image_to_text = scale.value() * (v.matrix @ t.matrix.T)
    return image_to_text, image_to_text.T


def build_encoder_bundle(
    arch: str = "tiny",
    embed_dim: int = 16,
    image_size: int = 32,
    text_len: int = 16,
    vocab_size: int = 4096,
) -> EncoderBundle:
    """Construct a named encoder configuration.

    "tiny" is the test configuration; "resnet_transformer" is the reference
    one (ResNet-50 + 4-layer transformer). Reference weights initialize
    randomly; plugging in pretrained state dicts is up to the caller.
    """
    tokenizer = HashingTokenizer(vocab_size=vocab_size, max_len=text_len)
    if arch == "tiny":
        image_dim = max(embed_dim, 16)
        text_dim = max(embed_dim, 16)
        return EncoderBundle(
            image_encoder=TinyImageEncoder(out_dim=image_dim),
            text_encoder=BagOfTokensTextEncoder(vocab_size=vocab_size, out_dim=text_dim),
            image_dim=image_dim,
            text_dim=text_dim,
            embed_dim=embed_dim,
            image_size=image_size,
            tokenizer=tokenizer,
        )
    if arch == "resnet_transformer":
        from torchvision.models import resnet50

        backbone = resnet50(weights=None)
        image_dim = backbone.fc.in_features
        backbone.fc = nn.Identity()
        text_dim = 512
        return EncoderBundle(
            image_encoder=backbone,
            text_encoder=TransformerTextEncoder(
                vocab_size=vocab_size, out_dim=text_dim, max_len=text_len
            ),
            image_dim=image_dim,
            text_dim=text_dim,
            embed_dim=embed_dim,
            image_size=image_size,
            tokenizer=tokenizer,
        )
    raise ValueError(f"unknown encoder arch {arch!r} (expected 'tiny' or 'resnet_transformer')")
