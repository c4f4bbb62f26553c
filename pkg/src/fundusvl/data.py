"""Corpus records, prompt templating, synthetic corpora, and manifest IO.

A corpus mixes two kinds of records: expert pairs (an image with a genuine
free-text description) and labeled public records (an image with category
labels only, turned into text through a prompt template at training time).
"""

from __future__ import annotations

import colorsys
import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_PROMPT_TEMPLATE = "a fundus photograph of {}"

# Used to give synthetic categories plausible fundus names; categories beyond
# the roster fall back to "lesion-<k>".
_CATEGORY_ROSTER = (
    "drusen",
    "glaucoma",
    "hemorrhage",
    "exudate",
    "macular edema",
    "optic atrophy",
    "neovascularization",
    "chorioretinal scar",
    "cotton wool spots",
    "retinal detachment",
    "myopia",
    "papilledema",
)

_QUADRANT_NAMES = ("superior nasal", "superior temporal", "inferior nasal", "inferior temporal")


class MalformedTemplateError(ValueError):
    """Prompt template does not contain exactly one '{}' placeholder."""


class RecordError(ValueError):
    """An ImageTextRecord violates its invariants."""


class CorpusError(ValueError):
    """A Corpus violates its invariants (e.g. duplicate record ids)."""


class CorpusLoadError(ValueError):
    """A manifest could not be loaded; the message names the offending record."""


class Modality(str, enum.Enum):
    CFP = "CFP"
    FFA = "FFA"
    OCT = "OCT"


class SourceKind(str, enum.Enum):
    EXPERT_PAIR = "EXPERT_PAIR"
    LABELED_PUBLIC = "LABELED_PUBLIC"


@dataclass(frozen=True)
class ImageTextRecord:
    """One image with bilingual text and/or category labels.

    Expert pairs must carry a nonempty English text; labeled public records
    must carry at least one category label. Images are HxWx3 uint8 arrays.
    """

    id: str
    image: np.ndarray
    text_en: str = ""
    text_zh: str = ""
    categories: tuple[str, ...] = ()
    modality: Modality = Modality.CFP
    source_kind: SourceKind = SourceKind.EXPERT_PAIR

    def __post_init__(self):
        img = self.image
        if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
            raise RecordError(f"record {self.id!r}: image must be an HxWx3 array")
        if img.shape[0] < 1 or img.shape[1] < 1:
            raise RecordError(f"record {self.id!r}: image must be at least 1x1")
        if img.dtype != np.uint8:
            raise RecordError(f"record {self.id!r}: image must be uint8 in [0, 255]")
        if self.source_kind == SourceKind.EXPERT_PAIR and not self.text_en:
            raise RecordError(f"record {self.id!r}: expert pair with empty text_en")
        if self.source_kind == SourceKind.LABELED_PUBLIC and not self.categories:
            raise RecordError(f"record {self.id!r}: labeled public record without categories")
        object.__setattr__(self, "categories", tuple(self.categories))
        img.setflags(write=False)


@dataclass(frozen=True)
class Corpus:
    """An ordered, immutable collection of records with unique ids."""

    records: tuple[ImageTextRecord, ...]
    name: str
    category_vocabulary: tuple[str, ...] = dataclasses.field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        labels: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise CorpusError(f"corpus {self.name!r}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            labels.update(rec.categories)
        object.__setattr__(self, "category_vocabulary", tuple(sorted(labels)))

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the deterministic synthetic corpus generator."""

    num_categories: int
    samples_per_category: int
    image_size: int = 32
    seed: int = 0
    noise_level: float = 0.05

    def __post_init__(self):
        if self.num_categories < 1:
            raise ValueError("num_categories must be positive")
        if self.samples_per_category < 1:
            raise ValueError("samples_per_category must be positive")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")
        if not (0.0 <= self.noise_level < 1.0):
            raise ValueError("noise_level must lie in [0, 1)")


def fill_prompt(category: str, template: str) -> str:
    """Substitute a category label into a single-placeholder prompt template."""
    if template.count("{}") != 1:
        raise MalformedTemplateError(
            f"template {template!r} must contain exactly one '{{}}' placeholder"
        )
    return template.replace("{}", category)


def category_name(index: int) -> str:
    """Deterministic category name for synthetic corpora."""
    if index < len(_CATEGORY_ROSTER):
        return _CATEGORY_ROSTER[index]
    return f"lesion-{index}"


def _category_color(index: int, total: int) -> tuple[int, int, int]:
    # Evenly spaced hues keep signatures distinct for any category count.
    hue = index / max(total, 1)
    r, g, b = colorsys.hsv_to_rgb(hue, 1.0, 1.0)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _signature_image(cat_idx: int, total: int, side: int) -> np.ndarray:
    base = np.full((side, side, 3), 28, dtype=np.int16)
    color = _category_color(cat_idx, total)
    half = max(side // 2, 1)
    quadrant = cat_idx % 4
    r0 = 0 if quadrant in (0, 1) else side - half
    c0 = 0 if quadrant in (0, 2) else side - half
    base[r0 : r0 + half, c0 : c0 + half] = color
    return base


def _expert_text(cat_idx: int, total: int, rng: np.random.Generator) -> str:
    name = category_name(cat_idx)
    quadrant = _QUADRANT_NAMES[cat_idx % 4]
    color = _category_color(cat_idx, total)
    shade = "bright" if sum(color) > 380 else "dark"
    closers = (
        "Visual acuity is mildly reduced.",
        "The optic disc margin is unremarkable.",
        "No vitreous involvement is seen.",
        "Retinal vessels are of normal caliber.",
    )
    closer = closers[int(rng.integers(0, len(closers)))]
    return (
        f"The fundus photograph shows {name} in the {quadrant} quadrant. "
        f"The lesion appears as a {shade} well-demarcated patch. {closer}"
    )


def make_synthetic_corpus(config: SyntheticConfig) -> tuple[Corpus, Corpus]:
    """Generate a deterministic (expert, public) corpus pair.

    Each category gets a distinct solid-color quadrant signature plus seeded
    pixel noise; expert records carry a multi-sentence description and public
    records carry only the category label. Identical configs produce
    bit-identical corpora.
    """
    amp = int(round(config.noise_level * 255))
    expert_records = []
    public_records = []
    for kind_code, bucket, source in (
        (0, expert_records, SourceKind.EXPERT_PAIR),
        (1, public_records, SourceKind.LABELED_PUBLIC),
    ):
        for c in range(config.num_categories):
            signature = _signature_image(c, config.num_categories, config.image_size)
            for i in range(config.samples_per_category):
                rng = np.random.default_rng([config.seed, kind_code, c, i])
                noise = rng.integers(-amp, amp + 1, size=signature.shape, dtype=np.int16)
                image = np.clip(signature + noise, 0, 255).astype(np.uint8)
                name = category_name(c)
                if source == SourceKind.EXPERT_PAIR:
                    rec = ImageTextRecord(
                        id=f"exp-{c}-{i}",
                        image=image,
                        text_en=_expert_text(c, config.num_categories, rng),
                        categories=(name,),
                        modality=Modality.CFP,
                        source_kind=source,
                    )
                else:
                    rec = ImageTextRecord(
                        id=f"pub-{c}-{i}",
                        image=image,
                        categories=(name,),
                        modality=Modality.CFP,
                        source_kind=source,
                    )
                bucket.append(rec)
    return (
        Corpus(records=tuple(expert_records), name="synthetic-expert"),
        Corpus(records=tuple(public_records), name="synthetic-public"),
    )


def save_corpus(corpus: Corpus, manifest_path: str | Path) -> Path:
    """Write a corpus as a JSON-lines manifest plus PNG images.

    Images land in an `images/` directory next to the manifest; the manifest
    references them by relative path.
    """
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = manifest_path.parent / "images"
    image_dir.mkdir(exist_ok=True)
    with manifest_path.open("w", encoding="utf-8") as fh:
        for rec in corpus.records:
            rel = f"images/{rec.id}.png"
            Image.fromarray(np.asarray(rec.image)).save(manifest_path.parent / rel)
            row = {
                "id": rec.id,
                "image_path": rel,
                "text_en": rec.text_en,
                "text_zh": rec.text_zh,
                "categories": list(rec.categories),
                "modality": rec.modality.value,
                "source_kind": rec.source_kind.value,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return manifest_path


def load_corpus(path: str | Path, name: str | None = None) -> Corpus:
    """Load a corpus from a JSON-lines manifest, verifying all invariants."""
    path = Path(path)
    if not path.is_file():
        raise CorpusLoadError(f"manifest not found: {path}")
    records = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusLoadError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rec_id = str(row.get("id", f"<line {lineno}>"))
            if rec_id in seen:
                raise CorpusLoadError(f"{path}:{lineno}: duplicate record id {rec_id!r}")
            seen.add(rec_id)
            image_path = path.parent / row["image_path"]
            if not image_path.is_file():
                raise CorpusLoadError(
                    f"record {rec_id!r}: missing image file {row['image_path']!r}"
                )
            image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)
            try:
                rec = ImageTextRecord(
                    id=rec_id,
                    image=image,
                    text_en=row.get("text_en", ""),
                    text_zh=row.get("text_zh", ""),
                    categories=tuple(row.get("categories", ())),
                    modality=Modality(row["modality"]),
                    source_kind=SourceKind(row["source_kind"]),
                )
            except (RecordError, ValueError, KeyError) as exc:
                raise CorpusLoadError(f"record {rec_id!r}: {exc}") from exc
            records.append(rec)
    return Corpus(records=tuple(records), name=name or path.stem)


def subsample_corpus(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Keep ceil(fraction * N) records, uniform without replacement, seeded."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(corpus.records)
    k = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(n)[:k])
    records = tuple(corpus.records[int(i)] for i in keep)
    return Corpus(records=records, name=f"{corpus.name}-sub{fraction:g}")
