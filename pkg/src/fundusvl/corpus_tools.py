"""Reproducible corpus construction steps.

Covers sub-figure caption separation, color-histogram based modality
classification, and gamma color correction for dark-toned source scans.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from .data import Corpus, ImageTextRecord, Modality, SourceKind

HISTOGRAM_BINS = 32
DEFAULT_DEHAZE_GAMMA = 0.8

# "Figure 12-4" / "Fig. 3" / "Fig 7.2"; the number may carry one dash/dot
# separated part, but a separator must be followed by digits so the sentence
# period after "Figure 3." is not swallowed.
_FIGURE_HEADER = re.compile(r"^(Figure|Fig\.?)\s*(\d+(?:[-.]\d+)?)")
# Subcaption opener: a single capital letter, a period, then whitespace.
_LETTER_MARKER = re.compile(r"\b([A-Z])\.\s")


class CaptionParseError(ValueError):
    """Raw caption text does not match the figure-caption grammar."""


@dataclass(frozen=True)
class CaptionBlock:
    """A figure id with its per-letter subcaptions."""

    figure_id: str
    subcaptions: tuple[tuple[str, str], ...]

    def __post_init__(self):
        letters = [letter for letter, _ in self.subcaptions]
        if letters != sorted(set(letters)):
            raise CaptionParseError(f"subcaption letters not strictly increasing: {letters}")
        for letter, caption in self.subcaptions:
            if not caption:
                raise CaptionParseError(f"empty caption for subfigure {letter!r}")


@dataclass(frozen=True)
class ColorHistogram:
    """Concatenated per-channel histogram (32 bins x RGB)."""

    bins: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.shape != (3 * HISTOGRAM_BINS,):
            raise ValueError(f"expected {3 * HISTOGRAM_BINS} bins, got shape {bins.shape}")
        if np.any(bins < 0):
            raise ValueError("histogram bins must be nonnegative")
        if self.normalized and abs(bins.sum() - 1.0) > 1e-9:
            raise ValueError(f"normalized histogram sums to {bins.sum()}, not 1")
        object.__setattr__(self, "bins", bins)
        bins.setflags(write=False)


def split_caption(raw_text: str) -> CaptionBlock:
    """Split a raw figure caption into per-subfigure captions.

    The figure header opens the block; each subcaption is opened by a capital
    letter marker like "A. ". A caption with no letter markers becomes a
    single implicit subcaption with letter 'A'.
    """
    if not raw_text:
        raise CaptionParseError("empty caption text")
    header = _FIGURE_HEADER.match(raw_text)
    if header is None:
        raise CaptionParseError(f"no figure header in {raw_text[:60]!r}")
    rest = raw_text[header.end() :]
    # Drop the punctuation that terminates the header ("Figure 3." / "Fig 2:").
    rest = re.sub(r"^\s*[.:]?\s*", "", rest)

    markers = list(_LETTER_MARKER.finditer(rest))
    if not markers:
        caption = rest.strip()
        if not caption:
            raise CaptionParseError(f"figure {header.group(2)!r} has an empty caption")
        return CaptionBlock(figure_id=header.group(2), subcaptions=(("A", caption),))

    parts = []
    for i, marker in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(rest)
        parts.append((marker.group(1), rest[marker.end() : end].strip()))
    # Text between header and first marker belongs with the first subcaption;
    # nothing outside the markers may be dropped.
    leading = rest[: markers[0].start()].strip()
    if leading:
        parts[0] = (parts[0][0], f"{leading} {parts[0][1]}".strip())
    return CaptionBlock(figure_id=header.group(2), subcaptions=tuple(parts))


def color_histogram(image: np.ndarray) -> ColorHistogram:
    """Per-channel 32-bin histogram over [0, 255], concatenated, L1-normalized."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be HxWx3")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("empty image")
    chunks = []
    for ch in range(3):
        # uint8 >> 3 maps [0, 255] onto the 32 equal-width bins.
        values = (image[:, :, ch].astype(np.uint8) >> 3).ravel()
        chunks.append(np.bincount(values, minlength=HISTOGRAM_BINS).astype(np.float64))
    bins = np.concatenate(chunks)
    return ColorHistogram(bins=bins / bins.sum(), normalized=True)


def _red_dominance(centroid: np.ndarray) -> float:
    # Mean red level minus the average mean green/blue level, from bin centers.
    # Plain per-channel mass cannot discriminate: normalization fixes each
    # channel's mass at exactly 1/3.
    centers = np.arange(HISTOGRAM_BINS) * 8.0 + 4.0
    red = float(centroid[:HISTOGRAM_BINS] @ centers)
    green = float(centroid[HISTOGRAM_BINS : 2 * HISTOGRAM_BINS] @ centers)
    blue = float(centroid[2 * HISTOGRAM_BINS :] @ centers)
    return red - 0.5 * (green + blue)


def classify_modality(
    histograms: list[ColorHistogram],
    refs: tuple[ColorHistogram, ColorHistogram],
) -> list[Modality]:
    """Assign CFP / FFA / OCT to each histogram.

    K-means (K=3, fixed seed) partitions the histograms; the cluster whose
    centroid is most red-dominant (strictly) is CFP, and the remaining items
    are labeled FFA or OCT by which reference histogram is closer in L2,
    preferring FFA on an exact tie.
    """
    if len(histograms) < 3:
        raise ValueError(f"need at least 3 histograms, got {len(histograms)}")
    ffa_ref, oct_ref = refs
    for ref in (ffa_ref, oct_ref):
        if not ref.normalized:
            raise ValueError("reference histograms must be normalized")
    x = np.stack([h.bins for h in histograms])
    km = KMeans(n_clusters=3, init="k-means++", n_init=10, max_iter=100, random_state=0)
    assignments = km.fit_predict(x)

    dominance = np.array([_red_dominance(c) for c in km.cluster_centers_])
    best = int(np.argmax(dominance))
    has_strict_winner = int(np.sum(dominance == dominance[best])) == 1

    labels = []
    for i, h in enumerate(histograms):
        if has_strict_winner and assignments[i] == best:
            labels.append(Modality.CFP)
            continue
        d_ffa = float(np.linalg.norm(h.bins - ffa_ref.bins))
        d_oct = float(np.linalg.norm(h.bins - oct_ref.bins))
        labels.append(Modality.FFA if d_ffa <= d_oct else Modality.OCT)
    return labels


def gamma_correct(image: np.ndarray, gamma: float) -> np.ndarray:
    """Map each channel value x to 255 * (x/255)^gamma, rounded half-to-even."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("image must be uint8")
    lut = np.rint(255.0 * (np.arange(256, dtype=np.float64) / 255.0) ** gamma).astype(np.uint8)
    return lut[image]


def build_corpus_from_raw(
    input_dir: str | Path,
    name: str = "book-corpus",
    dehaze_gamma: float | None = None,
    ffa_ref_path: str | Path | None = None,
    oct_ref_path: str | Path | None = None,
) -> Corpus:
    """Assemble an expert corpus from a directory of images and caption files.

    Every `<stem>.txt` holds one raw caption; its subfigure with letter L maps
    to `<stem>_L.png` (or `<stem>.png` when the caption has a single implicit
    subcaption). Modalities are classified from color histograms when both
    reference images are given and at least 3 images are present; otherwise
    everything defaults to CFP.
    """
    from PIL import Image as PILImage

    input_dir = Path(input_dir)
    records: list[dict] = []
    for caption_file in sorted(input_dir.glob("*.txt")):
        block = split_caption(caption_file.read_text(encoding="utf-8").strip())
        for letter, caption in block.subcaptions:
            lettered = input_dir / f"{caption_file.stem}_{letter}.png"
            plain = input_dir / f"{caption_file.stem}.png"
            image_path = lettered if lettered.is_file() else plain
            if not image_path.is_file():
                raise CorpusLoadError(
                    f"no image for caption {caption_file.name} subfigure {letter!r}"
                )
            image = np.asarray(PILImage.open(image_path).convert("RGB"), dtype=np.uint8)
            if dehaze_gamma is not None:
                image = gamma_correct(image, dehaze_gamma)
            records.append(
                {"id": f"{caption_file.stem}-{letter}", "image": image, "text": caption}
            )

    modalities = [Modality.CFP] * len(records)
    if ffa_ref_path is not None and oct_ref_path is not None and len(records) >= 3:
        refs = tuple(
            color_histogram(np.asarray(PILImage.open(p).convert("RGB"), dtype=np.uint8))
            for p in (ffa_ref_path, oct_ref_path)
        )
        modalities = classify_modality([color_histogram(r["image"]) for r in records], refs)

    built = tuple(
        ImageTextRecord(
            id=r["id"],
            image=r["image"],
            text_en=r["text"],
            modality=m,
            source_kind=SourceKind.EXPERT_PAIR,
        )
        for r, m in zip(records, modalities)
    )
    return Corpus(records=built, name=name)
