"""Downstream transfer protocols and metrics.

Zero-shot prompt classification, cache-based few-shot adaptation (training
free and finetuned), residual bottleneck adapters, linear probing on a frozen
encoder, and stratified k-fold evaluation with balanced accuracy, one-vs-rest
AUC, and macro F1.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from torch import nn

from .data import DEFAULT_PROMPT_TEMPLATE, Corpus, fill_prompt
from .training import PretrainModel

DEFAULT_TIP_BETA = 5.5
DEFAULT_TIP_MIX = 1.0
DEFAULT_CLIP_ADAPTER_RATIO = 0.2

PROTOCOLS = ("zeroshot", "clipadapter", "tipadapter", "tipadapter-f", "linear")


# ---------------------------------------------------------------------------
# Zero-shot head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroShotHead:
    """Encoded class prompts: one unit-norm row per class."""

    class_names: tuple[str, ...]
    class_embeddings: np.ndarray

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValueError("a zero-shot head needs at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names")
        emb = np.asarray(self.class_embeddings)
        if emb.shape[0] != len(self.class_names):
            raise ValueError("one embedding row per class required")
        norms = np.linalg.norm(emb, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("class embeddings must be unit-norm")
        object.__setattr__(self, "class_embeddings", emb)


def build_zero_shot_head(
    class_names: list[str], template: str, model: PretrainModel
) -> ZeroShotHead:
    """Encode one filled prompt per class into a classification head."""
    prompts = [fill_prompt(name, template) for name in class_names]
    with torch.no_grad():
        emb = model.bundle.encode_texts(prompts).matrix.numpy()
    return ZeroShotHead(class_names=tuple(class_names), class_embeddings=emb)


def zero_shot_scores(embeddings: np.ndarray, head: ZeroShotHead) -> np.ndarray:
    """Similarity of image embeddings against each class prompt."""
    return np.asarray(embeddings) @ head.class_embeddings.T


def zero_shot_classify(
    images, head: ZeroShotHead, model: PretrainModel
) -> tuple[np.ndarray, np.ndarray]:
    """Predict classes for raw images; ties go to the lowest class index."""
    with torch.no_grad():
        emb = model.bundle.encode_images(images).matrix.numpy()
    scores = zero_shot_scores(emb, head)
    return scores.argmax(axis=1), scores


# ---------------------------------------------------------------------------
# Few-shot adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdapterCache:
    """Key/value store of few-shot embeddings for cache-based prediction."""

    keys: np.ndarray
    values: np.ndarray
    beta: float = DEFAULT_TIP_BETA
    mix: float = DEFAULT_TIP_MIX

    def __post_init__(self):
        keys = np.asarray(self.keys)
        values = np.asarray(self.values)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.mix < 0:
            raise ValueError("mix must be nonnegative")
        if keys.shape[0] != values.shape[0]:
            raise ValueError("keys and values must be row-aligned")
        if not np.allclose(np.linalg.norm(keys, axis=1), 1.0, atol=1e-5):
            raise ValueError("cache keys must be unit-norm")
        one_hot = (values.sum(axis=1) == 1) & np.isin(values, (0, 1)).all(axis=1)
        if not one_hot.all():
            raise ValueError("cache values must be one-hot rows")


def build_adapter_cache(
    shot_embeddings: np.ndarray,
    shot_labels: np.ndarray,
    num_classes: int,
    beta: float = DEFAULT_TIP_BETA,
    mix: float = DEFAULT_TIP_MIX,
) -> AdapterCache:
    values = np.zeros((len(shot_labels), num_classes), dtype=np.float64)
    values[np.arange(len(shot_labels)), np.asarray(shot_labels, dtype=int)] = 1.0
    return AdapterCache(keys=np.asarray(shot_embeddings), values=values, beta=beta, mix=mix)


def tip_adapter_predict(
    image_emb: np.ndarray, cache: AdapterCache, head: ZeroShotHead
) -> np.ndarray:
    """Blend cache affinities with zero-shot scores (training free).

    Accepts a single (d,) embedding or an (N, d) batch. With mix=0 the result
    is exactly the zero-shot score path.
    """
    emb = np.asarray(image_emb)
    squeeze = emb.ndim == 1
    if squeeze:
        emb = emb[None, :]
    if emb.shape[1] != cache.keys.shape[1]:
        raise ValueError(
            f"embedding width {emb.shape[1]} does not match cache keys {cache.keys.shape[1]}"
        )
    scores = zero_shot_scores(emb, head)
    if cache.mix != 0:
        affinity = np.exp(-cache.beta * (1.0 - emb @ cache.keys.T))
        scores = cache.mix * (affinity @ cache.values) + scores
    return scores[0] if squeeze else scores


def fit_tip_adapter_keys(
    cache: AdapterCache,
    shot_embeddings: np.ndarray,
    shot_labels: np.ndarray,
    head: ZeroShotHead,
    lr: float = 1e-2,
    epochs: int = 200,
    seed: int = 0,
) -> AdapterCache:
    """Finetune cache keys on few-shot cross entropy (the "-f" variant).

    Keys are optimized through an L2 normalization so the returned cache keeps
    unit-norm keys.
    """
    torch.manual_seed(seed)
    raw_keys = nn.Parameter(torch.tensor(cache.keys, dtype=torch.float32))
    values = torch.tensor(cache.values, dtype=torch.float32)
    emb = torch.tensor(np.asarray(shot_embeddings), dtype=torch.float32)
    labels = torch.tensor(np.asarray(shot_labels), dtype=torch.long)
    zs = torch.tensor(zero_shot_scores(np.asarray(shot_embeddings), head), dtype=torch.float32)
    opt = torch.optim.Adam([raw_keys], lr=lr)
    for _ in range(epochs):
        keys = F.normalize(raw_keys, dim=1)
        affinity = torch.exp(-cache.beta * (1.0 - emb @ keys.T))
        logits = cache.mix * (affinity @ values) + zs
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        fitted = F.normalize(raw_keys, dim=1).numpy().astype(np.float64)
    return AdapterCache(keys=fitted, values=cache.values, beta=cache.beta, mix=cache.mix)


class ClipAdapter(nn.Module):
    """Residual bottleneck on image embeddings, blended by a fixed ratio."""

    def __init__(self, dim: int, ratio: float = DEFAULT_CLIP_ADAPTER_RATIO):
        super().__init__()
        hidden = max(dim // 4, 1)
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        # Zero init keeps the adapted embedding collinear with the input, so
        # initial predictions equal zero-shot predictions.
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)
        self.ratio = ratio

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        adapted = self.ratio * self.up(F.relu(self.down(x))) + (1.0 - self.ratio) * x
        return F.normalize(adapted, dim=1)


def clip_adapter_fit(
    train_embeddings: np.ndarray,
    labels: np.ndarray,
    head: ZeroShotHead,
    ratio: float = DEFAULT_CLIP_ADAPTER_RATIO,
    lr: float = 1e-2,
    epochs: int = 200,
    seed: int = 0,
) -> ClipAdapter:
    """Train the bottleneck adapter on few shots against head logits."""
    labels = np.asarray(labels, dtype=int)
    present = set(labels.tolist())
    missing = [i for i in range(len(head.class_names)) if i not in present]
    if missing:
        raise ValueError(f"no shots for classes {missing}")
    torch.manual_seed(seed)
    adapter = ClipAdapter(dim=np.asarray(train_embeddings).shape[1], ratio=ratio)
    emb = torch.tensor(np.asarray(train_embeddings), dtype=torch.float32)
    target = torch.tensor(labels, dtype=torch.long)
    head_t = torch.tensor(head.class_embeddings, dtype=torch.float32)
    opt = torch.optim.Adam(adapter.parameters(), lr=lr)
    for _ in range(epochs):
        logits = adapter(emb) @ head_t.T
        loss = F.cross_entropy(logits, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return adapter


def clip_adapter_predict(
    embeddings: np.ndarray, adapter: ClipAdapter, head: ZeroShotHead
) -> np.ndarray:
    with torch.no_grad():
        adapted = adapter(torch.tensor(np.asarray(embeddings), dtype=torch.float32)).numpy()
    return zero_shot_scores(adapted, head)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


def linear_probe_fit(
    embeddings: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    lr: float = 1e-2,
    epochs: int = 300,
    seed: int = 0,
) -> nn.Linear:
    """Fit a single affine layer on frozen-encoder embeddings.

    The encoder never participates: embeddings are precomputed without
    gradients, so encoder parameters cannot change.
    """
    labels = np.asarray(labels, dtype=int)
    missing = sorted(set(range(num_classes)) - set(labels.tolist()))
    if missing:
        raise ValueError(f"classes {missing} absent from the train split")
    torch.manual_seed(seed)
    probe = nn.Linear(np.asarray(embeddings).shape[1], num_classes)
    emb = torch.tensor(np.asarray(embeddings), dtype=torch.float32)
    target = torch.tensor(labels, dtype=torch.long)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        loss = F.cross_entropy(probe(emb), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return probe


def linear_probe_predict(embeddings: np.ndarray, probe: nn.Linear) -> np.ndarray:
    with torch.no_grad():
        return probe(torch.tensor(np.asarray(embeddings), dtype=torch.float32)).numpy()


def encoder_checksum(model: nn.Module) -> str:
    """Digest of all parameters; unchanged checksum proves a frozen encoder."""
    digest = hashlib.sha256()
    for name, param in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(param.numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldMetrics:
    aca: float
    auc: float
    f1: float


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics as the arithmetic mean over folds."""

    aca: float
    auc: float
    f1: float
    per_fold: tuple[FoldMetrics, ...]
    n_folds: int

    @classmethod
    def from_folds(cls, folds: list[FoldMetrics]) -> "MetricReport":
        return cls(
            aca=float(np.mean([f.aca for f in folds])),
            auc=float(np.mean([f.auc for f in folds])),
            f1=float(np.mean([f.f1 for f in folds])),
            per_fold=tuple(folds),
            n_folds=len(folds),
        )

    def as_dict(self) -> dict:
        return {
            "aca": self.aca,
            "auc": self.auc,
            "f1": self.f1,
            "n_folds": self.n_folds,
            "per_fold": [
                {"aca": f.aca, "auc": f.auc, "f1": f.f1} for f in self.per_fold
            ],
        }


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under ROC via the rank statistic; tied scores count half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # midranks, so ties contribute exactly half
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(
    pred_scores: np.ndarray, labels: np.ndarray, balanced: bool = True
) -> FoldMetrics:
    """Balanced accuracy, one-vs-rest AUC, and macro F1 from a score matrix.

    1-d scores are treated as binary positive-class scores. Classes without
    true samples are excluded from the averages with a warning; per-class AUC
    additionally requires at least one negative.
    """
    scores = np.asarray(pred_scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim == 1:
        scores = np.column_stack([1.0 - scores, scores])
    if len(labels) < 1:
        raise ValueError("need at least one sample")
    n_classes = scores.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")

    preds = scores.argmax(axis=1)
    accs, f1s, aucs = [], [], []
    for c in range(n_classes):
        true_c = labels == c
        if not true_c.any():
            warnings.warn(f"class {c} has no true samples; excluded from metric averages")
            continue
        pred_c = preds == c
        accs.append(float((preds[true_c] == c).mean()))
        tp = float((pred_c & true_c).sum())
        denom = 2 * tp + float((pred_c & ~true_c).sum()) + float((~pred_c & true_c).sum())
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
        if (~true_c).any():
            aucs.append(binary_auc(scores[:, c], true_c))
        else:
            warnings.warn(f"class {c} has no negatives; excluded from AUC average")

    aca = float(np.mean(accs)) if balanced else float((preds == labels).mean())
    return FoldMetrics(
        aca=aca,
        auc=float(np.mean(aucs)) if aucs else 0.0,
        f1=float(np.mean(f1s)),
    )


# ---------------------------------------------------------------------------
# K-fold evaluation
# ---------------------------------------------------------------------------


def stratified_kfold(labels: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Seeded stratified fold assignment; each index lands in one test fold.

    Falls back to an unstratified split (with a warning) when some class has
    fewer samples than folds.
    """
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(labels) < k:
        raise ValueError(f"cannot make {k} folds from {len(labels)} records")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    counts = np.bincount(labels)
    if counts[counts > 0].min() < k:
        warnings.warn("a class has fewer samples than folds; using unstratified folds")
        order = rng.permutation(len(labels))
        for slot, idx in enumerate(order):
            folds[slot % k].append(int(idx))
    else:
        for c in np.unique(labels):
            members = rng.permutation(np.flatnonzero(labels == c))
            for slot, idx in enumerate(members):
                folds[slot % k].append(int(idx))
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def select_shots(
    labels: np.ndarray, shots: int, seed: int, candidates: np.ndarray
) -> np.ndarray:
    """Pick `shots` seeded examples per class from the candidate indices."""
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in np.unique(labels[candidates]):
        pool = candidates[labels[candidates] == c]
        if len(pool) < shots:
            raise ValueError(f"class {c} has only {len(pool)} candidates for {shots} shots")
        chosen.extend(rng.permutation(pool)[:shots].tolist())
    return np.sort(np.array(chosen, dtype=int))


def encode_corpus(
    model: PretrainModel, corpus: Corpus, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Embed every corpus image (no gradients) and map labels to indices."""
    class_index = {name: i for i, name in enumerate(corpus.category_vocabulary)}
    labels = []
    for rec in corpus.records:
        if not rec.categories:
            raise ValueError(f"record {rec.id!r} has no category label to evaluate against")
        labels.append(class_index[rec.categories[0]])
    chunks = []
    with torch.no_grad():
        for start in range(0, len(corpus.records), batch_size):
            batch = [r.image for r in corpus.records[start : start + batch_size]]
            chunks.append(model.bundle.encode_images(batch).matrix.numpy())
    return np.concatenate(chunks), np.array(labels, dtype=int)


def _fold_scores(
    protocol: str,
    embeddings: np.ndarray,
    labels: np.ndarray,
    head: ZeroShotHead,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    shots: int,
    seed: int,
    tip_beta: float,
    tip_mix: float,
    adapter_ratio: float,
) -> np.ndarray:
    num_classes = len(head.class_names)
    if protocol == "zeroshot":
        return zero_shot_scores(embeddings[test_idx], head)
    if protocol in ("tipadapter", "tipadapter-f"):
        shot_idx = select_shots(labels, shots, seed, train_idx)
        cache = build_adapter_cache(
            embeddings[shot_idx], labels[shot_idx], num_classes, beta=tip_beta, mix=tip_mix
        )
        if protocol == "tipadapter-f":
            cache = fit_tip_adapter_keys(
                cache, embeddings[shot_idx], labels[shot_idx], head, seed=seed
            )
        return tip_adapter_predict(embeddings[test_idx], cache, head)
    if protocol == "clipadapter":
        shot_idx = select_shots(labels, shots, seed, train_idx)
        adapter = clip_adapter_fit(
            embeddings[shot_idx], labels[shot_idx], head, ratio=adapter_ratio, seed=seed
        )
        return clip_adapter_predict(embeddings[test_idx], adapter, head)
    if protocol == "linear":
        probe = linear_probe_fit(
            embeddings[train_idx], labels[train_idx], num_classes, seed=seed
        )
        return linear_probe_predict(embeddings[test_idx], probe)
    raise ValueError(f"unknown protocol {protocol!r} (expected one of {PROTOCOLS})")


def kfold_evaluate(
    model: PretrainModel,
    corpus: Corpus,
    protocol: str,
    k: int = 5,
    seed: int = 0,
    shots: int = 5,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    balanced: bool = True,
    tip_beta: float = DEFAULT_TIP_BETA,
    tip_mix: float = DEFAULT_TIP_MIX,
    adapter_ratio: float = DEFAULT_CLIP_ADAPTER_RATIO,
) -> MetricReport:
    """Run a transfer protocol under seeded stratified k-fold evaluation."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r} (expected one of {PROTOCOLS})")
    embeddings, labels = encode_corpus(model, corpus)
    head = build_zero_shot_head(list(corpus.category_vocabulary), template, model)
    folds = stratified_kfold(labels, k, seed)
    all_idx = np.arange(len(labels))
    results = []
    for test_idx in folds:
        train_idx = np.setdiff1d(all_idx, test_idx)
        scores = _fold_scores(
            protocol, embeddings, labels, head, train_idx, test_idx, shots, seed,
            tip_beta, tip_mix, adapter_ratio,
        )
        results.append(compute_metrics(scores, labels[test_idx], balanced=balanced))
    return MetricReport.from_folds(results)


def linear_probe_split_eval(
    model: PretrainModel,
    corpus: Corpus,
    train_fraction: float,
    seed: int = 0,
    balanced: bool = True,
) -> FoldMetrics:
    """Single-split linear probe supporting the 20/40/60/80% train grid."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must lie in (0, 1)")
    embeddings, labels = encode_corpus(model, corpus)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(round(train_fraction * len(labels)))
    train_idx, test_idx = np.sort(order[:cut]), np.sort(order[cut:])
    probe = linear_probe_fit(
        embeddings[train_idx], labels[train_idx], len(corpus.category_vocabulary), seed=seed
    )
    scores = linear_probe_predict(embeddings[test_idx], probe)
    return compute_metrics(scores, labels[test_idx], balanced=balanced)
