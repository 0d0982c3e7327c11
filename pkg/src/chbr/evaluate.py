"""Dataset manifests, accuracy evaluation with seed replication, and the
representative-concept clustering utility."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .core import ClassLabel, ConceptBank
from .embedding import EmbeddingStore, prompt_key
from .errors import PreconditionError, ShapeError
from .inference import Providers, predict
from .likelihood import LikelihoodSpec
from .rng import substream


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    classes: tuple[ClassLabel, ...]
    items: tuple[tuple[str, str], ...]  # (image_id, true_class_id)

    def __post_init__(self):
        ids = {c.id for c in self.classes}
        image_ids = set()
        for image_id, true_class_id in self.items:
            if true_class_id not in ids:
                raise PreconditionError(
                    f"item {image_id!r} references unknown class {true_class_id!r}"
                )
            if image_id in image_ids:
                raise PreconditionError(f"duplicate image id {image_id!r}")
            image_ids.add(image_id)

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(
            name=doc["name"],
            classes=tuple(
                ClassLabel(id=c["id"], display_name=c["display_name"])
                for c in doc["classes"]
            ),
            items=tuple(
                (it["image_id"], it["true_class_id"]) for it in doc["items"]
            ),
        )

    @classmethod
    def from_csv(cls, path, name: str, classes) -> "DatasetManifest":
        """Convenience import: rows of image_id,true_class_id."""
        items = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0] == "image_id":
                    continue
                items.append((row[0], row[1]))
        return cls(name=name, classes=tuple(classes), items=tuple(items))


@dataclass(frozen=True)
class EvalReport:
    top1_accuracy: float
    per_seed: dict[int, float]
    mean: float
    std: float
    per_class: dict[str, float]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "top1_accuracy": self.top1_accuracy,
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "mean": self.mean,
            "std": self.std,
            "per_class": self.per_class,
            "config": self.config,
        }


def top1_accuracy(predictions, truths) -> float:
    """Fraction of exact id matches."""
    if len(predictions) != len(truths):
        raise ShapeError(
            f"{len(predictions)} predictions vs {len(truths)} truths"
        )
    if not predictions:
        raise PreconditionError("cannot score an empty prediction list")
    ids = lambda x: x.id if isinstance(x, ClassLabel) else x
    hits = sum(1 for p, t in zip(predictions, truths) if ids(p) == ids(t))
    return hits / len(predictions)


def run_eval(
    manifest: DatasetManifest,
    bank: ConceptBank,
    spec: LikelihoodSpec,
    providers: Providers,
    seeds=(0, 1, 2),
    logit_scale_scores=None,
) -> EvalReport:
    """Predict every item once per seed and aggregate accuracies.

    In precomputed-store mode all likelihoods are deterministic, so the seed
    loop reports identical accuracies (std 0) for average and confidence; the
    seed hook matters when views are generated from raw images.
    """
    if not manifest.items:
        raise PreconditionError("manifest has no items")
    if not seeds:
        raise PreconditionError("need at least one seed")
    per_seed = {}
    per_class_hits: dict[str, list[int]] = {c.id: [] for c in manifest.classes}
    for seed in seeds:
        _ = substream(seed, "augment")  # reserved for raster-augmenting providers
        preds, truths = [], []
        for image_id, true_class_id in manifest.items:
            result = predict(
                image_id, bank, spec, providers,
                logit_scale_scores=logit_scale_scores,
            )
            preds.append(result.predicted)
            truths.append(true_class_id)
            per_class_hits[true_class_id].append(
                1 if result.predicted.id == true_class_id else 0
            )
        per_seed[int(seed)] = top1_accuracy(preds, truths)
    accs = list(per_seed.values())
    mean = sum(accs) / len(accs)
    std = float(np.sqrt(sum((a - mean) ** 2 for a in accs) / len(accs)))
    per_class = {
        cid: (sum(hits) / len(hits) if hits else 0.0)
        for cid, hits in per_class_hits.items()
    }
    return EvalReport(
        top1_accuracy=mean,
        per_seed=per_seed,
        mean=mean,
        std=std,
        per_class=per_class,
        config={"likelihood": spec.kind, "seeds": [int(s) for s in seeds]},
    )


def _kmeans(points: np.ndarray, k: int, rng, max_iter: int = 100):
    """Seeded k-means++ over unit vectors; assignment by highest dot product.

    Returns (assignments, centroid indices of nearest member per cluster).
    """
    n = points.shape[0]
    # k-means++ init
    centers = np.zeros((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    for c in range(1, k):
        sims = points @ centers[:c].T  # (n, c)
        d2 = np.maximum(0.0, 1.0 - sims.max(axis=1)) ** 2
        total = d2.sum()
        if total <= 0:
            # all points coincide with chosen centers; fall back to round-robin
            centers[c] = points[c % n]
            continue
        probs = d2 / total
        centers[c] = points[int(rng.choice(n, p=probs))]

    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        sims = points @ centers.T
        new_assign = sims.argmax(axis=1)
        if np.array_equal(new_assign, assign) and _ > 0:
            break
        assign = new_assign
        for c in range(k):
            members = points[assign == c]
            if len(members) == 0:
                # reseed an empty cluster on the worst-covered point
                worst = int(np.argmin((points @ centers.T).max(axis=1)))
                centers[c] = points[worst]
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            centers[c] = mean / norm if norm > 0 else members[0]

    reps = []
    for c in range(k):
        member_idx = np.flatnonzero(assign == c)
        if len(member_idx) == 0:
            reps.append(-1)
            continue
        sims = points[member_idx] @ centers[c]
        reps.append(int(member_idx[int(sims.argmax())]))
    return assign, reps


def representative_concepts(
    bank: ConceptBank, class_id: str, text_store: EmbeddingStore, k: int,
    seed: int = 0,
) -> list[tuple[str, float]]:
    """Cluster a class's concept embeddings and rank cluster exemplars.

    The representative of each cluster is the member nearest its centroid;
    its probability is the cluster's share of the class's concepts. Sorted by
    probability descending.
    """
    wcs = bank.concepts_for(class_id)
    m = len(wcs)
    if k > m:
        raise PreconditionError(f"k={k} exceeds the {m} concepts of {class_id!r}")
    points = np.stack(
        [text_store.get(prompt_key(wc.concept.text)) for wc in wcs]
    )
    rng = substream(seed, "clustering", class_id)
    assign, reps = _kmeans(points, k, rng)
    out = []
    for c in range(k):
        size = int(np.sum(assign == c))
        if size == 0 or reps[c] < 0:
            continue
        out.append((wcs[reps[c]].concept.text, size / m))
    out.sort(key=lambda t: -t[1])
    return out
