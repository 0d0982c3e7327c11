"""Concept-conditioned scoring and the marginalized classification rule."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ClassLabel, ConceptBank, PromptTemplate, render_prompt
from .embedding import EmbeddingStore, cosine_similarity, prompt_key
from .errors import MissingEmbeddingError, PreconditionError, ShapeError
from .likelihood import (
    LikelihoodSpec,
    average_likelihood,
    confidence_likelihood,
    softmax,
    tta_optimize,
)
from .rng import substream


class PromptEmbedder:
    """Prompt -> unit text embedding, backed by a store or a remote client.

    Store ids are 64-bit content hashes of the rendered prompt; the cache
    keeps the full string beside each vector so a hash collision is detected
    rather than silently served.
    """

    def __init__(self, store: Optional[EmbeddingStore] = None, client=None):
        if store is None and client is None:
            raise PreconditionError("need an embedding store or a remote client")
        self.store = store
        self.client = client
        self._cache: dict[str, tuple[str, np.ndarray]] = {}
        self._lock = threading.Lock()

    def embed(self, prompt: str) -> np.ndarray:
        key = prompt_key(prompt)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            cached_prompt, vec = hit
            if cached_prompt != prompt:
                raise PreconditionError(
                    f"prompt hash collision: {cached_prompt!r} vs {prompt!r}"
                )
            return vec
        if self.store is not None and key in self.store:
            vec = self.store.get(key)
        elif self.client is not None:
            vec = self.client.embed("text", [prompt])[0]
        else:
            raise MissingEmbeddingError(
                f"no embedding for prompt {prompt!r} (store id {key})"
            )
        with self._lock:
            self._cache.setdefault(key, (prompt, vec))
        return vec


@dataclass
class Providers:
    """Read-only bundle of everything predict needs besides the bank."""

    texts: PromptEmbedder
    images: EmbeddingStore
    template: PromptTemplate = field(default_factory=PromptTemplate)


@dataclass(frozen=True)
class PredictionResult:
    scores: dict[str, float]
    predicted: ClassLabel
    diagnostics: dict


def build_similarity_tensor(
    image_embs: np.ndarray | Sequence[np.ndarray],
    bank: ConceptBank,
    texts: PromptEmbedder,
    template: PromptTemplate,
) -> list:
    """Cosine similarities per (class, concept[, view]).

    With a single image embedding, returns one (M_i,) vector per class; with a
    sequence of view embeddings, one (M_i, N) matrix per class. Text
    embeddings are computed once per distinct prompt and cached.
    """
    single = isinstance(image_embs, np.ndarray) and image_embs.ndim == 1
    views = [image_embs] if single else list(image_embs)
    tensor = []
    for label in bank.classes:
        wcs = bank.concepts_for(label.id)
        rows = np.zeros((len(wcs), len(views)))
        for j, wc in enumerate(wcs):
            text_emb = texts.embed(render_prompt(template, label, wc.concept))
            for n, v in enumerate(views):
                rows[j, n] = cosine_similarity(text_emb, v)
        tensor.append(rows[:, 0] if single else rows)
    return tensor


def marginal_score(sims_row, likelihood_row, weights_row) -> float:
    """Sum_j sim * likelihood * weight, left to right at 64-bit precision."""
    if not (len(sims_row) == len(likelihood_row) == len(weights_row)):
        raise ShapeError(
            f"length mismatch: {len(sims_row)}, {len(likelihood_row)}, "
            f"{len(weights_row)}"
        )
    total = 0.0
    for s, l, w in zip(sims_row, likelihood_row, weights_row):
        total += float(s) * float(l) * float(w)
    return total


def _view_embeddings(image_id: str, images: EmbeddingStore, n: int) -> list:
    return [images.get(f"{image_id}#view{v}") for v in range(n)]


def _image_embedding(image_id: str, images: EmbeddingStore) -> np.ndarray:
    if image_id in images:
        return images.get(image_id)
    return images.get(f"{image_id}#view0")


def predict(
    image_id: str,
    bank: ConceptBank,
    spec: LikelihoodSpec,
    providers: Providers,
    logit_scale_scores: Optional[float] = None,
) -> PredictionResult:
    """Classify one image by marginalizing concept-conditioned similarities.

    Ties at the argmax break toward the lower class index. When
    logit_scale_scores is set, similarities are multiplied by it before any
    scoring (experimental alternative; default uses raw cosines).
    """
    weights = [
        np.array([wc.importance_weight for wc in bank.concepts_for(c.id)])
        for c in bank.classes
    ]
    diagnostics: dict = {"kind": spec.kind}

    if spec.kind == "tta":
        cfg = spec.tta
        view_embs = _view_embeddings(image_id, providers.images, cfg.num_views)
        view_sims = build_similarity_tensor(
            view_embs, bank, providers.texts, providers.template
        )
        if logit_scale_scores is not None:
            view_sims = [s * logit_scale_scores for s in view_sims]
        likelihood, tta_diag = tta_optimize(view_sims, weights, cfg)
        diagnostics.update(tta_diag)
        retained = tta_diag["retained_views"]
        scores = []
        for i in range(len(bank.classes)):
            per_view = [
                marginal_score(view_sims[i][:, v], likelihood[i], weights[i])
                for v in retained
            ]
            total = 0.0
            for x in per_view:
                total += x
            scores.append(total / len(retained))
        sims_for_diag = [view_sims[i][:, 0] for i in range(len(bank.classes))]
    else:
        image_emb = _image_embedding(image_id, providers.images)
        sims = build_similarity_tensor(
            image_emb, bank, providers.texts, providers.template
        )
        if logit_scale_scores is not None:
            sims = [s * logit_scale_scores for s in sims]
        if spec.kind == "average":
            likelihood = average_likelihood(bank)
        else:
            likelihood = confidence_likelihood(sims, spec.tau)
        scores = [
            marginal_score(sims[i], likelihood[i], weights[i])
            for i in range(len(bank.classes))
        ]
        sims_for_diag = sims

    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    predicted = bank.classes[best]

    contributions = {}
    for i, label in enumerate(bank.classes):
        wcs = bank.concepts_for(label.id)
        terms = [
            (wcs[j].concept.text, float(sims_for_diag[i][j] * likelihood[i][j] * weights[i][j]))
            for j in range(len(wcs))
        ]
        terms.sort(key=lambda t: -t[1])
        contributions[label.id] = terms[:3]
    diagnostics["top_contributions"] = contributions
    diagnostics["score_softmax"] = {
        c.id: float(p)
        for c, p in zip(bank.classes, softmax(np.asarray(scores)))
    }
    return PredictionResult(
        scores={c.id: float(s) for c, s in zip(bank.classes, scores)},
        predicted=predicted,
        diagnostics=diagnostics,
    )


def augment(image, n: int, seed: int, resolution: int = 224):
    """N deterministic views of a decoded raster image.

    View 0 is the center-resized original; views 1..N-1 are random resized
    crops (area scale in [0.08, 1], aspect ratio in [3/4, 4/3]) resized with
    bicubic interpolation.
    """
    from PIL import Image

    if n < 1:
        raise PreconditionError("need at least one view")
    if isinstance(image, np.ndarray):
        img = Image.fromarray(image)
    elif isinstance(image, Image.Image):
        img = image
    else:
        raise PreconditionError(f"cannot interpret {type(image).__name__} as an image")

    w, h = img.size
    if w == 0 or h == 0:
        raise PreconditionError("image has a zero dimension")

    views = []
    # view 0: resize the shorter side, then center crop
    scale = resolution / min(w, h)
    resized = img.resize(
        (max(resolution, round(w * scale)), max(resolution, round(h * scale))),
        Image.BICUBIC,
    )
    rw, rh = resized.size
    left = (rw - resolution) // 2
    top = (rh - resolution) // 2
    views.append(
        np.asarray(resized.crop((left, top, left + resolution, top + resolution)))
    )

    rng = substream(seed, "augment")
    for _ in range(1, n):
        for _attempt in range(10):
            area = w * h * rng.uniform(0.08, 1.0)
            log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
            ratio = float(np.exp(log_ratio))
            cw = int(round(np.sqrt(area * ratio)))
            ch = int(round(np.sqrt(area / ratio)))
            if 0 < cw <= w and 0 < ch <= h:
                left = int(rng.integers(0, w - cw + 1))
                top = int(rng.integers(0, h - ch + 1))
                crop = img.crop((left, top, left + cw, top + ch))
                break
        else:
            side = min(w, h)
            crop = img.crop(
                ((w - side) // 2, (h - side) // 2,
                 (w - side) // 2 + side, (h - side) // 2 + side)
            )
        views.append(
            np.asarray(crop.resize((resolution, resolution), Image.BICUBIC))
        )
    return views
