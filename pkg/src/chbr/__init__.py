"""Concept-guided Bayesian zero-shot classification.

Samples discriminative per-class concepts from an LLM via importance
sampling, reweights them per test image with one of three likelihoods, and
classifies by marginalizing concept-conditioned embedding similarities.
"""

from .core import (
    ClassLabel,
    Concept,
    ConceptBank,
    PromptTemplate,
    WeightedConcept,
    render_prompt,
)
from .embedding import EmbeddingStore, cosine_similarity, normalize, prompt_key
from .likelihood import LikelihoodSpec, TtaConfig
from .sampler import SamplerConfig, sample_concept_bank

__all__ = [
    "ClassLabel",
    "Concept",
    "ConceptBank",
    "PromptTemplate",
    "WeightedConcept",
    "render_prompt",
    "EmbeddingStore",
    "cosine_similarity",
    "normalize",
    "prompt_key",
    "LikelihoodSpec",
    "TtaConfig",
    "SamplerConfig",
    "sample_concept_bank",
]

__version__ = "0.1.0"
