"""Shared domain types: classes, concepts, concept banks, prompt templates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import PreconditionError, TemplateError

CLASS_SLOT = "{class}"
CONCEPT_SLOT = "{concept}"

DEFAULT_BASE_PATTERN = "A photo of a {class}."
DEFAULT_CONCEPT_PATTERN = "A photo of a {class} with {concept}."


@dataclass(frozen=True)
class ClassLabel:
    id: str
    display_name: str

    def __post_init__(self):
        if not self.display_name.strip():
            raise PreconditionError(f"class {self.id!r} has an empty display_name")


@dataclass(frozen=True)
class Concept:
    """One sampled concept phrase owned by a class.

    Empty text is the explicit "no concept" marker (the bare class prompt is
    used for scoring); otherwise text must carry no surrounding whitespace or
    newlines.
    """

    text: str
    class_id: str
    sample_index: int

    def __post_init__(self):
        if "\n" in self.text or "\r" in self.text:
            raise PreconditionError("concept text must not contain newlines")
        if self.text != self.text.strip():
            raise PreconditionError("concept text must not have surrounding whitespace")
        if self.sample_index < 0:
            raise PreconditionError("sample_index must be non-negative")


@dataclass(frozen=True)
class WeightedConcept:
    concept: Concept
    success_rate: float
    importance_weight: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise PreconditionError(
                f"success_rate {self.success_rate} outside [0, 1]"
            )
        if self.importance_weight < 0.0:
            raise PreconditionError("importance_weight must be non-negative")


@dataclass(frozen=True)
class ConceptBank:
    task_name: str
    classes: tuple[ClassLabel, ...]
    concepts: dict[str, tuple[WeightedConcept, ...]]
    sampler_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise PreconditionError("duplicate class ids in bank")
        known = set(ids)
        for class_id, wcs in self.concepts.items():
            if class_id not in known:
                raise PreconditionError(f"concepts reference unknown class {class_id!r}")
            if len(wcs) < 1:
                raise PreconditionError(f"class {class_id!r} has an empty concept list")
            for wc in wcs:
                if wc.concept.class_id != class_id:
                    raise PreconditionError(
                        f"concept {wc.concept.text!r} owned by {wc.concept.class_id!r} "
                        f"filed under {class_id!r}"
                    )

    def concepts_for(self, class_id: str) -> tuple[WeightedConcept, ...]:
        return self.concepts[class_id]

    def to_json(self) -> str:
        """Deterministic serialization: sorted keys, concepts by sample_index."""
        doc = {
            "task_name": self.task_name,
            "classes": [
                {"id": c.id, "display_name": c.display_name} for c in self.classes
            ],
            "concepts": {
                class_id: [
                    {
                        "text": wc.concept.text,
                        "sample_index": wc.concept.sample_index,
                        "success_rate": wc.success_rate,
                        "importance_weight": wc.importance_weight,
                    }
                    for wc in sorted(wcs, key=lambda w: w.concept.sample_index)
                ]
                for class_id, wcs in self.concepts.items()
            },
            "sampler_meta": self.sampler_meta,
        }
        return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ConceptBank":
        doc = json.loads(text)
        classes = tuple(
            ClassLabel(id=c["id"], display_name=c["display_name"])
            for c in doc["classes"]
        )
        concepts = {}
        for class_id, rows in doc["concepts"].items():
            concepts[class_id] = tuple(
                WeightedConcept(
                    concept=Concept(
                        text=r["text"],
                        class_id=class_id,
                        sample_index=r["sample_index"],
                    ),
                    success_rate=r["success_rate"],
                    importance_weight=r["importance_weight"],
                )
                for r in rows
            )
        return cls(
            task_name=doc["task_name"],
            classes=classes,
            concepts=concepts,
            sampler_meta=doc.get("sampler_meta", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ConceptBank":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class PromptTemplate:
    base_pattern: str = DEFAULT_BASE_PATTERN
    concept_pattern: str = DEFAULT_CONCEPT_PATTERN

    def __post_init__(self):
        if self.base_pattern.count(CLASS_SLOT) != 1:
            raise TemplateError(
                f"base_pattern must contain exactly one {CLASS_SLOT} placeholder"
            )
        if self.concept_pattern.count(CLASS_SLOT) != 1:
            raise TemplateError(
                f"concept_pattern must contain exactly one {CLASS_SLOT} placeholder"
            )
        if self.concept_pattern.count(CONCEPT_SLOT) != 1:
            raise TemplateError(
                f"concept_pattern must contain exactly one {CONCEPT_SLOT} placeholder"
            )


def render_prompt(
    template: PromptTemplate, label: ClassLabel, concept: Optional[Concept] = None
) -> str:
    """Substitute class (and concept) text verbatim into the template."""
    if concept is None or concept.text == "":
        return template.base_pattern.replace(CLASS_SLOT, label.display_name)
    out = template.concept_pattern.replace(CLASS_SLOT, label.display_name)
    return out.replace(CONCEPT_SLOT, concept.text)
