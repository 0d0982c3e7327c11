"""LLM-driven Monte Carlo importance sampler for discriminative concepts.

For each class it asks the model for a concept that separates the class from
a random window of distractors, then measures the concept's discriminative
success rate over repeated multiple-choice probes. The success rate doubles
as the importance weight because the proposal density is taken as 1.
"""

from __future__ import annotations

import ast
import json
import os
import re
import string
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

from .core import ClassLabel, Concept, ConceptBank, WeightedConcept
from .embedding import EmbeddingStore, cosine_similarity, prompt_key
from .errors import ParseError, PreconditionError, ProviderError
from .llm import LlmEndpointConfig, with_retries
from .rng import substream

GENERATION_SYSTEM_PROMPT = """\
You are a visual concept proposer tasked with enhancing text descriptions for zero-shot image classification on the test dataset using CLIP.
Given:
A core class from the test dataset. The set of other classes in the dataset.
Task:
Propose a concise, visually discriminative concept to append to the text description (i.e., "A photo of {Core Class} with {your concept}") that helps CLIP better distinguish the core class from the other classes.

Guidelines:
Analyze the unique visual characteristics of the core class compared to other classes.
Propose a concept that captures these discriminative visual features.
Ensure the concept is concrete, easily understandable by CLIP, and specific to the test dataset.

Please remember the proposed concept should enable CLIP to classify images of the core class more accurately while minimizing confusion with other classes in the zero-shot setting."""

GENERATION_USER_PROMPT = (
    "Core class: {core}. Other classes: {others}.  Please remember to present "
    'the concept with "The final concept is: " as a prefix in the last line.'
)

BATCH_GENERATION_USER_PROMPT = (
    "Core class: {core}. Other classes: {others}.  Propose {n} different "
    "concepts. Please remember to present each concept on its own line with "
    '"The final concept is: " as a prefix.'
)

TEST_SYSTEM_PROMPT = (
    "Please answer which class the concept belongs to. Just output the most "
    "possible class without external output."
)

TEST_USER_PROMPT = "Concept: {concept}. Classes: {classes}."

BATCH_TEST_SYSTEM_PROMPT = (
    "Please determine which class in image_object_classes the concept in the "
    "Python list image_object_concepts belongs to. Output a Python dict named "
    "predicted_dict where key is the concept and value is the predicted class, "
    "wrapped with triple backticks (''')."
)

BATCH_TEST_USER_PROMPT = (
    "image_object_concepts= {concepts}. image_object_classes=: {classes}."
)

FINAL_CONCEPT_PREFIX = "the final concept is:"

EFFICIENT_BATCH_SIZE = 10

VERDICT_TEMPERATURE = 0.0


@dataclass(frozen=True)
class SamplerConfig:
    llm: LlmEndpointConfig
    window_size: int = 4            # H distractors per draw
    samples_per_class: int = 100    # M concepts per class
    verifications: int = 5          # Z trials per concept
    seed: int = 0
    mode: str = "standard"          # "standard" | "efficient"

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise PreconditionError("samples_per_class must be >= 1")
        if self.verifications < 1:
            raise PreconditionError("verifications must be >= 1")
        if self.window_size < 1:
            raise PreconditionError("window_size must be >= 1")
        if self.mode not in ("standard", "efficient"):
            raise PreconditionError(f"unknown sampler mode {self.mode!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SamplerConfig":
        doc = dict(doc)
        doc["llm"] = LlmEndpointConfig.from_dict(doc["llm"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminativeTrial:
    concept_text: str
    target_class_id: str
    distractor_class_ids: tuple[str, ...]
    verdict: str  # "pass" | "fail"
    raw_answer: str

    def __post_init__(self):
        if self.target_class_id in self.distractor_class_ids:
            raise PreconditionError("target appears among distractors")
        if len(set(self.distractor_class_ids)) != len(self.distractor_class_ids):
            raise PreconditionError("distractors must be distinct")


def draw_candidate_set(
    classes: Sequence[ClassLabel], target: ClassLabel, h: int, rng
) -> list[ClassLabel]:
    """Draw h distinct non-target classes with the given generator."""
    others = [c for c in classes if c.id != target.id]
    if h > len(others):
        raise PreconditionError(
            f"window size {h} exceeds available distractors ({len(others)})"
        )
    idx = rng.choice(len(others), size=h, replace=False)
    return [others[int(i)] for i in idx]


def _clean_concept(text: str) -> str:
    """Trim whitespace, surrounding quotes, and a trailing period (stable)."""
    prev = None
    while text != prev:
        prev = text
        text = text.strip().strip("\"'").strip()
        if text.endswith("."):
            text = text[:-1]
    return text


def _concept_from_line(line: str) -> Optional[str]:
    pos = line.lower().find(FINAL_CONCEPT_PREFIX)
    if pos < 0:
        return None
    return _clean_concept(line[pos + len(FINAL_CONCEPT_PREFIX):]) or None


def parse_final_concept(reply: str) -> str:
    """Extract the concept after the last-line "The final concept is:" marker.

    Scans lines from last to first; the text after the marker is trimmed of
    whitespace, surrounding quotes, and a trailing period.
    """
    for line in reversed(reply.splitlines()):
        text = _concept_from_line(line)
        if text:
            return text
    raise ParseError("no line carries the final-concept prefix", raw=reply)


def parse_concept_list(reply: str, expected: int) -> list[str]:
    """All prefixed concept lines, first to last; must yield `expected` items."""
    found = [t for t in map(_concept_from_line, reply.splitlines()) if t]
    if len(found) != expected:
        raise ParseError(
            f"expected {expected} concept lines, found {len(found)}", raw=reply
        )
    return found


_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def _norm_answer(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def match_answer(
    raw_answer: str, options: Sequence[ClassLabel]
) -> Optional[ClassLabel]:
    """Resolve a free-text verdict to one option, or None if ambiguous.

    Exact match on normalized display_name wins; otherwise a unique option
    whose normalized name is contained in the normalized answer.
    """
    if not options:
        raise PreconditionError("options must be non-empty")
    norm = _norm_answer(raw_answer)
    exact = [o for o in options if _norm_answer(o.display_name) == norm]
    if len(exact) == 1:
        return exact[0]
    contained = [
        o
        for o in options
        if _norm_answer(o.display_name) and _norm_answer(o.display_name) in norm
    ]
    if len(contained) == 1:
        return contained[0]
    return None


def importance_weight(success_rate: float) -> float:
    """Prior-over-proposal ratio with the proposal density fixed at 1."""
    if not 0.0 <= success_rate <= 1.0:
        raise PreconditionError(f"success_rate {success_rate} outside [0, 1]")
    return success_rate / 1.0


_FENCE_RE = re.compile(r"(```|''')(.*?)\1", re.DOTALL)


def parse_batch_verdicts(reply: str) -> dict[str, str]:
    """Parse the fenced predicted_dict block of a batched verdict reply."""
    m = _FENCE_RE.search(reply)
    if not m:
        raise ParseError("no triple-backtick fenced block in reply", raw=reply)
    block = m.group(2).strip()
    if block.lower().startswith("python"):
        block = block[len("python"):].strip()
    block = re.sub(r"^predicted_dict\s*=\s*", "", block)
    try:
        parsed = ast.literal_eval(block)
    except (ValueError, SyntaxError) as exc:
        raise ParseError(
            f"fenced block is not a literal dict: {block[:200]!r}", raw=reply
        ) from exc
    if not isinstance(parsed, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in parsed.items()
    ):
        raise ParseError(
            f"fenced block is not a flat string map: {block[:200]!r}", raw=reply
        )
    return parsed


def generate_concept(
    llm,
    target: ClassLabel,
    candidates: Sequence[ClassLabel],
    config: SamplerConfig,
    sample_index: int = 0,
) -> Concept:
    """One concept for `target` vs the candidate window, with one re-ask."""
    if not candidates:
        raise PreconditionError("candidate set must be non-empty")
    user = GENERATION_USER_PROMPT.format(
        core=target.display_name,
        others=", ".join(c.display_name for c in candidates),
    )
    reply = with_retries(
        llm,
        GENERATION_SYSTEM_PROMPT,
        user,
        config.llm.decode_temperature,
        config.llm.max_retries,
    )
    try:
        text = parse_final_concept(reply)
    except ParseError:
        reply = with_retries(
            llm,
            GENERATION_SYSTEM_PROMPT,
            user,
            config.llm.decode_temperature,
            config.llm.max_retries,
        )
        text = parse_final_concept(reply)
    return Concept(text=text, class_id=target.id, sample_index=sample_index)


def run_trial(
    llm,
    concept: Concept,
    target: ClassLabel,
    classes: Sequence[ClassLabel],
    config: SamplerConfig,
    trial_index: int,
) -> DiscriminativeTrial:
    """One discriminative probe with a fresh distractor draw."""
    rng = substream(config.seed, "sampler", "trial", target.id,
                    concept.sample_index, trial_index)
    distractors = draw_candidate_set(classes, target, config.window_size, rng)
    options = [target] + distractors
    order = rng.permutation(len(options))
    shuffled = [options[int(i)] for i in order]
    user = TEST_USER_PROMPT.format(
        concept=concept.text,
        classes=", ".join(o.display_name for o in shuffled),
    )
    raw = with_retries(
        llm, TEST_SYSTEM_PROMPT, user, VERDICT_TEMPERATURE, config.llm.max_retries
    )
    matched = match_answer(raw, shuffled)
    verdict = "pass" if matched is not None and matched.id == target.id else "fail"
    return DiscriminativeTrial(
        concept_text=concept.text,
        target_class_id=target.id,
        distractor_class_ids=tuple(d.id for d in distractors),
        verdict=verdict,
        raw_answer=raw,
    )


def discriminative_test(
    llm,
    concept: Concept,
    target: ClassLabel,
    classes: Sequence[ClassLabel],
    config: SamplerConfig,
) -> tuple[float, list[DiscriminativeTrial]]:
    """Success rate over Z independent trials; unmatched answers count as fail."""
    trials = [
        run_trial(llm, concept, target, classes, config, z)
        for z in range(config.verifications)
    ]
    passes = sum(1 for t in trials if t.verdict == "pass")
    return passes / config.verifications, trials


class Checkpoint:
    """JSON-lines resume log, one record per completed (class_id, sample_index)."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self._lock = threading.Lock()
        self.records: dict[tuple[str, int], dict] = {}
        if path and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self.records[(rec["class_id"], rec["sample_index"])] = rec

    def has(self, class_id: str, sample_index: int) -> bool:
        return (class_id, sample_index) in self.records

    def get(self, class_id: str, sample_index: int) -> dict:
        return self.records[(class_id, sample_index)]

    def add(self, rec: dict) -> None:
        with self._lock:
            self.records[(rec["class_id"], rec["sample_index"])] = rec
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def _cell_record(
    llm, classes: Sequence[ClassLabel], target: ClassLabel,
    config: SamplerConfig, j: int,
) -> dict:
    gen_rng = substream(config.seed, "sampler", "gen", target.id, j)
    candidates = draw_candidate_set(classes, target, config.window_size, gen_rng)
    concept = generate_concept(llm, target, candidates, config, sample_index=j)
    rate, trials = discriminative_test(llm, concept, target, classes, config)
    return {
        "class_id": target.id,
        "sample_index": j,
        "concept": concept.text,
        "verdicts": [t.verdict for t in trials],
        "success_rate": rate,
    }


def _bank_from_records(
    classes: Sequence[ClassLabel], config: SamplerConfig,
    records: dict[tuple[str, int], dict], task_name: str,
) -> ConceptBank:
    concepts = {}
    for label in classes:
        wcs = []
        for j in range(config.samples_per_class):
            rec = records[(label.id, j)]
            rate = rec["success_rate"]
            wcs.append(
                WeightedConcept(
                    concept=Concept(
                        text=rec["concept"], class_id=label.id, sample_index=j
                    ),
                    success_rate=rate,
                    importance_weight=importance_weight(rate),
                )
            )
        concepts[label.id] = tuple(wcs)
    meta = config.to_dict()
    meta["created_at"] = None
    return ConceptBank(
        task_name=task_name,
        classes=tuple(classes),
        concepts=concepts,
        sampler_meta=meta,
    )


def sample_concept_bank(
    classes: Sequence[ClassLabel],
    config: SamplerConfig,
    llm,
    checkpoint_path: Optional[str] = None,
    task_name: str = "task",
) -> ConceptBank:
    """Standard-mode sampling: M concepts per class, Z trials each.

    Progress is checkpointed per (class, sample_index) cell; an interrupted
    run resumes without re-querying completed cells. Cell randomness is keyed
    by (seed, class, sample_index, trial), so completion order is irrelevant.
    """
    if len(classes) < 2:
        raise PreconditionError("need at least two classes")
    if config.window_size > len(classes) - 1:
        raise PreconditionError(
            f"window size {config.window_size} exceeds class count minus one"
        )
    checkpoint = Checkpoint(checkpoint_path)
    cells = [
        (label, j)
        for label in classes
        for j in range(config.samples_per_class)
        if not checkpoint.has(label.id, j)
    ]

    def work(cell):
        label, j = cell
        rec = _cell_record(llm, classes, label, config, j)
        checkpoint.add(rec)

    max_workers = max(1, config.llm.max_in_flight)
    if max_workers == 1:
        for cell in cells:
            work(cell)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for fut in [pool.submit(work, c) for c in cells]:
                fut.result()
    return _bank_from_records(classes, config, checkpoint.records, task_name)


def nearest_class(
    classes: Sequence[ClassLabel], target: ClassLabel, text_store: EmbeddingStore
) -> ClassLabel:
    """Most similar other class by display-name embedding; first index wins ties."""
    tv = text_store.get(prompt_key(target.display_name))
    best, best_sim = None, -2.0
    for c in classes:
        if c.id == target.id:
            continue
        sim = cosine_similarity(tv, text_store.get(prompt_key(c.display_name)))
        if sim > best_sim:
            best, best_sim = c, sim
    return best


def efficient_sample_concept_bank(
    classes: Sequence[ClassLabel],
    config: SamplerConfig,
    llm,
    text_store: EmbeddingStore,
    checkpoint_path: Optional[str] = None,
    task_name: str = "task",
) -> ConceptBank:
    """Query-efficient mode: one fixed nearest-class distractor per class,
    concepts generated 10 per call, and each batch verified in single fenced
    dict replies (Z per batch)."""
    if len(classes) < 2:
        raise PreconditionError("need at least two classes")
    checkpoint = Checkpoint(checkpoint_path)
    m = config.samples_per_class
    for label in classes:
        distractor = nearest_class(classes, label, text_store)
        done = all(checkpoint.has(label.id, j) for j in range(m))
        if done:
            continue
        for start in range(0, m, EFFICIENT_BATCH_SIZE):
            batch_idx = list(range(start, min(start + EFFICIENT_BATCH_SIZE, m)))
            if all(checkpoint.has(label.id, j) for j in batch_idx):
                continue
            n = len(batch_idx)
            user = BATCH_GENERATION_USER_PROMPT.format(
                core=label.display_name, others=distractor.display_name, n=n
            )
            reply = with_retries(
                llm, GENERATION_SYSTEM_PROMPT, user,
                config.llm.decode_temperature, config.llm.max_retries,
            )
            try:
                texts = parse_concept_list(reply, n)
            except ParseError:
                reply = with_retries(
                    llm, GENERATION_SYSTEM_PROMPT, user,
                    config.llm.decode_temperature, config.llm.max_retries,
                )
                texts = parse_concept_list(reply, n)
            passes = {t: 0 for t in texts}
            options = [label, distractor]
            test_user = BATCH_TEST_USER_PROMPT.format(
                concepts=json.dumps(texts, ensure_ascii=False),
                classes=json.dumps([o.display_name for o in options], ensure_ascii=False),
            )
            for _ in range(config.verifications):
                raw = with_retries(
                    llm, BATCH_TEST_SYSTEM_PROMPT, test_user,
                    VERDICT_TEMPERATURE, config.llm.max_retries,
                )
                try:
                    verdicts = parse_batch_verdicts(raw)
                except ParseError:
                    raw = with_retries(
                        llm, BATCH_TEST_SYSTEM_PROMPT, test_user,
                        VERDICT_TEMPERATURE, config.llm.max_retries,
                    )
                    verdicts = parse_batch_verdicts(raw)
                for t in texts:
                    answer = verdicts.get(t, "")
                    matched = match_answer(answer, options) if answer else None
                    if matched is not None and matched.id == label.id:
                        passes[t] += 1
            for j, t in zip(batch_idx, texts):
                rate = passes[t] / config.verifications
                checkpoint.add(
                    {
                        "class_id": label.id,
                        "sample_index": j,
                        "concept": t,
                        "verdicts": [],
                        "success_rate": rate,
                    }
                )
    return _bank_from_records(classes, config, checkpoint.records, task_name)
