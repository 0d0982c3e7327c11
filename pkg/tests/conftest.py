import numpy as np
import pytest

from chbr.core import ClassLabel, Concept, ConceptBank, WeightedConcept
from chbr.embedding import EmbeddingStore, prompt_key
from chbr.llm import script_key
from chbr.rng import substream
from chbr.sampler import (
    GENERATION_SYSTEM_PROMPT,
    GENERATION_USER_PROMPT,
    TEST_SYSTEM_PROMPT,
    TEST_USER_PROMPT,
    draw_candidate_set,
)


def make_classes(k, prefix="class"):
    return [ClassLabel(id=f"{prefix}{i}", display_name=f"{prefix} {i}") for i in range(k)]


def build_standard_script(classes, config, plan):
    """Mock-LLM script for a standard-mode run.

    plan[(class_id, j)] = (concept_text, [pass booleans of length Z]).
    Replays the sampler's own deterministic candidate/distractor draws to
    address each scripted reply to the exact request it will receive.

    Raises if two planned replies collide on the same request content (the
    mock is a deterministic function of the request); tests pick seeds for
    which the plan is collision-free.
    """
    script = {}

    def put(key, reply):
        if key in script and script[key] != reply:
            raise ValueError("script key collision with conflicting replies")
        script[key] = reply
    for target in classes:
        for j in range(config.samples_per_class):
            cell = plan.get((target.id, j))
            if cell is None:
                continue
            concept_text, passes = cell
            gen_rng = substream(config.seed, "sampler", "gen", target.id, j)
            candidates = draw_candidate_set(
                classes, target, config.window_size, gen_rng
            )
            user = GENERATION_USER_PROMPT.format(
                core=target.display_name,
                others=", ".join(c.display_name for c in candidates),
            )
            put(
                script_key(GENERATION_SYSTEM_PROMPT, user),
                f"Reasoning about distinguishing features.\n"
                f"The final concept is: {concept_text}",
            )
            for z, should_pass in enumerate(passes):
                rng = substream(config.seed, "sampler", "trial", target.id, j, z)
                distractors = draw_candidate_set(
                    classes, target, config.window_size, rng
                )
                options = [target] + distractors
                order = rng.permutation(len(options))
                shuffled = [options[int(i)] for i in order]
                user = TEST_USER_PROMPT.format(
                    concept=concept_text,
                    classes=", ".join(o.display_name for o in shuffled),
                )
                answer = (
                    target.display_name
                    if should_pass
                    else distractors[0].display_name
                )
                put(script_key(TEST_SYSTEM_PROMPT, user), answer)
    return script


def make_bank(classes, concepts_per_class, weights=None, task="fixture"):
    """Bank from {class_id: [concept texts]}; weights default to 1.0."""
    concepts = {}
    for label in classes:
        texts = concepts_per_class[label.id]
        wcs = []
        for j, text in enumerate(texts):
            w = 1.0 if weights is None else weights[label.id][j]
            wcs.append(
                WeightedConcept(
                    concept=Concept(text=text, class_id=label.id, sample_index=j),
                    success_rate=w,
                    importance_weight=w,
                )
            )
        concepts[label.id] = tuple(wcs)
    return ConceptBank(
        task_name=task, classes=tuple(classes), concepts=concepts
    )


def store_from_prompts(prompt_vectors, kind="text"):
    """Store keyed by content hash of each prompt string."""
    return EmbeddingStore.from_vectors(
        kind, {prompt_key(p): v for p, v in prompt_vectors.items()}
    )


def random_unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
