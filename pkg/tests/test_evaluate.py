import json

import numpy as np
import pytest

from chbr.core import PromptTemplate, render_prompt
from chbr.embedding import EmbeddingStore, prompt_key
from chbr.errors import PreconditionError, ShapeError
from chbr.evaluate import (
    DatasetManifest,
    EvalReport,
    representative_concepts,
    run_eval,
    top1_accuracy,
)
from chbr.inference import PromptEmbedder, Providers
from chbr.likelihood import LikelihoodSpec

from conftest import make_bank, make_classes, random_unit, store_from_prompts


def test_top1_accuracy_examples():
    assert top1_accuracy(["a", "b", "c"], ["a", "b", "c"]) == 1.0
    assert top1_accuracy(["a", "b", "c", "d"], ["a", "x", "c", "y"]) == 0.5
    assert top1_accuracy(["a"], ["b"]) == 0.0


def test_top1_accuracy_accepts_labels():
    classes = make_classes(2)
    assert top1_accuracy([classes[0], classes[1]], ["class0", "class0"]) == 0.5


def test_top1_accuracy_errors():
    with pytest.raises(ShapeError):
        top1_accuracy(["a"], ["a", "b"])
    with pytest.raises(PreconditionError):
        top1_accuracy([], [])


def test_manifest_rejects_unknown_class_and_duplicates():
    classes = make_classes(2)
    with pytest.raises(PreconditionError):
        DatasetManifest("d", tuple(classes), (("i0", "nope"),))
    with pytest.raises(PreconditionError):
        DatasetManifest(
            "d", tuple(classes), (("i0", "class0"), ("i0", "class1"))
        )


def test_manifest_json_round_trip(tmp_path):
    doc = {
        "name": "toy",
        "classes": [
            {"id": "class0", "display_name": "class 0"},
            {"id": "class1", "display_name": "class 1"},
        ],
        "items": [
            {"image_id": "i0", "true_class_id": "class0"},
            {"image_id": "i1", "true_class_id": "class1"},
        ],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    manifest = DatasetManifest.from_json(path)
    assert manifest.name == "toy"
    assert manifest.items == (("i0", "class0"), ("i1", "class1"))


def test_manifest_from_csv(tmp_path):
    classes = make_classes(2)
    path = tmp_path / "items.csv"
    path.write_text("image_id,true_class_id\ni0,class0\ni1,class1\n")
    manifest = DatasetManifest.from_csv(path, "csvset", classes)
    assert manifest.items == (("i0", "class0"), ("i1", "class1"))


def _separable_setup(rng, k=3, per_class=4, dim=16):
    """Images tightly clustered around their own class's concept prompts."""
    classes = make_classes(k)
    bank = make_bank(classes, {c.id: [f"{c.id} trait"] for c in classes})
    template = PromptTemplate()
    anchors = {c.id: random_unit(rng, dim) for c in classes}
    prompts = {}
    for c in classes:
        wc = bank.concepts_for(c.id)[0]
        prompts[render_prompt(template, c, wc.concept)] = anchors[c.id]
    items = []
    image_vectors = {}
    for c in classes:
        for n in range(per_class):
            v = anchors[c.id] + 0.05 * random_unit(rng, dim)
            image_vectors[f"{c.id}-img{n}"] = v / np.linalg.norm(v)
            items.append((f"{c.id}-img{n}", c.id))
    manifest = DatasetManifest("separable", tuple(classes), tuple(items))
    providers = Providers(
        texts=PromptEmbedder(store=store_from_prompts(prompts)),
        images=EmbeddingStore.from_vectors("image", image_vectors),
    )
    return manifest, bank, providers


@pytest.mark.parametrize("kind", ["average", "confidence"])
def test_run_eval_separable_perfect_and_seed_stable(kind, rng):
    manifest, bank, providers = _separable_setup(rng)
    report = run_eval(
        manifest, bank, LikelihoodSpec(kind=kind), providers, seeds=(0, 1, 2)
    )
    assert report.top1_accuracy == 1.0
    assert report.std == 0.0
    assert set(report.per_seed) == {0, 1, 2}
    assert all(v == 1.0 for v in report.per_seed.values())
    assert all(v == 1.0 for v in report.per_class.values())


def test_run_eval_counts_misses_per_class(rng):
    manifest, bank, providers = _separable_setup(rng, k=2, per_class=2)
    # point one class-0 image at the class-1 anchor
    wrong_id = manifest.items[0][0]
    classes = manifest.classes
    template = PromptTemplate()
    other_prompt = render_prompt(
        template, classes[1], bank.concepts_for("class1")[0].concept
    )
    anchor1 = providers.texts.embed(other_prompt)
    vectors = {
        image_id: (anchor1 if image_id == wrong_id
                   else providers.images.get(image_id))
        for image_id, _ in manifest.items
    }
    providers = Providers(
        texts=providers.texts,
        images=EmbeddingStore.from_vectors("image", vectors),
    )
    report = run_eval(
        manifest, bank, LikelihoodSpec(kind="average"), providers, seeds=(0,)
    )
    assert report.top1_accuracy == 0.75
    assert report.per_class["class0"] == 0.5
    assert report.per_class["class1"] == 1.0


def test_run_eval_report_dict_round_trips(rng):
    manifest, bank, providers = _separable_setup(rng, k=2, per_class=1)
    report = run_eval(
        manifest, bank, LikelihoodSpec(kind="average"), providers, seeds=(3,)
    )
    doc = report.to_dict()
    assert json.loads(json.dumps(doc)) == doc
    assert doc["config"]["likelihood"] == "average"


def test_run_eval_validates_inputs(rng):
    manifest, bank, providers = _separable_setup(rng, k=2, per_class=1)
    empty = DatasetManifest("empty", manifest.classes, ())
    with pytest.raises(PreconditionError):
        run_eval(empty, bank, LikelihoodSpec(kind="average"), providers)
    with pytest.raises(PreconditionError):
        run_eval(
            manifest, bank, LikelihoodSpec(kind="average"), providers, seeds=()
        )


def _concept_store(bank, class_id, vectors):
    wcs = bank.concepts_for(class_id)
    return EmbeddingStore.from_vectors(
        "text",
        {prompt_key(wc.concept.text): v for wc, v in zip(wcs, vectors)},
    )


def test_representative_concepts_k_equals_m(rng):
    classes = make_classes(1)
    m = 6
    bank = make_bank(classes, {"class0": [f"t{j}" for j in range(m)]})
    vectors = [random_unit(rng, 8) for _ in range(m)]
    store = _concept_store(bank, "class0", vectors)
    out = representative_concepts(bank, "class0", store, k=m, seed=0)
    assert len(out) == m
    assert {text for text, _ in out} == {f"t{j}" for j in range(m)}
    for _, p in out:
        assert p == pytest.approx(1 / m)


def test_representative_concepts_probabilities_sum_to_one(rng):
    classes = make_classes(1)
    m = 40
    bank = make_bank(classes, {"class0": [f"t{j}" for j in range(m)]})
    vectors = [random_unit(rng, 8) for _ in range(m)]
    store = _concept_store(bank, "class0", vectors)
    out = representative_concepts(bank, "class0", store, k=5, seed=1)
    assert len(out) <= 5
    assert sum(p for _, p in out) == pytest.approx(1.0, abs=1e-12)
    probs = [p for _, p in out]
    assert probs == sorted(probs, reverse=True)


def test_representative_concepts_collapses_duplicates(rng):
    classes = make_classes(1)
    base = random_unit(rng, 8)
    far = random_unit(rng, 8)
    far = far - base * float(np.dot(far, base))
    far /= np.linalg.norm(far)
    bank = make_bank(classes, {"class0": ["a", "b", "c", "d"]})
    store = _concept_store(bank, "class0", [base, base, base, far])
    out = representative_concepts(bank, "class0", store, k=2, seed=0)
    probs = dict(out)
    # three coincident concepts share one cluster, the outlier gets its own
    assert sorted(probs.values(), reverse=True) == [0.75, 0.25]
    majority = [text for text, p in out if p == 0.75][0]
    assert majority in {"a", "b", "c"}


def test_representative_concepts_deterministic(rng):
    classes = make_classes(1)
    m = 12
    bank = make_bank(classes, {"class0": [f"t{j}" for j in range(m)]})
    vectors = [random_unit(rng, 8) for _ in range(m)]
    store = _concept_store(bank, "class0", vectors)
    a = representative_concepts(bank, "class0", store, k=3, seed=9)
    b = representative_concepts(bank, "class0", store, k=3, seed=9)
    assert a == b


def test_representative_concepts_k_too_large(rng):
    classes = make_classes(1)
    bank = make_bank(classes, {"class0": ["t0", "t1"]})
    store = _concept_store(
        bank, "class0", [random_unit(rng, 4), random_unit(rng, 4)]
    )
    with pytest.raises(PreconditionError):
        representative_concepts(bank, "class0", store, k=3)
