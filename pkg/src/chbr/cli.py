"""Command-line front end: chbr sample | infer | eval | concepts.

Every flag has a config-file equivalent (--config file.json with keys named
after the flags); explicit flags override config values. Exit codes:
0 success, 2 precondition/config error, 3 provider/transport error,
4 parse error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .core import ClassLabel, ConceptBank
from .embedding import EmbeddingStore
from .errors import ChbrError, PreconditionError
from .evaluate import DatasetManifest, representative_concepts, run_eval
from .inference import PromptEmbedder, Providers, predict
from .likelihood import LikelihoodSpec, TtaConfig
from .llm import make_llm
from .sampler import (
    SamplerConfig,
    efficient_sample_concept_bank,
    sample_concept_bank,
)


def _load_classes(path) -> list[ClassLabel]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    rows = doc["classes"] if isinstance(doc, dict) else doc
    return [ClassLabel(id=r["id"], display_name=r["display_name"]) for r in rows]


def _likelihood_spec(args) -> LikelihoodSpec:
    if args.likelihood == "tta":
        tta = TtaConfig(
            num_views=args.views,
            keep_percent=args.keep,
            steps=args.steps,
            learning_rate=args.lr,
            logit_scale=args.logit_scale,
        )
        return LikelihoodSpec(kind="tta", tta=tta)
    return LikelihoodSpec(kind=args.likelihood, tau=args.tau)


def _add_likelihood_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--likelihood", choices=["average", "confidence", "tta"],
                   default="average")
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--views", type=int, default=64)
    p.add_argument("--keep", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--logit-scale", type=float, default=100.0, dest="logit_scale")
    p.add_argument("--logit-scale-scores", type=float, default=None,
                   dest="logit_scale_scores",
                   help="experimental: multiply similarities by this factor "
                        "before scoring")


def cmd_sample(args) -> int:
    classes = _load_classes(args.classes)
    with open(args.config, "r", encoding="utf-8") as fh:
        config = SamplerConfig.from_dict(json.load(fh))
    if args.mode:
        config = SamplerConfig.from_dict({**config.to_dict(), "mode": args.mode})
    llm = make_llm(config.llm)
    if config.mode == "efficient":
        if not args.text_store:
            raise PreconditionError("--text-store is required in efficient mode")
        text_store = EmbeddingStore.load(args.text_store)
        bank = efficient_sample_concept_bank(
            classes, config, llm, text_store,
            checkpoint_path=args.checkpoint, task_name=args.task,
        )
    else:
        bank = sample_concept_bank(
            classes, config, llm,
            checkpoint_path=args.checkpoint, task_name=args.task,
        )
    bank.save(args.out)
    print(f"wrote {args.out}: {len(bank.classes)} classes, "
          f"{sum(len(v) for v in bank.concepts.values())} concepts")
    return 0


def cmd_infer(args) -> int:
    bank = ConceptBank.load(args.bank)
    providers = Providers(
        texts=PromptEmbedder(store=EmbeddingStore.load(args.texts)),
        images=EmbeddingStore.load(args.images),
    )
    spec = _likelihood_spec(args)
    if args.image_ids:
        image_ids = args.image_ids.split(",")
    else:
        seen = []
        for id_ in providers.images.ids:
            base = id_.split("#view")[0]
            if base not in seen:
                seen.append(base)
        image_ids = seen
    with open(args.out, "w", encoding="utf-8") as fh:
        for image_id in image_ids:
            result = predict(
                image_id, bank, spec, providers,
                logit_scale_scores=args.logit_scale_scores,
            )
            record = {
                "image_id": image_id,
                "predicted": result.predicted.id,
                "scores": result.scores,
            }
            if args.trace:
                record["diagnostics"] = result.diagnostics
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    print(f"wrote {args.out}: {len(image_ids)} predictions")
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.from_json(args.manifest)
    bank = ConceptBank.load(args.bank)
    providers = Providers(
        texts=PromptEmbedder(store=EmbeddingStore.load(args.texts)),
        images=EmbeddingStore.load(args.images),
    )
    spec = _likelihood_spec(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_eval(
        manifest, bank, spec, providers, seeds=seeds,
        logit_scale_scores=args.logit_scale_scores,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"top-1 accuracy {report.mean:.4f} (std {report.std:.4f}) -> {args.out}")
    return 0


def cmd_concepts(args) -> int:
    bank = ConceptBank.load(args.bank)
    text_store = EmbeddingStore.load(args.text_store)
    ranked = representative_concepts(
        bank, args.class_id, text_store, args.k, seed=args.seed
    )
    for text, prob in ranked:
        print(f"{prob:.4f}\t{text}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                [{"concept": t, "probability": p} for t, p in ranked],
                fh, sort_keys=True, indent=2,
            )
            fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chbr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample a concept bank from an LLM")
    p.add_argument("--classes", required=True)
    p.add_argument("--config", required=True, help="sampler config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["standard", "efficient"], default=None)
    p.add_argument("--text-store", dest="text_store", default=None,
                   help="class-name embedding store (efficient mode)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--task", default="task")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("infer", help="classify images against a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--images", required=True, help="image embedding store")
    p.add_argument("--texts", required=True, help="prompt embedding store")
    p.add_argument("--image-ids", dest="image_ids", default=None,
                   help="comma-separated; defaults to every id in the store")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", action="store_true")
    _add_likelihood_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="top-1 accuracy over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    _add_likelihood_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("concepts", help="representative concepts per class")
    p.add_argument("--bank", required=True)
    p.add_argument("--class", dest="class_id", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--text-store", dest="text_store", required=True,
                   help="store keyed by content hash of concept text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_concepts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    # allow a flags config file on any subcommand: --flags-config file.json
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--flags-config" in argv:
        i = argv.index("--flags-config")
        path = argv[i + 1]
        del argv[i : i + 2]
        with open(path, "r", encoding="utf-8") as fh:
            defaults = json.load(fh)
        for p in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in p._actions}
            p.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ChbrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
