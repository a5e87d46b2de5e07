"""``ntua`` command line: one subcommand per pipeline stage, artifacts on disk.

Exit codes: 0 success, 1 invalid input data, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .cache import DEFAULT_ALPHA, DEFAULT_BETA, build_cache, read_cache, refine_cache, write_cache
from .data_store import (
    FORMAT_VERSION,
    ClassifierWeights,
    EmbeddingSet,
    GroundTruthLabels,
    dump_json,
    read_classifier,
    read_embeddings,
    read_labels,
    read_text_matrix,
    write_classifier,
    write_embeddings,
    write_labels,
)
from .evaluation import PipelineConfig, evaluate, run_ablation
from .prototypes import cache_omega, read_omega, write_omega
from .pseudo_labeling import (
    DEFAULT_TEMPERATURE,
    fallback_rows,
    make_pseudo_labels,
    read_pseudo_labels,
    read_selection,
    select_top_k,
    write_pseudo_labels,
    write_selection,
)
from .synthetic import SynthSpec, generate, read_bundle, write_bundle
from .trainer import TrainConfig, TrainingError, train_keys, training_queries

log = logging.getLogger("ntua")


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def cmd_ingest(args) -> dict:
    if args.kind == "labels":
        labels = [int(tok) for ln in _read_lines(args.input) for tok in ln.split()]
        write_labels(GroundTruthLabels(labels, args.num_classes), args.out)
        return {"rows": len(labels)}
    matrix = read_text_matrix(args.input, normalize=args.normalize)
    names = _read_lines(args.ids) if args.ids else None
    if args.kind == "classifier":
        names = names or [f"class_{i}" for i in range(matrix.shape[0])]
        write_classifier(ClassifierWeights(matrix, names), args.out)
    else:
        names = names or [f"sample-{i:05d}" for i in range(matrix.shape[0])]
        write_embeddings(EmbeddingSet(matrix, names), args.out)
    return {"rows": matrix.shape[0], "dim": matrix.shape[1]}


def cmd_pseudo_label(args) -> dict:
    pl = make_pseudo_labels(read_embeddings(args.features), read_classifier(args.classifier),
                            args.temperature, args.source_tag)
    write_pseudo_labels(pl, args.out)
    return {"rows": pl.rows}


def cmd_select(args) -> dict:
    sel = select_top_k(read_pseudo_labels(args.pl), args.k)
    write_selection(sel, args.out)
    return {"selected": len(sel.selected), "padded": sel.padded}


def cmd_build_cache(args) -> dict:
    sel = read_selection(args.sel)
    w = read_classifier(args.classifier)
    cache = build_cache(sel, read_embeddings(args.features), read_pseudo_labels(args.pl),
                        fallback_rows(w, sel.padded), args.alpha, args.beta)
    write_cache(cache, args.out)
    return {"rows": cache.size}


def cmd_refine(args) -> dict:
    cache = refine_cache(read_cache(args.cache), read_pseudo_labels(args.teacher_pl))
    write_cache(cache, args.out)
    return {"rows": cache.size}


def cmd_weights(args) -> dict:
    cache = read_cache(args.cache)
    omega = cache_omega(cache, read_embeddings(args.teacher_features), read_pseudo_labels(args.teacher_pl))
    write_omega(omega, cache.row_ids, args.out)
    return {"rows": omega.size, "mean_omega": float(omega.mean())}


def cmd_train(args) -> dict:
    cache = read_cache(args.cache)
    w = read_classifier(args.classifier)
    features = read_embeddings(args.features)
    omega = None
    if args.omega:
        omega, ids = read_omega(args.omega)
        if ids != cache.row_ids:
            raise ValueError("omega rows do not match cache rows")
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
        weight_decay=args.weight_decay, seed=args.seed,
        use_weights_in_loss=not args.no_cache_weights,
        include_omega=omega is not None, logit_scale=args.logit_scale,
    )
    trained, report = train_keys(cache, training_queries(cache, features, w), cache.labels, omega, w, cfg)
    write_cache(trained, args.out)
    log.info("training took %.3fs", report.wall_time)
    if args.report:
        dump_json(report.to_dict(include_time=False), args.report)
    return {"final_loss": report.final_loss}


def cmd_eval(args) -> dict:
    rep = evaluate(read_cache(args.cache), read_embeddings(args.features), read_labels(args.labels),
                   read_classifier(args.classifier), args.use_weights_at_inference,
                   report_alternate=args.report_alternate)
    dump_json(rep.to_dict(), args.out)
    return {"accuracy": round(rep.accuracy, 4)}


def _pipeline_config(args, seed: int) -> PipelineConfig:
    return PipelineConfig(
        shots=args.shots, alpha=args.alpha, beta=args.beta, temperature=args.temperature,
        inference_weights=args.use_weights_at_inference,
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr, seed=seed),
    )


def cmd_ablate(args) -> dict:
    bundle = read_bundle(args.bundle)
    runs = [run_ablation(bundle, _pipeline_config(args, args.seed + s)) for s in range(args.seeds)]
    names = list(runs[0].accuracies)
    mean = {n: round(float(np.mean([r.accuracies[n] for r in runs])), 4) for n in names}
    doc = {
        "config": _pipeline_config(args, args.seed).to_dict(),
        "seeds": [r.seed for r in runs],
        "runs": [r.to_dict() for r in runs],
        "mean_accuracies": mean,
    }
    dump_json(doc, args.out)
    return {"mean_accuracies": mean}


def cmd_synth(args) -> dict:
    spec = SynthSpec(
        num_classes=args.classes, shots=args.shots, dim=args.dim, test_per_class=args.test_per_class,
        kappa=args.kappa, teacher_kappa=args.teacher_kappa, classifier_noise=args.classifier_noise,
        eta_s=args.eta_s, eta_t=args.eta_t, rho=args.rho, seed=args.seed, nested=not args.independent_noise,
    )
    path = write_bundle(generate(spec), args.out)
    return {"manifest": str(path)}


def _common_train_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntua", description="Noise-tolerant weighted cache adapter pipeline.")
    parser.add_argument("--version", action="version",
                        version=f"ntua {__version__} (format_version {FORMAT_VERSION})")
    parser.add_argument("--seed", dest="global_seed", type=int, default=0, help="default seed for seeded stages")
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS threads")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="convert a text matrix to the binary format")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["embeddings", "classifier", "labels"], default="embeddings")
    p.add_argument("--ids", help="file with one sample id / class name per line")
    p.add_argument("--normalize", action="store_true", help="L2-normalise rows before writing")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pseudo-label", help="zero-shot pseudo-labels and confidences")
    p.add_argument("--features", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--source-tag", choices=["student", "teacher"], default="student")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("select", help="top-k most confident samples per class")
    p.add_argument("--pl", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("build-cache", help="build the weighted key-value cache")
    p.add_argument("--sel", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--pl", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("refine", help="replace cache values/weights with teacher predictions")
    p.add_argument("--cache", required=True)
    p.add_argument("--teacher-pl", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("weights", help="prototype-affinity loss weights per cache row")
    p.add_argument("--teacher-features", required=True)
    p.add_argument("--teacher-pl", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train", help="fine-tune cache keys")
    p.add_argument("--cache", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--omega")
    _common_train_flags(p)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--logit-scale", type=float, default=1.0)
    p.add_argument("--no-cache-weights", action="store_true", help="leave confidence weights out of training logits")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy on a labelled split")
    p.add_argument("--cache", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--use-weights-at-inference", action="store_true")
    p.add_argument("--report-alternate", action="store_true", help="also report the other inference mode")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="KC / KCR / KCR+CKC / KCR+CKC+omega over several seeds")
    p.add_argument("--bundle", required=True, help="manifest.json of a bundle")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--use-weights-at-inference", action="store_true")
    _common_train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    d = SynthSpec()
    p = sub.add_parser("synth", help="write a synthetic bundle")
    p.add_argument("--classes", type=int, default=d.num_classes)
    p.add_argument("--shots", type=int, default=d.shots)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--test-per-class", type=int, default=d.test_per_class)
    p.add_argument("--kappa", type=float, default=d.kappa)
    p.add_argument("--teacher-kappa", type=float, default=d.teacher_kappa)
    p.add_argument("--classifier-noise", type=float, default=d.classifier_noise)
    p.add_argument("--eta-s", type=float, default=d.eta_s)
    p.add_argument("--eta-t", type=float, default=d.eta_t)
    p.add_argument("--rho", type=float, default=d.rho)
    p.add_argument("--independent-noise", action="store_true", help="teacher errors not nested in student errors")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(message)s")
    if getattr(args, "seed", "absent") is None:
        args.seed = args.global_seed
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.debug("resolved config: %s", json.dumps(resolved, sort_keys=True))
    try:
        with threadpool_limits(limits=args.threads):
            summary = args.func(args)
    except (ValueError, KeyError, OSError, TrainingError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ntua {args.command}: error: {msg}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
