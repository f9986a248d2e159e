"""Command-line front end.

Subcommands: ``gen`` (synthetic dataset bundle), ``refine`` (any of the four
methods), ``eval`` (global or stream-protocol accuracy), ``diagnose``
(identity checks and geometry metrics) and ``sweep`` (accuracy across penalty
weights).  Exit codes: 0 success, 2 usage or input error, 3 infeasible or
degenerate math, 4 diverged optimization, 5 internal identity failure.

Configuration precedence is flags > JSON config file > built-in defaults; the
resolved configuration is echoed into every output manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import storage
from .corelinalg import EmbeddingMatrix, gram, normalize_rows
from .diagnostics import AssignmentMatrix, between_vs_offdiag, geometry_metrics, huygens
from .encoder import default_adapters, encoder_init, load_checkpoint, save_checkpoint
from .errors import (
    DEGENERATE_ERRORS,
    VALIDATION_ERRORS,
    DivergedLoss,
    IdentityViolation,
    ProtoForgeError,
)
from .evalharness import (
    StreamConfig,
    SyntheticSpec,
    evaluate_over_tasks,
    generate_synthetic,
    sample_batch_tasks,
    sample_online_stream,
    zero_shot_accuracy,
)
from .objective import ObjectiveConfig, grad_check, loss, loss_grad_x
from .prototype import PrototypeSet, load_class_names, load_templates, TemplateSet
from .solvers import (
    PAPER_BATCH_SIZE_ECHO,
    PAPER_LEARNING_RATE,
    TrainConfig,
    solve_mean,
    solve_procrustes,
    solve_soft_direct,
    solve_soft_lora,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEGENERATE = 3
EXIT_DIVERGED = 4
EXIT_IDENTITY = 5

DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
)


def thread_budget() -> int:
    raw = os.environ.get("PROTO_FORGE_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
            if n >= 1:
                return n
        except ValueError:
            pass
    return os.cpu_count() or 1


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("config file must contain a JSON object")
    return doc


def _resolve(flag_value, config: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _parse_confusion(values: list[str]) -> list[tuple[int, int, float]]:
    pairs = []
    for raw in values:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ValueError(f"--confuse expects i:j:rho, got {raw!r}")
        pairs.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return pairs


def _parse_keff(raw: str) -> tuple[int, int]:
    lo, _, hi = raw.partition(":")
    return int(lo), int(hi)


def _prototype_set_from_file(path: str) -> PrototypeSet:
    m = storage.load_matrix(path)
    names = tuple(f"class_{i:03d}" for i in range(m.rows))
    return PrototypeSet(
        class_names=names, v=m, normalized=m.unit_rows, template_count=1
    )


# -- gen -------------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _load_config_file(args.config)
    spec = SyntheticSpec(
        k=_resolve(args.classes, config, "classes", 10),
        d=_resolve(args.dim, config, "dim", 64),
        n_per_class=_resolve(args.per_class, config, "per_class", 50),
        confusion_pairs=tuple(_parse_confusion(args.confuse or config.get("confuse", []))),
        noise_sigma=_resolve(args.sigma, config, "sigma", 0.25),
        seed=_resolve(args.seed, config, "seed", 0),
    )
    features, labels, dirs, protos = generate_synthetic(spec)
    out = Path(args.out)
    paths = storage.save_dataset_bundle(
        out,
        features,
        labels,
        spec_echo={
            "classes": spec.k,
            "dim": spec.d,
            "per_class": spec.n_per_class,
            "confuse": [list(p) for p in spec.confusion_pairs],
            "sigma": spec.noise_sigma,
            "seed": spec.seed,
        },
        extra_matrices={"true_directions": dirs, "initial_prototypes": protos},
    )
    storage.write_manifest(
        out,
        command="gen",
        config={
            "classes": spec.k,
            "dim": spec.d,
            "per_class": spec.n_per_class,
            "confuse": [list(p) for p in spec.confusion_pairs],
            "sigma": spec.noise_sigma,
        },
        seed=spec.seed,
        inputs=[],
        outputs=sorted(str(p) for p in paths.values()),
    )
    print(f"wrote dataset: n={features.rows} d={features.cols} k={spec.k} -> {out}")
    return EXIT_OK


# -- refine ----------------------------------------------------------------


def cmd_refine(args) -> int:
    config = _load_config_file(args.config)
    method = args.method
    seed = _resolve(args.seed, config, "seed", 0)
    lambda0 = _resolve(args.lambda0, config, "lambda0", 2.0)
    growth = _resolve(args.lambda_growth, config, "lambda_growth", 1.15)
    epochs = _resolve(args.epochs, config, "epochs", 20)
    steps = _resolve(args.steps, config, "steps_per_epoch", 50)
    rank = _resolve(args.rank, config, "rank", 8)
    lr = _resolve(args.lr, config, "learning_rate", 1e-3)
    if args.paper_hparams:
        lr = PAPER_LEARNING_RATE

    obj = ObjectiveConfig(lambda0=lambda0, lambda_growth=growth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = []
    extra_outputs: list[Path] = []

    if method in ("mean", "svd", "soft-direct"):
        if not args.prototypes:
            print("refine: --prototypes is required for this method", file=sys.stderr)
            return EXIT_USAGE
        inputs.append(Path(args.prototypes))
        pset = _prototype_set_from_file(args.prototypes)
        if method == "mean":
            result = solve_mean(pset)
        elif method == "svd":
            result = solve_procrustes(pset)
        else:
            tc = TrainConfig(
                epochs=epochs, steps_per_epoch=steps, learning_rate=lr,
                seed=seed, mode="direct_x",
            )
            result = solve_soft_direct(pset, obj, tc)
    elif method == "soft-lora":
        if not args.class_names:
            print("refine: --class-names is required for soft-lora", file=sys.stderr)
            return EXIT_USAGE
        names = load_class_names(args.class_names)
        inputs.append(Path(args.class_names))
        if args.templates:
            tset = load_templates(args.templates)
            inputs.append(Path(args.templates))
        else:
            tset = TemplateSet(DEFAULT_TEMPLATES)
        if args.encoder:
            params, adapters, _ = load_checkpoint(args.encoder)
            inputs.append(Path(args.encoder))
            if not adapters:
                adapters = default_adapters(params, rank, seed)
        else:
            params = encoder_init(seed=seed)
            adapters = default_adapters(params, rank, seed)
        tc = TrainConfig(
            epochs=epochs, steps_per_epoch=steps, learning_rate=lr,
            seed=seed, mode="lora_encoder",
        )
        result = solve_soft_lora(names, tset, params, obj, tc, rank=rank, adapters=adapters)
        ckpt_path = out / "encoder.json"
        save_checkpoint(ckpt_path, params, result.adapters, seed)
        extra_outputs.append(ckpt_path)
    else:  # pragma: no cover - argparse restricts choices
        return EXIT_USAGE

    x_path = out / "prototypes.csv"
    storage.save_matrix(x_path, result.x)
    outputs = [x_path] + extra_outputs
    if result.history:
        log_path = out / "train_log.jsonl"
        records = []
        for idx, rep in enumerate(result.history):
            rec = {"epoch": idx // steps, "step": idx % steps}
            rec.update(rep.as_dict())
            records.append(rec)
        storage.save_jsonl(log_path, records)
        outputs.append(log_path)
    if result.v is not None:
        v_path = out / "initial_prototypes.csv"
        storage.save_matrix(v_path, result.v)
        outputs.append(v_path)

    resolved = {
        "method": method,
        "lambda0": lambda0,
        "lambda_growth": growth,
        "epochs": epochs,
        "steps_per_epoch": steps,
        "rank": rank,
        "learning_rate": lr,
        "paper_hparams": bool(args.paper_hparams),
    }
    if args.paper_hparams:
        resolved["batch_size_echo"] = PAPER_BATCH_SIZE_ECHO
    storage.write_manifest(
        out, command="refine", config=resolved, seed=seed,
        inputs=inputs, outputs=sorted(str(p) for p in outputs),
    )
    if result.history:
        first, last = result.history[0], result.history[-1]
        print(
            f"{method}: total {first.total:.6g} -> {last.total:.6g}, "
            f"penalty {first.penalty:.6g} -> {last.penalty:.6g}"
        )
    else:
        print(f"{method}: wrote {x_path}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    features, labels, _meta = storage.load_dataset_bundle(args.data)
    protos = storage.load_matrix(args.prototypes)
    if not protos.unit_rows:
        protos = normalize_rows(protos)
    if not features.unit_rows:
        features = normalize_rows(features)
    if features.cols != protos.cols:
        print(
            f"eval: feature dim {features.cols} != prototype dim {protos.cols}",
            file=sys.stderr,
        )
        return EXIT_USAGE

    stream = _resolve(args.stream, config, "stream", "none")
    seed = _resolve(args.seed, config, "seed", 0)
    n_tasks = _resolve(args.tasks, config, "tasks", 1000)
    batch = _resolve(args.batch, config, "batch", 64)
    gamma = _resolve(args.gamma, config, "gamma", 0.01)
    keff = _parse_keff(args.keff) if args.keff else tuple(config.get("keff", (1, 4)))
    restrict = not args.no_restrict

    out = Path(args.out) if args.out else None
    records = []
    if stream == "none":
        accuracy = zero_shot_accuracy(features, labels, protos)
        records.append({"task_id": 0, "accuracy": accuracy})
        print(f"accuracy: {accuracy:.6f}")
    elif stream == "batch":
        cfg = StreamConfig(
            mode="batch_realistic", batch_size=batch, n_tasks=n_tasks,
            keff_range=keff, seed=seed,
        )
        tasks = sample_batch_tasks(labels, cfg)
        mean_acc, per_task = evaluate_over_tasks(
            tasks, features, protos, restrict_to_present=restrict
        )
        for i, (task, acc) in enumerate(zip(tasks, per_task)):
            records.append(
                {"task_id": i, "k_eff": len(task.present_classes), "accuracy": acc}
            )
        print(f"mean accuracy over {len(tasks)} tasks: {mean_acc:.6f}")
    elif stream in ("online", "separate"):
        mode = "online_dirichlet" if stream == "online" else "separate"
        accs = []
        for s in range(n_tasks):
            cfg = StreamConfig(
                mode=mode, batch_size=batch, n_tasks=1, gamma=gamma,
                seed=seed + s,
            )
            batches = sample_online_stream(labels, cfg)
            mean_acc, _ = evaluate_over_tasks(
                batches, features, protos, restrict_to_present=restrict
            )
            accs.append(mean_acc)
            records.append({"task_id": s, "gamma": gamma if stream == "online" else 0.0,
                            "accuracy": mean_acc})
        print(f"mean accuracy over {n_tasks} streams: {float(np.mean(accs)):.6f}")
    else:
        print(f"eval: unknown stream mode {stream!r}", file=sys.stderr)
        return EXIT_USAGE

    if out:
        out.mkdir(parents=True, exist_ok=True)
        results_path = out / "task_results.jsonl"
        storage.save_jsonl(results_path, records)
        storage.write_manifest(
            out, command="eval",
            config={
                "stream": stream, "tasks": n_tasks, "batch": batch,
                "gamma": gamma, "keff": list(keff), "restrict": restrict,
            },
            seed=seed,
            inputs=[args.prototypes, Path(args.data) / storage.FEATURES_FILE],
            outputs=[str(results_path)],
        )
    return EXIT_OK


# -- diagnose --------------------------------------------------------------


def cmd_diagnose(args) -> int:
    features, labels, _meta = storage.load_dataset_bundle(args.data)
    protos = storage.load_matrix(args.prototypes)
    initial = storage.load_matrix(args.initial) if args.initial else protos
    if not features.unit_rows:
        features = normalize_rows(features)
    k = protos.rows
    unit_protos = protos if protos.unit_rows else normalize_rows(protos)

    assignment = AssignmentMatrix.from_labels(labels, k)
    scatter = huygens(features, assignment)
    counts = np.maximum(assignment.u.sum(axis=1), 1.0)
    between_term, weighted_offdiag = between_vs_offdiag(unit_protos, counts)
    metrics = geometry_metrics(protos, initial, features, labels)

    rng = np.random.default_rng(0)
    point = protos.data + 0.01 * rng.normal(size=protos.shape)
    analytic = loss_grad_x(point, initial.data, 2.0)
    grad_err = grad_check(
        lambda p: loss(p.reshape(protos.shape), initial.data, 2.0).total,
        analytic.ravel(),
        point.ravel(),
    )

    report = {
        "within": scatter.within,
        "total": scatter.total,
        "between": scatter.between,
        "huygens_residual": scatter.residual,
        "between_term": between_term,
        "weighted_offdiag": weighted_offdiag,
        "grad_check_max_rel_error": grad_err,
        "empty_classes": list(scatter.empty_classes),
    }
    report.update(metrics.as_dict())
    huygens_ok = scatter.residual <= 1e-9 * max(scatter.total, 1.0)
    grad_ok = grad_err < 1e-5
    report["huygens_ok"] = huygens_ok
    report["offdiag_identity_ok"] = True  # between_vs_offdiag raises otherwise
    report["grad_check_ok"] = grad_ok
    print(json.dumps(report, indent=2, sort_keys=True))

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "diagnostics.json"
        storage.atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
        storage.write_manifest(
            out, command="diagnose", config={}, seed=None,
            inputs=[args.prototypes, Path(args.data) / storage.FEATURES_FILE],
            outputs=[str(path)],
        )
    if not (huygens_ok and grad_ok):
        return EXIT_IDENTITY
    return EXIT_OK


# -- sweep -----------------------------------------------------------------


def _sweep_one(lam, pset, features, labels, epochs, steps, lr, seed):
    obj = ObjectiveConfig(lambda0=lam, lambda_growth=1.0)
    tc = TrainConfig(
        epochs=epochs, steps_per_epoch=steps, learning_rate=lr,
        seed=seed, mode="direct_x",
    )
    result = solve_soft_direct(pset, obj, tc)
    acc = zero_shot_accuracy(features, labels, normalize_rows(result.x))
    last = result.history[-1]
    return {
        "lambda": lam,
        "accuracy": acc,
        "final_penalty": last.penalty,
        "final_fidelity": last.fidelity,
        "status": "ok",
    }


def cmd_sweep(args) -> int:
    config = _load_config_file(args.config)
    features, labels, _meta = storage.load_dataset_bundle(args.data)
    if not features.unit_rows:
        features = normalize_rows(features)
    pset = _prototype_set_from_file(args.prototypes)
    lambdas_raw = args.lambdas or config.get("lambdas", "0,0.1,1,10,100,1000,10000")
    lambdas = [float(v) for v in str(lambdas_raw).split(",") if v.strip() != ""]
    epochs = _resolve(args.epochs, config, "epochs", 20)
    steps = _resolve(args.steps, config, "steps_per_epoch", 50)
    lr = _resolve(args.lr, config, "learning_rate", 3e-3)
    seed = _resolve(args.seed, config, "seed", 0)

    rows = []
    with ThreadPoolExecutor(max_workers=thread_budget()) as pool:
        futures = []
        for lam in lambdas:
            futures.append(
                pool.submit(_sweep_one, lam, pset, features, labels, epochs, steps, lr, seed)
            )
        for lam, fut in zip(lambdas, futures):
            try:
                rows.append(fut.result())
            except ProtoForgeError as exc:
                rows.append({
                    "lambda": lam, "accuracy": float("nan"),
                    "final_penalty": float("nan"), "final_fidelity": float("nan"),
                    "status": f"error:{type(exc).__name__}",
                })

    lines = ["lambda,accuracy,final_penalty,final_fidelity,status"]
    for row in rows:
        lines.append(
            f"{row['lambda']:.17g},{row['accuracy']:.17g},"
            f"{row['final_penalty']:.17g},{row['final_fidelity']:.17g},{row['status']}"
        )
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "sweep.csv"
        storage.atomic_write_text(path, table + "\n")
        storage.write_manifest(
            out, command="sweep",
            config={"lambdas": lambdas, "epochs": epochs, "steps_per_epoch": steps,
                    "learning_rate": lr},
            seed=seed,
            inputs=[args.prototypes, Path(args.data) / storage.FEATURES_FILE],
            outputs=[str(path)],
        )
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoforge",
        description="Refine class-prototype matrices and verify their geometry.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset bundle")
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--confuse", action="append", metavar="I:J:RHO")
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("refine", help="refine prototypes by one of four methods")
    p.add_argument("--method", required=True,
                   choices=["mean", "svd", "soft-direct", "soft-lora"])
    p.add_argument("--prototypes", help="matrix CSV with initial prototypes V")
    p.add_argument("--class-names", dest="class_names", help="text file, one name per line")
    p.add_argument("--templates", help="text file, one template per line")
    p.add_argument("--encoder", help="encoder checkpoint JSON")
    p.add_argument("--lambda0", type=float)
    p.add_argument("--lambda-growth", dest="lambda_growth", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--paper-hparams", action="store_true",
                   help="use the published fine-tuning learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="evaluate prototypes on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--stream", choices=["none", "batch", "online", "separate"])
    p.add_argument("--keff", metavar="LO:HI")
    p.add_argument("--gamma", type=float)
    p.add_argument("--tasks", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--no-restrict", action="store_true",
                   help="do not restrict prediction to each task's class subset")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="run identity checks and geometry metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--initial", help="initial prototype matrix for displacement")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="refine and evaluate across penalty weights")
    p.add_argument("--data", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--lambdas", help="comma-separated penalty weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DEGENERATE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IdentityViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IDENTITY
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
