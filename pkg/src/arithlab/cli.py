"""Command-line entry point wiring the modules into experiment recipes."""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bpe import TokenizerModel, train_tokenizer
from .datagen import (
    DatasetIOError,
    band_range,
    build_test_cases,
    default_spec,
    exclude_test_pairs,
    load_dataset_lines,
    load_test_set,
    sample_pairs,
    write_dataset,
    write_test_set,
)
from .evaluation import (
    COLUMNS,
    DEFAULT_MAX_NEW_TOKENS,
    EvalReport,
    compare_reports,
    dump_failures,
    emit_report,
    evaluate,
    parse_report_csv,
    saliency_report,
    task_label,
)
from .formats import ADD, MUL, SUB, Approach, operation_by_kind, prompt_prefix
from .model import CheckpointError, ModelConfig, load_checkpoint
from .remote import PROMPT_STYLES, RemoteConfig, RemoteError, replay_transcript, run_remote_eval
from .training import TrainConfig, parse_key_value_file, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_REMOTE = 4

# Seed-stream constant separating held-out test sampling from training draws.
_TEST_STREAM = 9090

_OPS = {"add": ADD, "sub": SUB, "mul": MUL}


class MissingArtifactError(Exception):
    """A required input file is absent; the message names the producing command."""


def _require(path, producer):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; produce it with: {producer}")
    return path


def _write_manifest(out_dir, command, payload):
    """Write the fully resolved run manifest next to the command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "tool": "arithlab", "tool_version": __version__}
    record.update(payload)
    path = out_dir / f"{command}-manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _config_file_values(args):
    """Split a key = value config file into plain, model.*, and remote.* maps."""
    if not getattr(args, "config", None):
        return {}, {}, {}
    path = _require(args.config, "a text editor (key = value lines)")
    values = parse_key_value_file(path)
    plain, model, remote = {}, {}, {}
    for key, value in values.items():
        if key.startswith("model."):
            model[key[len("model.") :]] = value
        elif key.startswith("remote."):
            remote[key[len("remote.") :]] = value
        else:
            plain[key] = value
    return plain, model, remote


_MODEL_FIELD_TYPES = {
    "n_layers": int,
    "n_heads": int,
    "d_model": int,
    "d_ff": int,
    "max_seq_len": int,
    "dropout": float,
}


def _model_kwargs(file_values, flag_values):
    """Layer model hyperparameters: defaults < config file < flags."""
    kwargs = {}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _MODEL_FIELD_TYPES:
                raise ValueError(f"unknown model config key {key!r}")
            kwargs[key] = _MODEL_FIELD_TYPES[key](value)
    return kwargs


def _train_config(file_values, flag_values):
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return TrainConfig.from_mapping(merged)


def _parse_labeled_tests(entries, fmt):
    """Parse repeated LABEL=PATH test-set arguments into (label, cases) tasks."""
    tasks = []
    for entry in entries or []:
        label, sep, path = entry.partition("=")
        if not sep:
            raise ValueError(f"--test expects LABEL=PATH, got {entry!r}")
        if label not in COLUMNS:
            raise ValueError(f"unknown task label {label!r}; choose from {COLUMNS}")
        _require(path, "arithlab generate --all (writes tests/ next to the datasets)")
        tasks.append((label, load_test_set(path, fmt=fmt)))
    return tasks


def _load_sidecar(data_path):
    meta_path = Path(f"{data_path}.meta")
    if not meta_path.exists():
        return {}
    return parse_key_value_file(meta_path)


def _find_train_manifest(ckpt_path):
    manifest = Path(ckpt_path).parent / "train-manifest.json"
    if not manifest.exists():
        return {}
    with open(manifest, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_generate(args):
    if not args.all and (args.op is None or args.approach is None):
        raise ValueError("generate needs --all or both --op and --approach")
    ops = list(_OPS.values()) if args.all else [operation_by_kind(args.op)]
    approaches = list(Approach) if args.all else [Approach(args.approach)]
    out = Path(args.out)
    tests_dir = out / "tests"

    datasets = []
    test_sets = []
    plan = []
    for op in ops:
        spec = default_spec(op, seed=args.seed)
        entry = {"op": op.word, "bands": [list(b) for b in spec.bands], "files": []}
        for approach in approaches:
            name = f"{op.kind}_{approach.value}.txt"
            datasets.append(name)
            entry["files"].append(name)
        plan.append(entry)
        if args.tests_per_band:
            test_sets.extend(f"tests/{op.kind}_{n}d.tsv" for n, _ in spec.bands)

    _write_manifest(
        out,
        "generate",
        {
            "seed": args.seed,
            "operations": [op.word for op in ops],
            "approaches": [a.value for a in approaches],
            "tests_per_band": args.tests_per_band,
            "plan": plan,
            "datasets": datasets,
            "test_sets": test_sets,
        },
    )
    if args.tests_per_band:
        tests_dir.mkdir(parents=True, exist_ok=True)

    for op in ops:
        spec = default_spec(op, seed=args.seed)
        held_out = []
        if args.tests_per_band:
            for band_index, (n_digits, _) in enumerate(spec.bands):
                lo, hi = band_range(n_digits)
                rng = np.random.default_rng([args.seed, _TEST_STREAM, band_index])
                draws = rng.integers(lo, hi + 1, size=(args.tests_per_band, 2))
                cases = build_test_cases([(int(a), int(b)) for a, b in draws], op)
                write_test_set(cases, tests_dir / f"{op.kind}_{n_digits}d.tsv")
                held_out.extend(cases)
        pairs = exclude_test_pairs(sample_pairs(spec), held_out, spec)
        for approach in approaches:
            path = write_dataset(pairs, spec, approach, out / f"{op.kind}_{approach.value}.txt")
            print(f"wrote {path} ({len(pairs)} lines)")
    if args.tests_per_band:
        print(f"wrote held-out test sets under {tests_dir}")
    return EXIT_OK


def _cmd_train(args):
    data = _require(
        args.data,
        "arithlab generate --op OP --approach APPROACH --seed SEED --out DIR",
    )
    plain, model_file, _ = _config_file_values(args)
    train_cfg = _train_config(
        plain,
        {
            "epochs": args.epochs,
            "learning_rate": args.lr,
            "batch_size": args.batch_size,
            "eval_every": args.eval_every,
            "seed": args.seed if args.seed_given else None,
            "precision": args.precision,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lines = load_dataset_lines(data)
    tokenizer = train_tokenizer(lines, target_vocab=args.vocab)
    tokenizer_path = out / "tokenizer.txt"
    tokenizer.save(tokenizer_path)

    model_cfg = ModelConfig(
        vocab_size=tokenizer.vocab_size,
        **_model_kwargs(model_file, {"max_seq_len": args.max_seq_len}),
    )
    ckpt_path = out / "model.ckpt"
    log_path = out / "loss_log.csv"
    if args.resume:
        _require(args.resume, "arithlab train (an earlier run's checkpoint)")
    sidecar = _load_sidecar(data)
    _write_manifest(
        out,
        "train",
        {
            "dataset": str(data),
            "dataset_meta": sidecar,
            "tokenizer": str(tokenizer_path),
            "target_vocab": args.vocab,
            "model": model_cfg.to_dict(),
            "train": dataclasses.asdict(train_cfg),
            "checkpoint": str(ckpt_path),
            "loss_log": str(log_path),
            "resume_from": str(args.resume) if args.resume else None,
        },
    )

    def progress(step, total, loss):
        if step % train_cfg.eval_every == 0 or step == total:
            print(f"step {step}/{total} loss {loss:.4f}")

    ckpt, rows = train(
        data,
        tokenizer,
        model_cfg,
        train_cfg,
        checkpoint_path=ckpt_path,
        loss_log_path=log_path,
        resume_from=args.resume,
        progress=progress,
    )
    final = rows[-1][2] if rows else float("nan")
    print(f"trained {ckpt.param_count} params for {ckpt.step} steps; final loss {final:.4f}")
    print(f"wrote {ckpt_path}, {tokenizer_path}, {log_path}")
    return EXIT_OK


def _resolve_eval_inputs(args):
    ckpt_path = _require(args.ckpt, "arithlab train --data DATASET --out DIR")
    tokenizer_path = args.tokenizer or Path(ckpt_path).parent / "tokenizer.txt"
    tokenizer_path = _require(tokenizer_path, "arithlab train (saves tokenizer.txt beside the checkpoint)")
    manifest = _find_train_manifest(ckpt_path)
    meta = manifest.get("dataset_meta", {})
    approach = args.approach or meta.get("approach")
    if approach is None:
        raise ValueError("--approach is required (no train manifest found beside the checkpoint)")
    return ckpt_path, tokenizer_path, Approach(approach), meta


def _matrix_tasks(args, meta):
    op_kind = args.op or meta.get("op_kind") or meta.get("op")
    if op_kind is None:
        raise ValueError("--matrix needs --op (no train manifest found beside the checkpoint)")
    op = operation_by_kind(op_kind) if op_kind in _OPS else _OPS[
        {"plus": "add", "minus": "sub", "times": "mul"}[op_kind]
    ]
    tests_dir = Path(args.tests_dir)
    spec = default_spec(op)
    tasks = []
    for n_digits, _ in spec.bands:
        path = _require(
            tests_dir / f"{op.kind}_{n_digits}d.tsv",
            f"arithlab generate --op {op.kind} --approach decomposition --out {tests_dir.parent}",
        )
        tasks.append((task_label(n_digits, op), load_test_set(path, fmt="native")))
    return tasks


def _cmd_eval(args):
    ckpt_path, tokenizer_path, approach, meta = _resolve_eval_inputs(args)
    if args.matrix:
        tasks = _matrix_tasks(args, meta)
    else:
        tasks = _parse_labeled_tests(args.test, args.test_format)
    if not tasks:
        raise ValueError("nothing to evaluate: pass --matrix or at least one --test LABEL=PATH")

    out = Path(args.out)
    report_path = out / f"report.{args.format}"
    _write_manifest(
        out,
        "eval",
        {
            "checkpoint": str(ckpt_path),
            "tokenizer": str(tokenizer_path),
            "approach": approach.value,
            "tasks": [[label, len(cases)] for label, cases in tasks],
            "max_new_tokens": args.max_new_tokens,
            "batch_size": args.batch_size,
            "report": str(report_path),
            "format": args.format,
        },
    )

    ckpt = load_checkpoint(ckpt_path)
    tokenizer = TokenizerModel.load(tokenizer_path)
    report = EvalReport()
    all_failures = []
    for label, cases in tasks:
        result, failures = evaluate(
            ckpt,
            tokenizer,
            cases,
            approach,
            label,
            max_new_tokens=args.max_new_tokens,
            batch_size=args.batch_size,
        )
        report.set_cell(approach.value, label, result, failures)
        all_failures.extend(failures)
        print(f"{label}: {result.correct}/{result.total} = {result.accuracy:.2f}")
    emit_report(report, args.format, report_path)
    print(report.to_text(), end="")
    print(f"wrote {report_path}")
    if args.failures:
        dump_failures(all_failures, args.failures)
        print(f"wrote {args.failures}")
    return EXIT_OK


def _cmd_saliency(args):
    ckpt_path, tokenizer_path, approach, _ = _resolve_eval_inputs(args)
    op = operation_by_kind(args.op)
    positions = [int(p) for p in args.positions.split(",") if p != ""]
    if not positions:
        raise ValueError("--positions needs at least one generated-token index")
    prompt = prompt_prefix(args.n1, args.n2, op, approach)
    out = Path(args.out)
    text_path = out / "saliency.txt"
    html_path = out / "saliency.html"
    _write_manifest(
        out,
        "saliency",
        {
            "checkpoint": str(ckpt_path),
            "tokenizer": str(tokenizer_path),
            "approach": approach.value,
            "prompt": prompt,
            "positions": positions,
            "outputs": [str(text_path), str(html_path)],
        },
    )
    ckpt = load_checkpoint(ckpt_path)
    tokenizer = TokenizerModel.load(tokenizer_path)
    panels = saliency_report(
        ckpt,
        tokenizer,
        prompt,
        positions,
        text_path=text_path,
        html_path=html_path,
        max_new_tokens=args.max_new_tokens,
    )
    with open(text_path, "r", encoding="utf-8") as f:
        print(f.read(), end="")
    print(f"wrote {text_path} and {html_path} ({len(panels)} panels)")
    return EXIT_OK


def _cmd_remote(args):
    out = Path(args.out)
    if args.replay:
        transcript = _require(args.replay, "arithlab remote --endpoint URL --test LABEL=PATH")
        report = replay_transcript(transcript)
        print(report.to_text(), end="")
        report_path = out / "report.csv"
        _write_manifest(out, "remote", {"mode": "replay", "transcript": str(transcript),
                                        "report": str(report_path)})
        emit_report(report, "csv", report_path)
        print(f"wrote {report_path}")
        return EXIT_OK

    if not args.endpoint:
        raise ValueError("remote needs --endpoint URL (or --replay TRANSCRIPT)")
    tasks = _parse_labeled_tests(args.test, args.test_format)
    if not tasks:
        raise ValueError("remote needs at least one --test LABEL=PATH")
    _, _, remote_file = _config_file_values(args)
    merged = dict(remote_file)
    flags = {
        "endpoint": args.endpoint,
        "auth_env": args.auth_env,
        "temperature": args.temperature,
        "max_cases": args.max_cases,
        "timeout": args.timeout,
        "retries": args.retries,
        "prompt_style": args.style,
        "response_field": args.response_field,
        "max_tokens": args.max_tokens,
        "min_delay": args.min_delay,
    }
    merged.update({k: v for k, v in flags.items() if v is not None})
    for key in ("temperature", "timeout", "min_delay"):
        if key in merged:
            merged[key] = float(merged[key])
    for key in ("max_cases", "retries", "max_tokens"):
        if key in merged:
            merged[key] = int(merged[key])
    try:
        config = RemoteConfig(**merged)
    except RemoteError as exc:
        # Bad settings are invocation mistakes, not endpoint failures.
        raise ValueError(str(exc)) from exc

    transcript_path = out / "transcript.jsonl"
    report_path = out / "report.csv"
    _write_manifest(
        out,
        "remote",
        {
            "mode": "live",
            "remote": dataclasses.asdict(config),
            "tasks": [[label, len(cases)] for label, cases in tasks],
            "transcript": str(transcript_path),
            "report": str(report_path),
        },
    )
    report, _ = run_remote_eval(config, tasks, transcript_path)
    emit_report(report, "csv", report_path)
    print(report.to_text(), end="")
    print(f"wrote {transcript_path} and {report_path}")
    answered = sum(total for _, total, _ in report.counts.values())
    if answered == 0:
        print("error: no case was ever answered; see skip warnings above", file=sys.stderr)
        return EXIT_REMOTE
    return EXIT_OK


def _cmd_report(args):
    if args.compare:
        path_a = _require(args.compare[0], "arithlab eval ... --format csv")
        path_b = _require(args.compare[1], "arithlab eval ... --format csv")
        text = compare_reports(parse_report_csv(path_a), parse_report_csv(path_b))
        print(text, end="")
        if args.out_file:
            with open(args.out_file, "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
            print(f"wrote {args.out_file}")
        return EXIT_OK
    if args.show:
        report = parse_report_csv(_require(args.show, "arithlab eval ... --format csv"))
        if args.out_file:
            emit_report(report, args.format, args.out_file)
            print(f"wrote {args.out_file}")
        print(report.to_text(), end="")
        return EXIT_OK
    raise ValueError("report needs --compare A B or --show PATH")


# ---------------------------------------------------------------------------
# Parser


def _add_common(parser, out_default="."):
    parser.add_argument("--seed", type=int, default=0, help="master random seed")
    parser.add_argument("--config", help="key = value config file (model.* and remote.* prefixes)")
    parser.add_argument("--out", default=out_default, help="output directory")
    parser.add_argument(
        "--precision", choices=("standard", "wide"), default=None,
        help="float32 (standard) or float64 (wide) training arithmetic",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="arithlab",
        description="Desk-scale lab for place-value decomposition arithmetic experiments.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="sample training datasets and held-out test sets")
    _add_common(p)
    p.add_argument("--all", action="store_true", help="all three operations x all three formats")
    p.add_argument("--op", choices=sorted(_OPS), help="operation to sample")
    p.add_argument(
        "--approach",
        choices=[a.value for a in Approach],
        help="surface format for the training observations",
    )
    p.add_argument(
        "--tests-per-band", type=int, default=200,
        help="held-out test pairs per digit band (0 disables test sets)",
    )
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train the tokenizer and model on one dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset file from `arithlab generate`")
    p.add_argument("--vocab", type=int, default=512, help="tokenizer target vocabulary size")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None, help="checkpoint/log interval in steps")
    p.add_argument("--max-seq-len", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on held-out test sets")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint from `arithlab train`")
    p.add_argument("--tokenizer", default=None, help="tokenizer file (default: beside the checkpoint)")
    p.add_argument("--approach", choices=[a.value for a in Approach], default=None)
    p.add_argument("--test", action="append", metavar="LABEL=PATH",
                   help="test set with its task label, e.g. 2D+=tests/add_2d.tsv")
    p.add_argument("--test-format", choices=("native", "gpt3-jsonl"), default="native")
    p.add_argument("--matrix", action="store_true",
                   help="evaluate every digit band of the checkpoint's operation")
    p.add_argument("--tests-dir", default="tests", help="directory of per-band test sets")
    p.add_argument("--op", choices=sorted(_OPS), default=None, help="operation for --matrix")
    p.add_argument("--format", choices=("text", "csv", "html"), default="csv")
    p.add_argument("--failures", default=None, help="write failing cases to this JSONL file")
    p.add_argument("--max-new-tokens", type=int, default=DEFAULT_MAX_NEW_TOKENS)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("saliency", help="input-attribution panels for one prompt")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--approach", choices=[a.value for a in Approach], default=None)
    p.add_argument("--n1", type=int, required=True)
    p.add_argument("--n2", type=int, required=True)
    p.add_argument("--op", choices=sorted(_OPS), default="add")
    p.add_argument("--positions", default="0",
                   help="comma-separated generated-token indices to attribute")
    p.add_argument("--max-new-tokens", type=int, default=DEFAULT_MAX_NEW_TOKENS)
    p.set_defaults(func=_cmd_saliency)

    p = sub.add_parser("remote", help="few-shot evaluation against a completion endpoint")
    _add_common(p)
    p.add_argument("--endpoint", default=None, help="completion endpoint URL")
    p.add_argument("--auth-env", default=None, help="environment variable holding the auth token")
    p.add_argument("--style", choices=PROMPT_STYLES, default=None)
    p.add_argument("--test", action="append", metavar="LABEL=PATH")
    p.add_argument("--test-format", choices=("native", "gpt3-jsonl"), default="native")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-cases", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--retries", type=int, default=None)
    p.add_argument("--response-field", default=None)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--min-delay", type=float, default=None)
    p.add_argument("--replay", default=None, help="rebuild the report from a transcript, offline")
    p.set_defaults(func=_cmd_remote)

    p = sub.add_parser("report", help="render or compare saved report CSVs")
    _add_common(p)
    p.add_argument("--compare", nargs=2, metavar=("A", "B"), help="print per-cell deltas A - B")
    p.add_argument("--show", default=None, help="print a saved report CSV as a table")
    p.add_argument("--format", choices=("text", "csv", "html"), default="text")
    p.add_argument("--out-file", default=None, help="also write the rendered output here")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    raw_argv = argv if argv is not None else sys.argv[1:]
    args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in raw_argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DatasetIOError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RemoteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
