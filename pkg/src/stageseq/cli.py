"""Command-line entry point: gen-data / train / eval / compare / gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 training or
numeric error. Results go to stdout, diagnostics (including the resolved
configuration echoed by every run) to stderr. Flag values resolve as
built-in defaults < `--config key=value file < explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from stageseq.encoder import EncoderConfig
from stageseq.errors import DataError, DimensionError, NumericError, TrainingError
from stageseq.lstm import LossWeights
from stageseq.model import (
    KIND_PROPOSED,
    ModelConfig,
    init_params,
    load_model,
    proposed_batch_loss,
    save_model,
)
from stageseq.numerics import finite_diff_gradient, gradcheck_relative_error
from stageseq.pipeline import (
    TrainConfig,
    TrainedModel,
    compare_experiment,
    evaluate,
    split_dataset,
    train,
)
from stageseq.sampler import cyclic_labels
from stageseq.synth import SynthConfig, generate, load_dataset

GRADCHECK_DIMS = {
    # name -> (image side, feature dim, hidden dim, stages, batch)
    "tiny": (16, 8, 8, 3, 2),
    "small": (24, 16, 12, 4, 2),
}


class CliParser(argparse.ArgumentParser):
    """argparse, but usage errors exit with code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _stage_count(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 stages, got {value}")
    return value


def _image_size(text: str) -> int:
    value = int(text)
    if value < 8:
        raise argparse.ArgumentTypeError(f"image size must be >= 8, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative value, got {value}")
    return value


def _comma_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from exc


def build_parser() -> tuple[CliParser, dict[str, CliParser]]:
    parser = CliParser(prog="stageseq", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    sub.required = True
    commands: dict[str, CliParser] = {}

    def command(name: str, help_text: str) -> CliParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="key=value file applied between defaults and flags")
        p.add_argument("--seed", type=int, default=0)
        commands[name] = p
        return p

    p = command("gen-data", "generate a synthetic stage-progression dataset")
    p.add_argument("--out", default=None, metavar="DIR")
    p.add_argument("--stages", type=_stage_count, default=4)
    p.add_argument("--per-stage", type=_positive_int, default=100)
    p.add_argument("--size", type=_image_size, default=32)
    p.add_argument("--lesion-base", type=_positive_int, default=2)
    p.add_argument("--noise-sigma", type=_nonneg_float, default=0.05)
    p.add_argument("--drift", type=_nonneg_float, default=0.03)
    p.set_defaults(func=cmd_gen_data, required_flags=("out",))

    p = command("train", "train one model on a dataset directory")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--out", default=None, metavar="FILE")
    p.add_argument("--model", choices=("proposed", "baseline"), default="proposed")
    p.add_argument("--sequence", choices=("cyclic", "nonregression"), default=None)
    p.add_argument("--steps-per-epoch", type=_positive_int, default=100)
    p.add_argument("--batch", type=_positive_int, default=None, dest="batch_size",
                   help="default 16 for proposed, 64 for baseline")
    p.add_argument("--max-epochs", type=_positive_int, default=100)
    p.add_argument("--patience", type=_positive_int, default=10)
    p.add_argument("--lr0", type=float, default=0.001)
    p.add_argument("--decay", type=_nonneg_float, default=1e-6)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--feature-dim", type=_positive_int, default=64)
    p.add_argument("--hidden-dim", type=_positive_int, default=64)
    p.add_argument("--alpha", type=_comma_floats, default=None)
    p.add_argument("--beta", type=_comma_floats, default=None)
    p.add_argument("--history", default=None, metavar="FILE",
                   help="write per-epoch history as JSON")
    p.set_defaults(func=cmd_train, required_flags=("data", "out"))

    p = command("eval", "evaluate a trained model and write a JSON report")
    p.add_argument("--model", default=None, metavar="FILE")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--head", choices=("vision", "lstm"), default="vision")
    p.add_argument("--report", default=None, metavar="FILE")
    p.add_argument("--split", choices=("all", "test"), default="all",
                   help="evaluate the whole dataset or its held-out test split")
    p.add_argument("--split-seed", type=int, default=None,
                   help="seed that produced the training split (defaults to --seed)")
    p.set_defaults(func=cmd_eval, required_flags=("model", "data"))

    p = command("compare", "repeat the baseline-vs-proposed comparison experiment")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--sequence", choices=("cyclic", "nonregression", "both"), default="cyclic")
    p.add_argument("--steps-per-epoch", type=_positive_int, default=100)
    p.add_argument("--max-epochs", type=_positive_int, default=100)
    p.add_argument("--patience", type=_positive_int, default=10)
    p.add_argument("--n-per-class", type=_positive_int, default=None,
                   help="undersample size per class (default: smallest class)")
    p.add_argument("--feature-dim", type=_positive_int, default=64)
    p.add_argument("--hidden-dim", type=_positive_int, default=64)
    p.add_argument("--json", default=None, metavar="FILE", dest="json_out")
    p.set_defaults(func=cmd_compare, required_flags=("data",))

    p = command("gradcheck", "compare analytic gradients against finite differences")
    p.add_argument("--tol", type=_nonneg_float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--dims", choices=tuple(GRADCHECK_DIMS), default="tiny")
    p.set_defaults(func=cmd_gradcheck, required_flags=())

    return parser, commands


# ---------------------------------------------------------------------------
# config-file support


def _find_config_path(argv: list[str]) -> str | None:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def _load_config_file(path: str, command_parser: CliParser, parser: CliParser) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        parser.error(f"cannot read config file {path}: {exc}")
    actions = {a.dest: a for a in command_parser._actions}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        dest = key.strip().replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help", "func"):
            parser.error(f"{path}:{lineno}: unknown option {key.strip()!r}")
        convert = action.type or str
        try:
            value = convert(raw.strip())
        except (argparse.ArgumentTypeError, ValueError) as exc:
            parser.error(f"{path}:{lineno}: bad value for {key.strip()!r}: {exc}")
        if action.choices is not None and value not in action.choices:
            parser.error(f"{path}:{lineno}: {key.strip()!r} must be one of {sorted(action.choices)}")
        values[dest] = value
    return values


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser, commands = build_parser()
    if argv and argv[0] in commands:
        config_path = _find_config_path(argv[1:])
        if config_path is not None:
            file_values = _load_config_file(config_path, commands[argv[0]], parser)
            # file values become the subcommand's defaults; explicit flags win
            commands[argv[0]].set_defaults(**file_values)
    args = parser.parse_args(argv)
    for flag in args.required_flags:
        if getattr(args, flag) is None:
            commands[args.command].error(f"--{flag.replace('_', '-')} is required")
    return args


def _announce(args: argparse.Namespace) -> None:
    skip = {"func", "required_flags", "command", "config"}
    parts = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip]
    print(f"[stageseq {args.command}] " + " ".join(parts), file=sys.stderr)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = SynthConfig(
        num_stages=args.stages,
        per_stage=args.per_stage,
        size=args.size,
        lesion_base=args.lesion_base,
        noise_sigma=args.noise_sigma,
        drift=args.drift,
        seed=args.seed,
    )
    manifest = generate(config, args.out)
    total = args.stages * args.per_stage
    print(f"wrote {total} images ({args.per_stage} per stage, {args.stages} stages) to {args.out}; "
          f"manifest: {manifest}")
    return 0


def _split_rngs(seed: int) -> tuple[np.random.Generator, int]:
    """One stream for the dataset split, one derived integer seed for training."""
    split_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(split_ss), int(train_ss.generate_state(1)[0])


def cmd_train(args) -> int:
    if args.model == "baseline" and args.sequence is not None:
        print("warning: --sequence is ignored for the baseline model", file=sys.stderr)
    dataset = load_dataset(args.data)
    h, w = dataset.images.shape[1:]
    encoder = EncoderConfig(image_height=h, image_width=w, feature_dim=args.feature_dim)
    config = TrainConfig(
        model_kind=args.model,
        sequence_mode=args.sequence or "cyclic",
        steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        learning_rate0=args.lr0,
        decay=args.decay,
        momentum=args.momentum,
        alpha=args.alpha,
        beta=args.beta,
        encoder=encoder,
        hidden_dim=args.hidden_dim,
        seed=args.seed,
    )
    split_rng, train_seed = _split_rngs(args.seed)
    train_set, val_set, _ = split_dataset(dataset, split_rng)
    config = dataclasses.replace(config, seed=train_seed)

    def progress(epoch, stats):
        line = f"epoch {epoch:3d}: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(stats.items()))
        print(line, file=sys.stderr)

    model = train(config, train_set, val_set, progress=progress)
    save_model(args.out, model.kind, model.model_config, model.params)
    if args.history:
        _write_json(args.history, {"history": model.history, "best_epoch": model.best_epoch,
                                   "best_val_loss": model.best_val_loss,
                                   "epochs": model.num_epochs,
                                   "optimizer_steps": model.update_count})
    print(f"trained {model.kind} for {model.num_epochs} epochs "
          f"(best epoch {model.best_epoch}, val loss {model.best_val_loss:.6f}); model: {args.out}")
    return 0


def cmd_eval(args) -> int:
    kind, model_config, params = load_model(args.model)
    dataset = load_dataset(args.data)
    if args.split == "test":
        split_seed = args.split_seed if args.split_seed is not None else args.seed
        split_rng, _ = _split_rngs(split_seed)
        _, _, dataset = split_dataset(dataset, split_rng)
    model = TrainedModel(kind=kind, params=params, model_config=model_config,
                         train_config=TrainConfig(model_kind=kind), history={"val_loss": []},
                         best_epoch=-1, best_val_loss=float("nan"), update_count=0)
    report = evaluate(model, dataset, args.head)
    if args.report:
        _write_json(args.report, report.to_json_dict())
    print(report.format_confusion())
    return 0


def cmd_compare(args) -> int:
    dataset = load_dataset(args.data)
    h, w = dataset.images.shape[1:]
    modes = ("cyclic", "nonregression") if args.sequence == "both" else (args.sequence,)
    base_config = TrainConfig(
        steps_per_epoch=args.steps_per_epoch,
        max_epochs=args.max_epochs,
        patience=args.patience,
        encoder=EncoderConfig(image_height=h, image_width=w, feature_dim=args.feature_dim),
        hidden_dim=args.hidden_dim,
    )
    workers = int(os.environ.get("STAGESEQ_THREADS", "1") or "1")
    result = compare_experiment(dataset, base_config, args.repeats, args.seed,
                                n_per_class=args.n_per_class, modes=modes,
                                workers=max(1, min(workers, args.repeats)))
    for failure in result.failures:
        print(f"repeat {failure['repeat']} failed: {failure['error']}", file=sys.stderr)
    if result.num_successes == 0:
        print("all repeats failed", file=sys.stderr)
        return 3
    if args.json_out:
        _write_json(args.json_out, result.to_json_dict())
    print(result.format_table(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    side, feature_dim, hidden_dim, stages, batch = GRADCHECK_DIMS[args.dims]
    encoder = EncoderConfig(image_height=side, image_width=side, feature_dim=feature_dim)
    config = ModelConfig(encoder=encoder, num_stages=stages, hidden_dim=hidden_dim)
    rng = np.random.default_rng(args.seed)
    params = init_params(KIND_PROPOSED, config, rng)
    images = rng.uniform(size=(batch, stages, side, side))
    labels = np.stack([cyclic_labels(stages, int(rng.integers(stages))) for _ in range(batch)])
    weights = LossWeights.ones(stages)

    def loss_fn(p):
        return proposed_batch_loss(images, labels, p, config, weights, with_grads=False)[0]

    _, analytic = proposed_batch_loss(images, labels, params, config, weights)
    numeric = finite_diff_gradient(loss_fn, params, args.eps)
    failures = 0
    worst_name, worst_err = "", -1.0
    for name in sorted(params):
        err = gradcheck_relative_error(analytic[name], numeric[name])
        ok = err <= args.tol
        failures += 0 if ok else 1
        if err > worst_err:
            worst_name, worst_err = name, err
        print(f"{name:<10} rel_err={err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"worst: {worst_name} rel_err={worst_err:.3e} (tol {args.tol:g}, eps {args.eps:g}, "
          f"dims {args.dims}, {len(params)} tensors)")
    if failures:
        print(f"gradient check FAILED for {failures} tensor(s)", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    _announce(args)
    try:
        return args.func(args)
    except (DataError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
