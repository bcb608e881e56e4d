"""Single entry point: every workflow is a subcommand sharing one config file.

Exit codes: 0 success, 1 user error, 2 internal error. Errors print one
machine-greppable line of the form ``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import annotate as annotate_mod
from . import data, plots, training
from .config import load_config
from .errors import ConfigError, LexcountError
from .lang_encoder import tokenize


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lexcount", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", parser_class=_Parser, help="emit a synthetic counting corpus")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parser_class=_Parser, help="run the training loop")
    _add_config_flags(p)
    p.add_argument("--data", default=None, help="dataset root (overrides train.data_root)")
    p.add_argument("--out", default=None, help="output directory (overrides train.out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parser_class=_Parser, help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None, help="per-sample CSV path")
    p.add_argument("--dump-maps", default=None, help="directory for similarity/density images")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict-exemplar", parser_class=_Parser, help="regress exemplar boxes for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True, help="referring expression")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None, help="visualization path (default: <image>.boxes.png)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("annotate", parser_class=_Parser, help="annotate a corpus with expressions")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", choices=["http", "offline"], required=True)
    p.add_argument("--endpoint", default=None, help="caption service URL (http backend)")
    p.add_argument("--auth-env", default="", help="environment variable holding the auth token")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("plot-curves", parser_class=_Parser, help="render training curves from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot_curves)

    return parser


def cmd_generate(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file {spec_path} not found")
    spec = data.SyntheticSpec.from_dict(json.loads(spec_path.read_text()))
    samples = data.generate_synthetic(spec, args.n)
    ann_path = data.write_corpus(spec, samples, args.out, args.split)
    print(f"wrote {len(samples)} samples to {ann_path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out if args.out is not None else cfg.train.out_dir)
    state = training.train(cfg, data_root=args.data, out_dir=out)
    training.save_checkpoint(state, out / "checkpoint.npz")
    paths = training.emit_curves(state, out)
    last = state.history[-1]
    print(f"finished step {last[0]}: loss {last[1]:.4f} val MAE {last[2]:.4f} RMSE {last[3]:.4f}")
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    print(f"curves: {paths['loss']} {paths['val_mae']} {paths['csv']}")
    return 0


def cmd_eval(args) -> int:
    state = training.load_checkpoint(args.ckpt)
    samples = data.load_dataset(args.data, args.split)
    result = training.evaluate(state.model, samples, state.vocab, state.config)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}.csv"
    training.write_eval_csv(result.rows, out)
    if args.dump_maps:
        _dump_maps(state, samples, Path(args.dump_maps))
    print(f"MAE {result.mae:.4f} RMSE {result.rmse:.4f} over {len(result.rows)} samples")
    print(f"per-sample report: {out}")
    return 0


def _dump_maps(state, samples, out_dir: Path):
    import torch

    cfg = state.config
    for sample in samples:
        batch = training.make_batch([sample], state.vocab, cfg)
        with torch.no_grad():
            boxes = state.model.perceptron(
                batch.ids, batch.mask, None if state.model.perceptron.vis is None else batch.images
            )
            pred = state.model.counter(batch.images, boxes)
        plots.save_grayscale(pred.similarity[0].numpy(), out_dir / f"{sample.sample_id}_similarity.png")
        if pred.density is not None:
            plots.save_grayscale(pred.density[0].numpy(), out_dir / f"{sample.sample_id}_density.png")


def cmd_predict(args) -> int:
    state = training.load_checkpoint(args.ckpt)
    cfg = state.config
    image = data.load_image(args.image)
    tensor = data.preprocess_image(image, cfg.data.input_size, cfg.data.mean, cfg.data.std)
    tokens = tokenize(args.text, state.vocab, cfg.lang.n_tokens)
    boxes = state.model.perceptron.perceive(tokens, state.vocab, tensor)
    for box in boxes:
        print(f"{box.x:.6f} {box.y:.6f} {box.h:.6f} {box.w:.6f}")
    out = Path(args.out) if args.out else Path(str(args.image) + ".boxes.png")
    plots.draw_boxes(image, boxes, out)
    print(f"visualization: {out}")
    return 0


def cmd_annotate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    a = cfg.annotate
    protocol = annotate_mod.PromptProtocol(max_retries=a.max_retries, timeout=a.timeout)
    if args.backend == "http":
        if not args.endpoint:
            raise ConfigError("--endpoint is required for the http backend")
        backend = annotate_mod.HttpBackend(endpoint=args.endpoint, auth_env=args.auth_env, backoff_base=a.backoff_base)
    else:
        backend = annotate_mod.offline_backend_for_corpus(args.dataset, args.split)
    report = annotate_mod.annotate_corpus(
        args.dataset, protocol, backend, args.out, split=args.split, concurrency=a.concurrency
    )
    print(
        f"annotated {report.successes} samples "
        f"(failures={report.failures}, skipped={report.skipped}, "
        f"mean expression length {report.mean_expression_length:.1f})"
    )
    return 0


def cmd_plot_curves(args) -> int:
    state = training.load_checkpoint(args.ckpt)
    paths = training.emit_curves(state, args.out)
    print(f"curves: {paths['loss']} {paths['val_mae']} {paths['csv']}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except LexcountError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1 if exc.user_error else 2
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
