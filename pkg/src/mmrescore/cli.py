"""Command-line entry point.

Subcommands: synth | train | rescore | sweep | eval. Option precedence is
defaults < --config file (flat JSON object) < explicit command-line flags.
Every run writes a manifest (resolved config, seed, input digests) into the
output directory so it can be reproduced exactly.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .data import (
    DataError,
    Vocab,
    file_digest,
    read_blocklist,
    read_nbest,
)
from .model import Model, ModelConfig, init_params
from .objectives import DivergenceError, TrainConfig, load_train_samples, train
from .rescore import (
    RescoreConfig,
    evaluate,
    rescore_entries,
    sweep_lambda,
    write_rescore_output,
)
from .synth import SynthConfig, generate


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _load_config_file(path: str | None) -> tuple[dict, int | None]:
    """Read a flat JSON config. A previously written manifest.json is also
    accepted: its resolved config (and seed) are reused, so a run can be
    reproduced by pointing --config at the manifest."""
    if path is None:
        return {}, None
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config file {path} must hold a flat JSON object")
    if "command" in obj and "config" in obj:
        return dict(obj["config"]), obj.get("seed")
    return obj, None


def _resolve(defaults: dict, config_file: dict, flags: dict) -> dict:
    """defaults <- config file <- explicit flags (None means flag not given)."""
    resolved = dict(defaults)
    for key, value in config_file.items():
        if key not in resolved:
            raise UsageError(f"unknown config key: {key}")
        resolved[key] = value
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir: Path, command: str, resolved: dict, seed: int,
                    inputs: list[str | Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": resolved,
        "inputs": {str(p): file_digest(p) for p in inputs if p and Path(p).is_file()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    defaults = dataclasses.asdict(SynthConfig())
    defaults.pop("word_pairs")
    file_config, file_seed = _load_config_file(args.config)
    resolved = _resolve(defaults, file_config, {})
    seed = args.seed if args.seed is not None else (file_seed if file_seed is not None else 7)
    out = Path(args.out)
    generate(SynthConfig(**resolved), seed, out)
    _write_manifest(out, "synth", resolved, seed, [])
    print(f"synthetic corpus written to {out}")
    return 0


_TRAIN_DEFAULTS = {
    # model
    "d_model": 64, "encoder_layers": 2, "heads": 4, "ffn_dim": 128,
    "speech_encoder_layers": 1, "max_positions": 512, "dropout": 0.1,
    "pool_tap": "inputs",
    # optimization
    "alpha": 1.0, "learning_rate": 2e-3, "batch_size": 32, "mask_rate": 0.15,
    "steps": 3000, "warmup_fraction": 0.1, "alignment": "contrastive",
    "freeze": "", "text_only": False,
    # periodic dev-set rescoring log and checkpoints
    "eval_every": 1000, "eval_entries": 50, "eval_lambda": 0.5,
    "checkpoint_every": 1000,
}


def _cmd_train(args) -> int:
    flags = {
        "alpha": args.alpha, "steps": args.steps, "batch_size": args.batch_size,
        "alignment": args.alignment, "freeze": args.freeze,
        "text_only": True if args.text_only else None,
        "eval_lambda": getattr(args, "lambda"),
    }
    file_config, file_seed = _load_config_file(args.config)
    resolved = _resolve(_TRAIN_DEFAULTS, file_config, flags)
    seed = args.seed if args.seed is not None else (file_seed if file_seed is not None else 0)
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    vocab = Vocab.load(data / "vocab.txt")
    samples = load_train_samples(data / "train.jsonl", vocab)
    if resolved["text_only"]:
        resolved["alignment"] = "none"

    model_config = ModelConfig(
        vocab_size=len(vocab),
        feature_dims=samples[0].features.dims,
        d_model=resolved["d_model"],
        encoder_layers=resolved["encoder_layers"],
        heads=resolved["heads"],
        ffn_dim=resolved["ffn_dim"],
        speech_encoder_layers=resolved["speech_encoder_layers"],
        max_positions=resolved["max_positions"],
        dropout=resolved["dropout"],
        text_only=bool(resolved["text_only"]),
        pool_tap=resolved["pool_tap"],
    )
    model = Model(model_config, init_params(model_config, seed), vocab)

    freeze = resolved["freeze"]
    if isinstance(freeze, str):
        freeze = tuple(g for g in freeze.split(",") if g)
    from .model import GROUP_NAMES
    unknown = [g for g in freeze if g not in GROUP_NAMES]
    if unknown:
        raise UsageError(f"unknown parameter groups in --freeze: {', '.join(unknown)}; "
                         f"valid groups: {', '.join(GROUP_NAMES)}")
    train_config = TrainConfig(
        alpha=resolved["alpha"],
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        mask_rate=resolved["mask_rate"],
        total_steps=resolved["steps"],
        warmup_fraction=resolved["warmup_fraction"],
        seed=seed,
        alignment=resolved["alignment"],
        freeze=freeze,
    )

    dev_path = data / "dev.jsonl"
    dev_entries = read_nbest(dev_path)[: resolved["eval_entries"]] if dev_path.is_file() else []
    eval_config = RescoreConfig(resolved["eval_lambda"], base_dir=data, workers=args.workers or 1)

    inputs = [data / "train.jsonl", data / "vocab.txt"]
    if dev_path.is_file():
        inputs.append(dev_path)
    _write_manifest(out, "train", resolved, seed, inputs)

    log_path = out / "train_log.jsonl"
    dev_log_path = out / "dev_log.jsonl"
    every = resolved["eval_every"]
    ckpt_every = resolved["checkpoint_every"]

    with open(log_path, "w", encoding="utf-8") as log, \
         open(dev_log_path, "w", encoding="utf-8") as dev_log:

        def on_step(step, breakdown, lr):
            log.write(json.dumps({
                "step": step, "mlm": breakdown.mlm, "alignment": breakdown.alignment,
                "joint": breakdown.joint, "lr": lr,
            }) + "\n")
            if dev_entries and every and (step % every == 0 or step == train_config.total_steps):
                report = evaluate(model, dev_entries, resolved["eval_lambda"],
                                  set(), eval_config)
                dev_log.write(json.dumps({"step": step, "dev_wer": report.wer,
                                          "lambda": resolved["eval_lambda"]}) + "\n")
                dev_log.flush()
                print(f"step {step}: joint={breakdown.joint:.4f} dev_wer={report.wer:.4f}")
            if ckpt_every and step % ckpt_every == 0:
                model.save(out / f"model_step{step:06d}.ckpt")

        train(model, samples, train_config, on_step=on_step)

    model.save(out / "model.ckpt")
    print(f"trained {train_config.total_steps} steps; checkpoint at {out / 'model.ckpt'}")
    return 0


def _load_model(args) -> tuple[Model, Path]:
    nbest = Path(args.nbest)
    vocab_path = Path(args.vocab) if args.vocab else nbest.parent / "vocab.txt"
    vocab = Vocab.load(vocab_path)
    model = Model.load(args.model, vocab)
    return model, nbest


def _cmd_rescore(args) -> int:
    model, nbest = _load_model(args)
    resolved = _resolve({"lambda": 0.5, "workers": 1}, _load_config_file(args.config)[0],
                        {"lambda": getattr(args, "lambda"), "workers": args.workers})
    entries = read_nbest(nbest)
    config = RescoreConfig(resolved["lambda"], base_dir=nbest.parent,
                           workers=resolved["workers"])
    results = rescore_entries(model, entries, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rescore_output(out / "rescored.jsonl", entries, results, resolved["lambda"])
    _write_manifest(out, "rescore", resolved, 0, [nbest, args.model])
    print(f"rescored {len(entries)} entries at lambda={resolved['lambda']} "
          f"-> {out / 'rescored.jsonl'}")
    return 0


def _cmd_sweep(args) -> int:
    model, nbest = _load_model(args)
    default_grid = [round(0.05 * i, 2) for i in range(21)]
    flags = {
        "grid": [float(x) for x in args.grid.split(",")] if args.grid else None,
        "workers": args.workers,
    }
    resolved = _resolve({"grid": default_grid, "workers": 1},
                        _load_config_file(args.config)[0], flags)
    entries = read_nbest(nbest)
    config = RescoreConfig(0.0, base_dir=nbest.parent, workers=resolved["workers"])
    best, table = sweep_lambda(model, entries, resolved["grid"], config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"best_lambda": best, "table": [{"lambda": lam, "wer": w} for lam, w in table]}
    (out / "sweep.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "sweep", resolved, 0, [nbest, args.model])
    for lam, w in table:
        print(f"lambda={lam:.2f}  wer={w:.4f}")
    print(f"best lambda: {best}")
    return 0


def _cmd_eval(args) -> int:
    model, nbest = _load_model(args)
    resolved = _resolve({"lambda": 0.5, "workers": 1, "blocklist": None},
                        _load_config_file(args.config)[0],
                        {"lambda": getattr(args, "lambda"), "workers": args.workers,
                         "blocklist": args.blocklist})
    entries = read_nbest(nbest)
    blocklist = set()
    block_path = Path(resolved["blocklist"]) if resolved["blocklist"] \
        else nbest.parent / "blocklist.txt"
    if block_path.is_file():
        blocklist = read_blocklist(block_path)
    config = RescoreConfig(resolved["lambda"], base_dir=nbest.parent,
                           workers=resolved["workers"])
    report = evaluate(model, entries, resolved["lambda"], blocklist, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _write_manifest(out, "eval", {**resolved, "blocklist": str(block_path)}, 0,
                    [nbest, args.model])
    print(report.table())
    print(f"WER {report.wer:.3f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mmrescore", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p)

    p = sub.add_parser("train", help="train a rescoring model")
    _add_common(p)
    p.add_argument("--data", required=True, help="corpus directory from `synth`")
    p.add_argument("--alpha", type=float, default=None, help="alignment loss weight")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--alignment", choices=["contrastive", "mse", "none"], default=None)
    p.add_argument("--freeze", default=None, help="comma list of parameter groups")
    p.add_argument("--text-only", action="store_true", default=False)
    p.add_argument("--lambda", type=float, default=None,
                   help="interpolation weight for the periodic dev-set log")
    p.add_argument("--workers", type=int, default=None)

    for name, desc in (("rescore", "re-rank an n-best file"),
                       ("sweep", "tune the interpolation weight on a dev set"),
                       ("eval", "evaluate WER/CWER on a test n-best file")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        p.add_argument("--model", required=True, help="model checkpoint")
        p.add_argument("--nbest", required=True, help="n-best JSONL file")
        p.add_argument("--vocab", default=None,
                       help="vocab file (default: vocab.txt next to --nbest)")
        p.add_argument("--workers", type=int, default=None)
        if name in ("rescore", "eval"):
            p.add_argument("--lambda", type=float, default=None)
        if name == "sweep":
            p.add_argument("--grid", default=None, help="comma list of weights")
        if name == "eval":
            p.add_argument("--blocklist", default=None,
                           help="blocklist file (default: blocklist.txt next to --nbest)")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        handler = {
            "synth": _cmd_synth,
            "train": _cmd_train,
            "rescore": _cmd_rescore,
            "sweep": _cmd_sweep,
            "eval": _cmd_eval,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
