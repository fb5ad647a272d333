"""Command-line front end for dataset generation, training, and evaluation.

Subcommands: ``gen-data``, ``train``, ``eval``, ``gradcheck``, and
``dump-attention``.  Every command resolves a flat run configuration from
defaults, an optional ``--config`` file, and per-field command-line
overrides (later sources win), writes the fully resolved configuration
next to its outputs, and is deterministic given that file.

Exit codes: 0 success, 1 check failure, 2 configuration error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import checksuite
from . import config as cfgmod
from . import evalkit
from . import model as mdl
from . import pnm
from . import synthbench
from . import trainer

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_IO_ERROR = 3

RESOLVED_CONFIG_NAME = "run_config.txt"


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _add_override_options(parser: argparse.ArgumentParser) -> None:
    for f in fields(cfgmod.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar="VALUE")
    # the switch epoch under its colloquial name as well
    parser.add_argument(
        "--stage2-start", dest="stage2_start_epoch", default=None, metavar="VALUE"
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="piareid",
        description="cross-modality clothing-change re-identification workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="key = value configuration file")
        p.add_argument("--out", default=None, metavar="DIR",
                       help="output directory (overrides the config)")
        _add_override_options(p)
        return p

    command("gen-data", "render the synthetic dataset and its manifest")

    p_train = command("train", "run the two-stage training loop")
    p_train.add_argument("--ablation", default=None, metavar="PRESET",
                         help="preset: " + ", ".join(cfgmod.ABLATION_PRESETS))

    p_eval = command("eval", "score a checkpoint on the test protocol")
    p_eval.add_argument("--direction", default=evalkit.DIRECTION_V2I,
                        choices=[*evalkit.DIRECTIONS, "both"])

    p_grad = command("gradcheck", "finite-difference check of every operator and loss")
    p_grad.add_argument("--tol", type=float, default=checksuite.DEFAULT_TOL)
    p_grad.add_argument("--configs", type=int, default=checksuite.DEFAULT_CONFIGS)
    p_grad.add_argument("--step", type=float, default=None)
    p_grad.add_argument("--only", default=None, metavar="NAME",
                        help="run a single named check")

    p_dump = command("dump-attention", "write a sample's attention masks as PGM")
    p_dump.add_argument("--sample", required=True, metavar="PATH",
                        help="a rendered sample image (PPM)")

    return parser


def _resolve_config(args: argparse.Namespace) -> cfgmod.RunConfig:
    file_text = None
    if args.config is not None:
        try:
            file_text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise _CliError(EXIT_IO_ERROR, f"cannot read config file: {exc}")
    overrides = {}
    for f in fields(cfgmod.RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = str(value)
    try:
        cfg = cfgmod.build_config(file_text, overrides)
        if getattr(args, "ablation", None) is not None:
            cfg = cfg.with_ablation(args.ablation)
        return cfg
    except cfgmod.ConfigError as exc:
        raise _CliError(EXIT_CONFIG_ERROR, str(exc))


def _validated(cfg: cfgmod.RunConfig) -> cfgmod.RunConfig:
    try:
        cfg.validate()
    except cfgmod.ConfigError as exc:
        raise _CliError(EXIT_CONFIG_ERROR, str(exc))
    return cfg


def _write_resolved(cfg: cfgmod.RunConfig, directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / RESOLVED_CONFIG_NAME).write_text(
            cfgmod.format_config(cfg), encoding="utf-8"
        )
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, f"cannot write resolved config: {exc}")


def _load_manifest(cfg: cfgmod.RunConfig) -> synthbench.Manifest:
    try:
        return synthbench.load_manifest(Path(cfg.data_dir))
    except (OSError, synthbench.ManifestError) as exc:
        raise _CliError(EXIT_IO_ERROR, f"cannot load dataset manifest: {exc}")


def _load_checkpoint(cfg: cfgmod.RunConfig):
    if not cfg.checkpoint:
        raise _CliError(EXIT_CONFIG_ERROR, "no checkpoint given (set --checkpoint)")
    try:
        loaded = ckpt.load_raw(Path(cfg.checkpoint))
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, f"cannot read checkpoint: {exc}")
    except ckpt.CheckpointError as exc:
        raise _CliError(EXIT_IO_ERROR, f"invalid checkpoint: {exc}")
    try:
        model_cfg = mdl.parse_model_config_text(loaded.config_text)
        state, bank = ckpt.restore(loaded, model_cfg)
    except (ValueError, ckpt.CheckpointError) as exc:
        raise _CliError(EXIT_IO_ERROR, f"invalid checkpoint: {exc}")
    return state, bank


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if args.out is not None:
        cfg = cfgmod.replace_fields(cfg, {"data_dir": args.out})
    cfg = _validated(cfg)
    target = Path(cfg.data_dir)
    try:
        manifest = synthbench.generate_dataset(cfg.gen_config(), target)
    except synthbench.GenConfigError as exc:
        raise _CliError(EXIT_CONFIG_ERROR, str(exc))
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, str(exc))
    _write_resolved(cfg, target)
    print(f"dataset: {target}  rows: {len(manifest.rows)}  "
          f"fingerprint: {manifest.fingerprint[:16]}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.out is not None:
        cfg = cfgmod.replace_fields(cfg, {"out_dir": args.out})
    cfg = _validated(cfg)
    manifest = _load_manifest(cfg)
    out_dir = Path(cfg.out_dir)
    _write_resolved(cfg, out_dir)
    try:
        result = trainer.train(manifest, cfg.train_config(), out_dir=out_dir)
    except trainer.TrainerError as exc:
        raise _CliError(EXIT_CONFIG_ERROR, str(exc))
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, str(exc))
    last = result.epoch_records[-1]
    print(f"trained {cfg.epochs} epochs  final stage {last['stage']}  "
          f"mean total {last['means']['total']:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _validated(_resolve_config(args))
    state, _ = _load_checkpoint(cfg)
    manifest = _load_manifest(cfg)
    directions = list(evalkit.DIRECTIONS) if args.direction == "both" else [args.direction]
    out_dir = Path(args.out) if args.out is not None else Path(cfg.out_dir)
    try:
        table = evalkit.test_feature_table(manifest, state)
        reports = {
            direction: evalkit.report_from_set(
                evalkit.protocol_from_table(manifest, table, direction)
            )
            for direction in directions
        }
    except evalkit.ProtocolError as exc:
        raise _CliError(EXIT_CONFIG_ERROR, str(exc))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for direction, report in reports.items():
            (out_dir / f"eval_{direction}.json").write_text(
                report.to_json(), encoding="utf-8"
            )
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, f"cannot write report: {exc}")
    for report in reports.values():
        sys.stdout.write(report.to_json())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    names = None
    if args.only is not None:
        names = [args.only]
    try:
        suite = checksuite.run_all(
            names, configs=args.configs, tol=args.tol, step=args.step,
            seed=int(args.seed) if args.seed is not None else 0,
        )
    except checksuite.CheckSuiteError as exc:
        raise _CliError(EXIT_CONFIG_ERROR, str(exc))
    print(suite.format_table())
    return EXIT_OK if suite.passed else EXIT_CHECK_FAILURE


def _cmd_dump_attention(args) -> int:
    cfg = _validated(_resolve_config(args))
    state, _ = _load_checkpoint(cfg)
    if not state.cfg.use_dbdl:
        raise _CliError(EXIT_CONFIG_ERROR,
                        "attention masks need the dual-branch model")
    try:
        pixels = pnm.read_ppm(Path(args.sample)).astype(np.float64) / 255.0
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, f"cannot read sample: {exc}")
    except pnm.PnmError as exc:
        raise _CliError(EXIT_IO_ERROR, f"invalid sample image: {exc}")
    batch = pixels.transpose(2, 0, 1)[None, :, :, :]
    import piareid.diffcore as dc

    _, _, masks = mdl.forward_embeddings(state, dc.constant(batch), training=False)
    out_dir = Path(args.out) if args.out is not None else Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, mask in (("m_c", masks.clothing), ("m_id", masks.identity)):
            grey = np.round(mask.data[0, 0] * 255.0).astype(np.uint8)
            pnm.write_pgm(out_dir / f"{name}.pgm", grey)
    except OSError as exc:
        raise _CliError(EXIT_IO_ERROR, f"cannot write masks: {exc}")
    print(f"wrote {out_dir / 'm_c.pgm'} and {out_dir / 'm_id.pgm'}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "dump-attention": _cmd_dump_attention,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
