"""``deepcue`` command line: ``synth``, ``train`` and ``eval`` subcommands.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericalError, ValidationError
from .synthgen import generate

logger = logging.getLogger("deepcue")

EXIT_CODES = ((ConfigError, 2), (DataError, 3), (NumericalError, 4))


def _out_dir(cfg: pipeline.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


def _effective_config(cfg: pipeline.RunConfig) -> str:
    return json.dumps(cfg.as_dict(), sort_keys=True, indent=1)


def cmd_synth(cfg: pipeline.RunConfig, args) -> int:
    data = generate(cfg.synth, cfg.data_dir, cfg.dsp)
    _write(Path(cfg.data_dir) / "synth_config.json", json.dumps(cfg.synth.as_dict(), sort_keys=True, indent=1))
    print(f"wrote {int(data.positives.sum())} interactions, {cfg.synth.num_items} clips to {cfg.data_dir}")
    return 0


def cmd_train(cfg: pipeline.RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = pipeline.load_dataset(cfg)
    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        print(line, flush=True)

    ckpt = pipeline.train_system(cfg, ds, args.system, log=log)
    path = Path(args.checkpoint) if args.checkpoint else out / f"{args.system}.ckpt"
    try:
        save_checkpoint(path, ckpt)
    except OSError as exc:
        raise ConfigError(f"cannot write checkpoint {path}: {exc}") from None
    _write(out / f"{args.system}.log.tsv", "".join(line + "\n" for line in lines))
    _write(out / f"{args.system}.config.json", _effective_config(cfg))
    print(f"checkpoint: {path}", file=sys.stderr)
    return 0


def cmd_eval(cfg: pipeline.RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = pipeline.load_dataset(cfg)
    reports = {}
    if args.oracle:
        if args.task != "rec":
            raise ConfigError("--oracle applies to the rec task only")
        reports["oracle"] = pipeline.oracle_report(cfg, ds)
        name = "oracle"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        try:
            ckpt = load_checkpoint(args.checkpoint)
        except FileNotFoundError:
            raise DataError(f"checkpoint {args.checkpoint} not found") from None
        name = ckpt.model_kind
        if args.task == "rec":
            reports[name] = pipeline.rec_report(ckpt, cfg, ds)
        elif args.task == "tags":
            if ckpt.model_kind == "cue-index":
                raise ValidationError("the index model has no features for unseen items; tags need cue, regression or wmf")
            reports[name] = pipeline.tags_report(ckpt, cfg, ds)
    if args.task == "rec":
        reports["popularity"] = pipeline.popularity_report(cfg, ds)
    path = out / f"report_{args.task}_{name}.json"
    body = {k: json.loads(r.to_json()) for k, r in reports.items()}
    body["config"] = cfg.as_dict()
    _write(path, json.dumps(body, sort_keys=True, indent=1) + "\n")
    for k, r in reports.items():
        print(f"{k}\t{r.mean_auc:.4f}\t(n={r.n_evaluated}, skipped={r.n_skipped})")
    print(f"report: {path}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepcue", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. cue.max_epochs=5 (repeatable)")
        sp.add_argument("--deterministic", action="store_true", help="disable internal parallelism")

    s = sub.add_parser("synth", help="generate a synthetic dataset into data_dir")
    common(s)
    t = sub.add_parser("train", help="train one system and write a checkpoint")
    common(t)
    t.add_argument("--system", required=True, choices=pipeline.SYSTEMS)
    t.add_argument("--checkpoint", help="output path (default: <out_dir>/<system>.ckpt)")
    e = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--task", choices=("rec", "tags"), default="rec")
    e.add_argument("--oracle", action="store_true", help="debug: score with synthetic ground-truth factors")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    commands = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval}
    try:
        cfg = pipeline.load_config(args.config, args.overrides).resolved(args.deterministic)
        return commands[args.command](cfg, args)
    except tuple(cls for cls, _ in EXIT_CODES) as exc:
        code = next(c for cls, c in EXIT_CODES if isinstance(exc, cls))
        print(f"deepcue: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
