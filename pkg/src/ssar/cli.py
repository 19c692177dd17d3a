"""Command-line entry point: ``ssar generate-synth | train | eval | predict | gradcheck``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import NonFiniteError, no_grad
from .config import RunConfig
from .data import DataError, PipelineConfig, generate_corpus, prepare_sequence, read_manifest, read_volume
from .gradcheck import run_suite, summarize
from .metrics import evaluate, format_group_table, parse_bins, write_cs_csv, write_group_csv
from .models import ArchitectureMismatchError, WeightFormatError, load_weights
from .training import ConfigError, SampleCache, make_model, model_input, predict_rows, thread_limit, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_BINS = "0-1,1-2,2-3,3-4,4-5,5-6"

log = logging.getLogger("ssar")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be X,Y,Z")
    return parts


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def pipeline_extras(p: PipelineConfig) -> dict[str, str]:
    return {
        "pipeline.axis": str(p.axis),
        "pipeline.target_hw": ",".join(map(str, p.target_hw)),
        "pipeline.n_slices": str(p.n_slices),
        "pipeline.normalize_by": p.normalize_by,
    }


def pipeline_from_descriptor(desc: dict[str, str]) -> PipelineConfig:
    try:
        return PipelineConfig(
            axis=int(desc["pipeline.axis"]),
            target_hw=tuple(int(v) for v in desc["pipeline.target_hw"].split(",")),
            n_slices=int(desc["pipeline.n_slices"]),
            normalize_by=desc["pipeline.normalize_by"],
        )
    except KeyError as exc:
        raise ConfigError(f"weight file lacks preprocessing settings ({exc.args[0]})") from exc


# commands ---------------------------------------------------------------------------


def cmd_generate_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty (use --force)")
    manifest = generate_corpus(out, args.count, args.age_max, args.dims, args.noise, args.seed, args.train_frac)
    print(f"wrote {len(manifest)} volumes and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = dict(args.set or [])
    if args.manifest:
        overrides["data.manifest"] = args.manifest
    if args.seed is not None:
        overrides["train.seed"] = overrides["model.seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    cfg = RunConfig.load(args.config, overrides)
    if cfg.manifest_path is None:
        raise ConfigError("no manifest given (data.manifest or --manifest)")
    manifest = read_manifest(cfg.manifest_path)
    pipeline = cfg.pipeline()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = {"command": "train", "model": args.model, "config": cfg.resolved()}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    with thread_limit(cfg.threads):
        model = make_model(args.model, pipeline, **cfg.model_kwargs(args.model))
        result = train(model, manifest, cfg.train_config(), pipeline, out, pipeline_extras(pipeline))
    last = result.log[-1]
    print(
        f"trained {args.model} for {len(result.log)} epochs: final train MAE {last['train_mae']:.4f}, "
        f"best test MAE {result.best_test_mae:.4f} (epoch {result.best_epoch})"
    )
    return EXIT_OK


def _model_name(desc: dict[str, str], path: Path, taken: set[str]) -> str:
    name = desc.get("model", path.stem)
    if name in taken:
        name = f"{name}:{path.stem}"
    taken.add(name)
    return name


def cmd_eval(args) -> int:
    manifest = read_manifest(args.manifest)
    rows = manifest.rows if args.split == "all" else manifest.split(args.split)
    if not rows:
        raise DataError(f"manifest {args.manifest} has no rows in split {args.split!r}")
    try:
        bins = parse_bins(args.bins)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    y = [r.age_years for r in rows]
    reports, taken = [], set()
    with thread_limit(args.threads):
        for wpath in map(Path, args.weights):
            net = load_weights(wpath)
            name = _model_name(net.metadata, wpath, taken)
            cache = SampleCache(manifest, pipeline_from_descriptor(net.metadata), net.kind)
            yhat = predict_rows(net, cache, rows)
            report = evaluate(y, yhat, bins, model=name, alpha_max=args.alpha_max, step=args.alpha_step)
            reports.append(report)
            tag = name.replace(":", "_")
            (out / f"report_{tag}.json").write_text(report.to_json() + "\n")
            write_cs_csv(report, out / f"cs_{tag}.csv")
            with (out / f"predictions_{tag}.csv").open("w") as fh:
                fh.write("subject_id,predicted_age_years\n")
                fh.writelines(f"{r.subject_id},{p!r}\n" for r, p in zip(rows, yhat.tolist()))
    write_group_csv(reports, out / "group_table.csv")
    print(format_group_table(reports))
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_weights(args.weights)
    pipeline = pipeline_from_descriptor(net.metadata)
    volume = read_volume(args.volume)
    x = model_input(prepare_sequence(volume, pipeline), net.kind)
    with thread_limit(args.threads), no_grad():
        pred = net(x).item()
    print("subject_id,predicted_age_years")
    print(f"{volume.subject_id},{float(pred)!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = ("op", "layer", "model") if args.scope == "all" else (args.scope,)
    ok = True
    print(f"{'case':<16} {'n':>3} {'max_rel_err':>12}  result")
    for scope in scopes:
        results = run_suite(scope, args.instances, args.seed, args.inject_fault)
        for name, n, err, passed in summarize(results):
            ok &= passed
            print(f"{name:<16} {n:>3} {err:>12.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# wiring -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssar", description="Slice-sequence brain-age regression toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-synth", help="write a synthetic phantom corpus and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--age-max", type=float, default=6.0)
    g.add_argument("--dims", type=_dims, default=(16, 16, 12))
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-frac", type=float, default=0.8)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_synth)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config")
    t.add_argument("--model", choices=("sliceseq", "vol3d"), default="sliceseq")
    t.add_argument("--out", required=True)
    t.add_argument("--manifest", help="overrides data.manifest")
    t.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MAE / CS / age-group tables for one or more weight files")
    e.add_argument("--weights", action="append", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--bins", default=DEFAULT_BINS)
    e.add_argument("--alpha-max", type=float, default=2.0)
    e.add_argument("--alpha-step", type=float, default=0.1)
    e.add_argument("--out", default=".")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict the age of one volume")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--volume", required=True)
    pr.add_argument("--threads", type=int, default=1)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--scope", choices=("op", "layer", "model", "all"), default="all")
    gc.add_argument("--instances", type=int, default=5)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-fault", metavar="CASE", help="corrupt the analytic gradient of CASE (self-test)")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ArchitectureMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WeightFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
