"""Command-line entry point: ``bbdistill <subcommand> ...`` or ``python3 -m bbdistill``."""
import argparse
import json
import logging
import os
import signal
import sys
import threading

from ..domain import DomainSpec, load_dataset, make_dataset, save_dataset
from ..pseudolabel import ClassThresholds
from .. import teacher as teacher_api
from ..eval import metrics_csv
from .ablation import run_ablation
from .cache import TeacherCache
from .checkpoint import load_checkpoint
from .config import VARIANTS, ExperimentConfig, default_config
from .runner import TrainingAborted, build_datasets, calibrate, evaluate, run_experiment

log = logging.getLogger("bbdistill")


def _load_config(path, seed=None):
    return ExperimentConfig.load(path) if path else default_config(seed or 1)


def cmd_gen_data(args):
    config = _load_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    train, test = build_datasets(config)
    d = config.domain
    source = make_dataset(d.source, "source", d.n_source, d.height, d.width)
    for name, ds in (("target-train", train), ("target-test", test), ("source", source)):
        save_dataset(os.path.join(args.out, f"{name}.bin"), ds)
    with open(os.path.join(args.out, "source_spec.json"), "w") as f:
        f.write(d.source.to_json() + "\n")
    print(f"wrote {len(train)}/{len(test)}/{len(source)} samples and source_spec.json to {args.out}")


def cmd_serve_teacher(args):
    with open(args.spec) as f:
        spec = DomainSpec.from_dict(json.load(f))
    server = teacher_api.serve_teacher(spec, args.port, args.host)
    print(f"teacher listening on {server.host}:{server.port}", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    server.stop()


def cmd_calibrate(args):
    config = _load_config(args.config, args.seed)
    dataset = load_dataset(args.data) if args.data else build_datasets(config)[0]
    endpoint = teacher_api.connect(config.teacher, config.domain.source)
    try:
        th = calibrate(config, TeacherCache(endpoint, config.config_hash()), dataset, args.statistic)
    finally:
        endpoint.close()
    th.save(args.out)
    print(f"wrote {args.out}")


def cmd_train(args):
    config = _load_config(args.config, args.seed)
    if args.output_dir:
        config = config.with_variant(config.variant, output_dir=args.output_dir)
    thresholds = ClassThresholds.load(args.thresholds) if args.thresholds else None
    try:
        record = run_experiment(config, resume=args.resume, stop_after=args.stop_after, thresholds=thresholds)
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 3
    state = "completed" if record.completed else "stopped"
    print(f"{state} {config.variant} final mIoU {record.final_miou:.4f} -> {config.output_dir}")
    return 0


def cmd_ablate(args):
    config = _load_config(args.config, args.seed)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    table = run_ablation(config, variants, seeds, write_outputs=args.write_runs)
    print(table.render())
    if args.out:
        with open(args.out, "w") as f:
            f.write(table.to_csv())


def cmd_eval(args):
    header, params, _, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = evaluate(params, dataset)
    variant = header["extra"].get("variant", "unknown")
    text = metrics_csv([(header["step"], variant, report)], params.num_classes)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    sys.stdout.write(text)


def build_parser():
    p = argparse.ArgumentParser(prog="bbdistill", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults to the built-in benchmark)")
        sp.add_argument("--seed", type=int, help="seed for the built-in config when --config is absent")
        return sp

    g = with_config(sub.add_parser("gen-data", help="write dataset files and the source spec"))
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("serve-teacher", help="serve the source model over TCP")
    s.add_argument("--spec", required=True, help="source DomainSpec JSON")
    s.add_argument("--port", type=int, required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(func=cmd_serve_teacher)

    c = with_config(sub.add_parser("calibrate", help="compute per-class thresholds"))
    c.add_argument("--data", help="dataset file (defaults to the config's target-train split)")
    c.add_argument("--statistic", choices=["rc", "ac"], default=None)
    c.add_argument("--out", default="thresholds.json")
    c.set_defaults(func=cmd_calibrate)

    t = with_config(sub.add_parser("train", help="run one experiment"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="save a checkpoint and exit after this step")
    t.add_argument("--thresholds", help="reuse thresholds JSON instead of calibrating")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    a = with_config(sub.add_parser("ablate", help="compare variants under shared seeds"))
    a.add_argument("--variants", default=",".join(VARIANTS))
    a.add_argument("--seeds", help="comma-separated seeds (default: the config's seed)")
    a.add_argument("--out", help="write the table as CSV")
    a.add_argument("--write-runs", action="store_true", help="keep per-run outputs under output_dir")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
