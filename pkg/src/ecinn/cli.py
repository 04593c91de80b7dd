"""Command line for ecinn: gen, train, index, explain, eval.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.  Options may
also come from a flat ``key=value`` file given with ``--config``; explicit
flags win over the file, the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import datasets
from .counterfactuals import CONVENTIONS, build_index, explain_batch, load_index, save_index
from .errors import (
    ContractError,
    DivergedError,
    FormatError,
    MissingGroupError,
    NumericOverflowError,
    ParallelDirectionError,
)
from .evaluation import evaluate_run, metrics_csv
from .flow import FlowModel
from .gmm import LatentGMM
from .training import Adam, TrainConfig, TrainReport, train, trainable_parameters

log = logging.getLogger("ecinn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad input file or option value; maps to exit code 2."""


# -- config file -------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {text!r}")


def parse_milestones(text: str) -> list[tuple[int, float]]:
    """``"40:0.1,50:0.1"`` -> ``[(40, 0.1), (50, 0.1)]``."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        epoch, mult = part.split(":")
        out.append((int(epoch), float(mult)))
    return out


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# -- subcommands -------------------------------------------------------------------

def _split_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def cmd_gen(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_seed, test_seed = _split_seeds(args.seed)
    k = args.k if args.k is not None else (10 if args.kind == "fakemnist" else 2)
    if args.kind == "fakemnist":
        bg_train = bg_test = "synthetic-strokes"
        if args.background_idx:
            images = datasets.load_idx_images(args.background_idx, side=args.side)
            if len(images) < args.n + args.n_test:
                raise InputError(f"{args.background_idx} holds only {len(images)} images")
            bg_train, bg_test = images[:args.n], images[args.n:args.n + args.n_test]
        train_ds = datasets.gen_fakemnist(args.n, args.side, k, bg_train, train_seed, "train")
        test_ds = datasets.gen_fakemnist(args.n_test, args.side, k, bg_test, test_seed, "test")
    else:
        centers = None
        if args.centers:
            centers = np.array([[float(v) for v in c.split(":")] for c in args.centers.split(",")])
        train_ds = datasets.gen_blobs(args.n, k, args.dim, centers, args.sigma, train_seed, "train")
        test_ds = datasets.gen_blobs(args.n_test, k, args.dim, centers, args.sigma, test_seed, "test")
    datasets.save(train_ds, out_dir / "train.ecds")
    datasets.save(test_ds, out_dir / "test.ecds")
    log.info("wrote %s and %s", out_dir / "train.ecds", out_dir / "test.ecds")
    return EXIT_OK


def _load_dataset(path) -> datasets.Dataset:
    if not Path(path).is_file():
        raise InputError(f"dataset file not found: {path}")
    return datasets.load(path)


def _load_checkpoint(path) -> ckpt.Checkpoint:
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    c = ckpt.load(path)
    if c.gmm is None:
        raise InputError(f"checkpoint {path} has no GMM block")
    return c


def cmd_train(args) -> int:
    train_ds = _load_dataset(args.train)
    test_ds = _load_dataset(args.test) if args.test else None
    if args.resume:
        state = _load_checkpoint(args.resume)
        model, gmm, start = state.model, state.gmm, state.epoch
        if model.dim != train_ds.dim:
            raise InputError("resumed checkpoint does not match the dataset dimension")
    else:
        model = FlowModel.build(train_ds.dim, args.blocks, args.hidden, args.clamp, seed=args.seed,
                                geometry=train_ds.geometry)
        gmm = LatentGMM.init_onehot(train_ds.num_classes, train_ds.dim)
        start = 0
    milestones = parse_milestones(args.milestones) if args.milestones else None
    config = TrainConfig(beta=args.beta, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                         noise_sigma=args.noise_sigma, rng_seed=args.seed, milestones=milestones)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else out.with_suffix(".csv")
    done = TrainReport()

    def on_epoch(rec):
        done.records.append(rec)
        done.write_csv(report_path)
        if args.checkpoint_every and (rec.epoch + 1) % args.checkpoint_every == 0:
            ckpt.save(out, model, gmm, rec.epoch + 1)

    opt = Adam(trainable_parameters(model, gmm))
    try:
        report = train(model, gmm, train_ds, config, held_out=test_ds, start_epoch=start,
                       on_epoch=on_epoch, optimizer=opt)
    except DivergedError as exc:
        (exc.report or done).write_csv(report_path)
        last = done.records[-1].epoch if done.records else None
        print(f"error: {exc}; last good epoch: {last}", file=sys.stderr)
        return EXIT_NUMERIC
    report.write_csv(report_path)
    ckpt.save(out, model, gmm, start + len(report.records))
    log.info("wrote checkpoint %s and report %s", out, report_path)
    return EXIT_OK


def cmd_index(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    data = _load_dataset(args.data)
    fp = ckpt.fingerprint(Path(args.checkpoint).read_bytes(), Path(args.data).read_bytes())
    index = build_index(state.model, state.gmm, data, fingerprint=fp)
    save_index(index, args.out)
    log.info("wrote index %s (group sizes %s)", args.out, index.group_sizes.tolist())
    return EXIT_OK


def _load_index_file(path):
    if not Path(path).is_file():
        raise InputError(f"index file not found: {path}")
    return load_index(path)


def cmd_explain(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    index = _load_index_file(args.index)
    data = _load_dataset(args.data)
    model, gmm = state.model, state.gmm
    ids = _int_list(args.ids)
    if not ids or min(ids) < 0 or max(ids) >= data.n:
        raise InputError(f"ids must be in [0, {data.n})")
    if not args.all_targets and args.target is None:
        raise InputError("give --target or --all-targets")
    if args.target is not None and not 0 <= args.target < gmm.k:
        raise InputError(f"target must be in [0, {gmm.k})")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geom = data.geometry
    exportable = geom[2] in (1, 3)

    ext = "pgm" if geom[2] == 1 else "ppm"
    for i in ids:
        x = data.samples[i].astype(np.float64)
        targets = list(range(gmm.k)) if args.all_targets else [args.target]
        results = explain_batch(model, gmm, index, np.tile(x, (len(targets), 1)), targets, args.convention)
        p = results[0].p
        if args.all_targets:
            results = [r for r in results if r.q != p]
        stem = f"input{i}"
        entries = []
        rows = [x]
        if exportable:
            datasets.export_image(x, geom, out_dir / f"{stem}.{ext}")
        for r in results:
            files = {}
            if exportable:
                for name, vec, signed in (("cf0", r.x_hat0, False), ("cf1", r.x_hat1, False),
                                          ("heat0", r.heat0, True), ("heat1", r.heat1, True)):
                    fname = f"{stem}_q{r.q}_{name}.{ext}"
                    datasets.export_image(vec, geom, out_dir / fname, signed=signed)
                    files[name] = fname
            entries.append(r.to_record(images=files))
            rows.extend([r.x_hat0, r.x_hat1, r.heat0, r.heat1])
        tensors = datasets.Dataset(np.array(rows), np.zeros(len(rows), dtype=np.int64), geom, 1, "other")
        datasets.save(tensors, out_dir / f"{stem}_tensors.ecds")
        record = {
            "id": i,
            "label": int(data.labels[i]),
            "predicted": p,
            "convention": args.convention,
            "input_image": f"{stem}.{ext}" if exportable else None,
            "tensors": f"{stem}_tensors.ecds",
            "tensor_rows": "input, then per target: x_hat0, x_hat1, heat0, heat1",
            "targets": entries,
        }
        (out_dir / f"{stem}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    log.info("wrote explanations for %d inputs to %s", len(ids), out_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    index = _load_index_file(args.index)
    data = _load_dataset(args.data)
    if data.n == 0:
        raise InputError("test split is empty")
    metrics = evaluate_run(state.model, state.gmm, index, data, args.n_explain, args.seed, args.convention)
    text = metrics_csv(metrics)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

BOOL_KEYS = {"all_targets"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecinn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value file with defaults for this command")
        return p

    g = add("gen", "generate train/test datasets")
    g.add_argument("--kind", choices=("fakemnist", "blobs"), default="fakemnist")
    g.add_argument("--n", type=int, default=12000, help="training samples")
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--side", type=int, default=14)
    g.add_argument("--k", type=int, help="class count (default 10 for fakemnist, 2 for blobs)")
    g.add_argument("--dim", type=int, default=2, help="blob dimension")
    g.add_argument("--sigma", type=float, default=0.5, help="blob standard deviation")
    g.add_argument("--centers", help="blob centers as x:y,x:y,... (use --centers=... when the first value is negative)")
    g.add_argument("--background-idx", help="IDX3 image file used as FakeMNIST backgrounds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default=".")
    g.set_defaults(func=cmd_gen)

    t = add("train", "train a flow classifier")
    t.add_argument("--train", required=True)
    t.add_argument("--test")
    t.add_argument("--out", default="model.ecnn")
    t.add_argument("--report", help="CSV report path (default: checkpoint path with .csv)")
    t.add_argument("--blocks", type=int, default=8)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--clamp", type=float, default=2.0)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--noise-sigma", type=float, default=1.0 / 256)
    t.add_argument("--milestones", help="epoch:multiplier,... (default x0.1 at 80%% of epochs)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    x = add("index", "build the empirical class-mean index")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True, help="split to group (normally the training split)")
    x.add_argument("--out", default="index.ecix")
    x.set_defaults(func=cmd_index)

    e = add("explain", "write counterfactuals and heatmaps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--index", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ids", default="0", help="comma-separated sample ids")
    e.add_argument("--target", type=int)
    e.add_argument("--all-targets", action="store_true")
    e.add_argument("--convention", choices=CONVENTIONS, default="mixed")
    e.add_argument("--out-dir", default="explain")
    e.set_defaults(func=cmd_explain)

    v = add("eval", "aggregate test and counterfactual metrics")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--index", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--n-explain", type=int, default=200)
    v.add_argument("--convention", choices=CONVENTIONS, default="mixed")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="metrics CSV path")
    v.set_defaults(func=cmd_eval)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    cfg = _config_path(argv)
    if cfg is not None:
        choices = parser._subparsers._group_actions[0].choices
        command = next((tok for tok in argv if tok in choices), None)
        if command is None:
            parser.error("--config must follow a subcommand")
        sub = choices[command]
        try:
            values = read_config_file(cfg)
        except (OSError, InputError) as exc:
            sub.error(str(exc))
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions) - {"config"})
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, val in values.items():
            try:
                defaults[key] = _parse_bool(val) if key in BOOL_KEYS else val
            except InputError as exc:
                sub.error(str(exc))
            # argparse does not check choices on string defaults
            if actions[key].choices is not None and val not in actions[key].choices:
                sub.error(f"config key {key}: invalid choice {val!r}")
            actions[key].required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _thread_limit():
    raw = os.environ.get("ECINN_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    limiter = _thread_limit()
    try:
        return args.func(args)
    except (InputError, FormatError, ContractError, MissingGroupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergedError, NumericOverflowError, ParallelDirectionError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
