"""Command-line front end: gen, train, infer, screen, eval, roc.

Every command writes under a run directory and records what it produced in
``artifacts.json`` (relative path -> sha256).  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend
from .cascade import SCALES, CascadeConfig
from .metrics import NORMAL_TRAIN_FRACTION, SplitPlan, evaluate, make_splits, write_roc_csv
from .nn.network import NetworkConfig, WeightFileError, load_weights, save_weights
from .phantom import PhantomSpec, generate_dataset
from .postprocess import load_results, save_results
from .screening import ScreenConfig, screen_case
from .training import DESK_BATCH, PAPER_BATCH, TrainConfig, load_training_cases, train_scale, write_trace
from .volume import VolumeFormatError, load_manifest, load_volume, save_volume

log = logging.getLogger("s4c")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    "workers": 1,
    "phantom": {"dims": [96, 96, 96], "tumor_volume_range": [100, 4000]},
    "splits": {"folds": 4, "normal_train_fraction": NORMAL_TRAIN_FRACTION},
    "train": {
        "iters": 2000,
        "scales": [64, 32, 16],
        "batch": {str(k): v for k, v in DESK_BATCH.items()},
        "base_channels": 4,
        "base_lr": 0.1,
        "warm_start": True,
        "lr_power": 0.9,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "log_every": 100,
    },
    "cascade": {"strides": {"64": 20, "32": 10, "16": 5}, "roi_margin": 32, "fusion_weights": [1.0, 1.0, 1.0]},
    "screen": {"K": 50, "component_ratio": 0.2, "confidence_weight": 0.5, "confidence_saturation": 1500},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def run_config(args):
    """Defaults, then the ``--config`` JSON file, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        cfg = _merge(cfg, json.loads(path.read_text()))
    flags = {
        "seed": ("seed",), "deterministic": ("deterministic",), "workers": ("workers",),
        "dims": ("phantom", "dims"), "tumor_range": ("phantom", "tumor_volume_range"),
        "folds": ("splits", "folds"), "normal_train_fraction": ("splits", "normal_train_fraction"),
        "iters": ("train", "iters"), "scales": ("train", "scales"), "base_channels": ("train", "base_channels"),
        "base_lr": ("train", "base_lr"), "warm_start": ("train", "warm_start"),
        "log_every": ("train", "log_every"), "K": ("screen", "K"),
    }
    for attr, keys in flags.items():
        v = getattr(args, attr, None)
        if v is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = v
    if getattr(args, "paper_batches", False):
        cfg["train"]["batch"] = {str(k): v for k, v in PAPER_BATCH.items()}
    if getattr(args, "strides", None):
        cfg["cascade"]["strides"] = dict(zip(("64", "32", "16"), args.strides))
    return cfg


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def record_artifacts(run_dir, paths):
    run_dir = Path(run_dir)
    index = run_dir / "artifacts.json"
    table = json.loads(index.read_text()) if index.exists() else {}
    for p in paths:
        table[str(Path(p).relative_to(run_dir))] = _sha256(p)
    index.write_text(json.dumps(dict(sorted(table.items())), indent=1))


def _ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write-test"
    probe.write_bytes(b"")
    probe.unlink()
    return path


def _scale_seed(seed, scale):
    return int(np.random.SeedSequence([int(seed), int(scale)]).generate_state(1)[0])


def _manifest(data):
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    return load_manifest(path)


def _splits(cfg, entries, run_dir):
    path = Path(run_dir) / "splits.json"
    if path.exists():
        return SplitPlan.load(path)
    plan = make_splits(entries, cfg["splits"]["folds"], cfg["splits"]["normal_train_fraction"], cfg["seed"])
    plan.save(path)
    record_artifacts(run_dir, [path])
    return plan


def cmd_gen(args):
    cfg = run_config(args)
    out = _ensure_dir(args.out)
    spec = PhantomSpec(dims=tuple(cfg["phantom"]["dims"]), tumor_volume_range=tuple(cfg["phantom"]["tumor_volume_range"]))
    entries = generate_dataset(cfg["seed"], args.normal, args.abnormal, spec, out)
    n_ab = sum(e["label"] for e in entries)
    print(f"{out / 'manifest.json'}: {len(entries) - n_ab} normal, {n_ab} abnormal")
    return EXIT_OK


def _net_path(run_dir, scale):
    return Path(run_dir) / f"net{scale}.w"


def cmd_train(args):
    cfg = run_config(args)
    run = _ensure_dir(args.run)
    entries = _manifest(args.data)
    plan = _splits(cfg, entries, run)
    train_ids = set(plan.train_ids(args.fold))
    cases = load_training_cases([e for e in entries if e["id"] in train_ids])
    tc = cfg["train"]
    produced = []
    scales = sorted(int(s) for s in tc["scales"])
    for scale in scales:
        if scale not in SCALES:
            raise UsageError(f"unknown scale {scale}; choose from {SCALES}")
        t0 = time.perf_counter()
        tcfg = TrainConfig(
            scale=scale, total_iters=int(tc["iters"]), batch_size=int(tc["batch"][str(scale)]),
            base_lr=tc["base_lr"], lr_power=tc["lr_power"], momentum=tc["momentum"],
            weight_decay=tc["weight_decay"], log_every=int(tc["log_every"]), seed=_scale_seed(cfg["seed"], scale),
        )
        ncfg = NetworkConfig.for_scale(scale, base_channels=int(tc["base_channels"]))
        init = _warm_source(run, scale, ncfg) if tc.get("warm_start") else None
        try:
            result = train_scale(cases, tcfg, ncfg, init=init)
        except FloatingPointError as exc:
            raise FloatingPointError(f"scale {scale}: {exc}") from exc
        except (ValueError, RuntimeError) as exc:
            raise type(exc)(f"scale {scale}: {exc}") from exc
        w = save_weights(result.net, _net_path(run, scale))
        trace = run / f"trace{scale}.csv"
        write_trace(result.trace, trace)
        produced += [w, trace]
        tail = np.mean([r["loss"] for r in result.trace[-50:]])
        print(f"scale {scale}: {tcfg.total_iters} iters, final mean loss {tail:.4f}, {time.perf_counter() - t0:.1f}s -> {w}")
    (run / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    record_artifacts(run, produced + [run / "config.json"])
    return EXIT_OK


def _warm_source(run, scale, ncfg):
    """Weights of the next smaller trained scale in ``run`` when their channel layout matches."""
    for smaller in sorted((s for s in SCALES if s < scale), reverse=True):
        path = _net_path(run, smaller)
        if path.exists():
            net = load_weights(path)
            if (net.config.base_channels, net.config.levels) == (ncfg.base_channels, ncfg.levels):
                return net
            return None
    return None


def _screen_config(cfg, single_scale=None):
    c = cfg["cascade"]
    kw = dict(strides={int(k): int(v) for k, v in c["strides"].items()}, roi_margin=int(c["roi_margin"]),
              workers=1, deterministic=bool(cfg["deterministic"]))
    cascade = CascadeConfig.single_scale(single_scale, **kw) if single_scale else CascadeConfig(fusion_weights=c["fusion_weights"], **kw)
    s = cfg["screen"]
    return ScreenConfig(K=int(s["K"]), component_ratio=float(s["component_ratio"]),
                        confidence_weight=float(s["confidence_weight"]),
                        confidence_saturation=float(s["confidence_saturation"]), cascade=cascade)


def _load_nets(run_dir, config):
    needed = [64] + [s for s, w in zip(SCALES[1:], config.cascade.fusion_weights[1:]) if w > 0]
    nets = {}
    for s in needed:
        path = _net_path(run_dir, s)
        if not path.exists():
            raise FileNotFoundError(f"weights {path} not found; train the {s}^3 scale first")
        nets[s] = load_weights(path, expect=s).eval()
    return nets


def _signature(run_dir, config):
    """Identifies everything that feeds inference, so cached masks are only reused when valid."""
    c = config.cascade
    parts = {
        "weights": {s: _sha256(_net_path(run_dir, s)) for s in SCALES if _net_path(run_dir, s).exists()},
        "strides": c.strides, "roi_margin": c.roi_margin, "fusion": c.fusion_weights,
        "ratio": config.component_ratio, "confidence": [config.confidence_weight, config.confidence_saturation],
    }
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def _screen_dir(run_dir, single_scale, fold):
    tag = f"single{single_scale}" if single_scale else "cascade"
    return Path(run_dir) / f"screen-{tag}-fold{fold}"


def cmd_screen(args):
    cfg = run_config(args)
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    entries = _manifest(args.data)
    plan = _splits(cfg, entries, run)
    test_ids = plan.test_ids(args.fold)
    by_id = {e["id"]: e for e in entries}
    test = [by_id[i] for i in sorted(test_ids)]
    config = _screen_config(cfg, args.single_scale)
    out = _ensure_dir(_screen_dir(run, args.single_scale, args.fold))
    sig = _signature(run, config)
    cache = out / "cache.json"
    results_path = out / "results.json"
    cached = {}
    if cache.exists() and results_path.exists() and json.loads(cache.read_text()).get("signature") == sig:
        cached = {r.case_id: r for r in load_results(results_path)}
    todo = [e for e in test if e["id"] not in cached]
    produced = []
    if todo:
        nets = _load_nets(run, config)
        (out / "masks").mkdir(exist_ok=True)

        def one(e):
            gt = load_volume(e["mask"]) if e.get("mask") else None
            try:
                co = screen_case(nets, e["id"], load_volume(e["image"]), gt, config)
            except Exception as exc:
                raise type(exc)(f"case {e['id']}: {exc}") from exc
            path = save_volume(co.mask, out / "masks" / f"{e['id']}.s4cvol")
            log.info("%s: %d tumor voxels, confidence %.3f, %s", e["id"], co.result.tumor_voxel_count,
                     co.result.confidence, co.cascade.info()["seconds"])
            return co.result, path, co.cascade.info()

        workers = 1 if cfg["deterministic"] else max(1, int(cfg["workers"]))
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                done = list(pool.map(one, todo))
        else:
            done = [one(e) for e in todo]
        timing = {}
        for (r, path, info), e in zip(done, todo):
            cached[e["id"]] = r
            produced.append(path)
            timing[e["id"]] = info
        (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True))
        produced.append(out / "timing.json")
    results = [cached[e["id"]].with_K(config.K) for e in test]
    save_results(results, results_path)
    cache.write_text(json.dumps({"signature": sig}))
    report = evaluate(test, results, config.K)
    report.save(out / f"eval_K{config.K}.json")
    write_roc_csv(report.roc, out / "roc.csv")
    produced += [results_path, cache, out / f"eval_K{config.K}.json", out / "roc.csv"]
    record_artifacts(run, produced)
    print(f"{len(results)} cases ({len(todo)} inferred, {len(test) - len(todo)} from cache) -> {out}")
    print(report.summary())
    return EXIT_OK


def cmd_infer(args):
    cfg = run_config(args)
    config = _screen_config(cfg, args.single_scale)
    nets = _load_nets(args.run, config)
    out = _ensure_dir(args.out)
    gt = load_volume(args.mask) if args.mask else None
    case_id = Path(args.image).name.split(".")[0]
    co = screen_case(nets, case_id, load_volume(args.image), gt, config)
    save_volume(co.mask, out / f"{case_id}.labels.s4cvol")
    save_volume(co.cascade.prob, out / f"{case_id}.prob.s4cvol")
    (out / f"{case_id}.result.json").write_text(co.result.to_json())
    (out / f"{case_id}.info.json").write_text(json.dumps(co.cascade.info(), indent=1))
    print(co.result.to_json())
    return EXIT_OK


def _results_dir(args):
    return _screen_dir(args.run, args.single_scale, args.fold)


def cmd_eval(args):
    cfg = run_config(args)
    d = _results_dir(args)
    path = d / "results.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run screen first")
    results = load_results(path)
    ids = {r.case_id for r in results}
    entries = [e for e in _manifest(args.data) if e["id"] in ids]
    K = int(cfg["screen"]["K"])
    report = evaluate(entries, results, K)
    out = report.save(d / f"eval_K{K}.json")
    record_artifacts(args.run, [out])
    print(report.summary())
    return EXIT_OK


def cmd_roc(args):
    d = _results_dir(args)
    path = d / "results.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run screen first")
    results = load_results(path)
    ids = {r.case_id for r in results}
    entries = [e for e in _manifest(args.data) if e["id"] in ids]
    report = evaluate(entries, results)
    out = write_roc_csv(report.roc, d / "roc.csv")
    record_artifacts(args.run, [out])
    print(f"{len(report.roc)} operating points, AUC {report.auc:.4f} -> {out}")
    return EXIT_OK


def build_parser():
    d = DEFAULTS
    p = _Parser(prog="s4c", description="Pancreatic tumor screening by multi-scale segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({backend()} kernels)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration; flags override its values")
        sp.add_argument("--seed", type=int, help=f"master seed (default: {d['seed']})")
        sp.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded, bit-reproducible execution (default: off)")

    def fold_opts(sp):
        sp.add_argument("--fold", type=int, default=0, help="cross-validation fold (default: 0)")
        sp.add_argument("--folds", type=int, help=f"number of folds (default: {d['splits']['folds']})")
        sp.add_argument("--normal-train-fraction", type=float,
                        help=f"share of normal cases used for training, floored (default: {d['splits']['normal_train_fraction']:.4f})")

    def screen_opts(sp):
        sp.add_argument("--K", type=int, help=f"minimum tumor voxels for an abnormal call (default: {d['screen']['K']})")
        sp.add_argument("--single-scale", type=int, choices=SCALES,
                        help="use one network inside the ROI instead of the fused cascade (default: cascade)")
        sp.add_argument("--strides", type=int, nargs=3, metavar=("S64", "S32", "S16"),
                        help="window strides per scale (default: 20 10 5)")

    g = sub.add_parser("gen", help="generate a phantom dataset")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--normal", type=int, default=30, help="number of normal cases (default: 30)")
    g.add_argument("--abnormal", type=int, default=80, help="number of abnormal cases (default: 80)")
    g.add_argument("--dims", type=int, nargs=3, metavar=("W", "H", "L"), help="volume dims (default: 96 96 96)")
    g.add_argument("--tumor-range", type=int, nargs=2, metavar=("MIN", "MAX"),
                   help="tumor size range in voxels (default: 100 4000)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the per-scale networks on one fold")
    common(t)
    fold_opts(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--run", required=True, help="run directory for weights and traces")
    t.add_argument("--iters", type=int, help=f"iterations per scale (default: {d['train']['iters']})")
    t.add_argument("--scales", type=int, nargs="+", choices=SCALES, help="scales to train (default: 64 32 16)")
    t.add_argument("--base-channels", type=int, help=f"channels at full resolution (default: {d['train']['base_channels']})")
    t.add_argument("--base-lr", type=float, help=f"initial learning rate of the poly schedule (default: {d['train']['base_lr']})")
    t.add_argument("--no-warm-start", dest="warm_start", action="store_false", default=None,
                   help="initialize every scale randomly instead of from the next smaller trained scale")
    t.add_argument("--paper-batches", action="store_true", help="batch sizes 16/32/128 instead of 1/2/8")
    t.add_argument("--log-every", type=int, help=f"loss logging interval (default: {d['train']['log_every']})")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment and classify a single volume")
    common(i)
    screen_opts(i)
    i.add_argument("--run", required=True, help="run directory holding trained weights")
    i.add_argument("--image", required=True, help="CT volume (.s4cvol)")
    i.add_argument("--mask", help="optional ground-truth mask for DSC")
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("screen", help="screen a fold's test cohort and evaluate it")
    common(s)
    fold_opts(s)
    screen_opts(s)
    s.add_argument("--data", required=True, help="dataset directory or manifest.json")
    s.add_argument("--run", required=True, help="run directory holding trained weights")
    s.add_argument("--workers", type=int, help=f"concurrent cases; ignored with --deterministic (default: {d['workers']})")
    s.set_defaults(func=cmd_screen)

    for name, func, text in (("eval", cmd_eval, "recompute the report from saved results"),
                             ("roc", cmd_roc, "write the ROC curve from saved results")):
        e = sub.add_parser(name, help=text)
        common(e)
        e.add_argument("--data", required=True, help="dataset directory or manifest.json")
        e.add_argument("--run", required=True, help="run directory")
        e.add_argument("--fold", type=int, default=0, help="cross-validation fold (default: 0)")
        e.add_argument("--single-scale", type=int, choices=SCALES, help="read a single-scale run (default: cascade)")
        if name == "eval":
            e.add_argument("--K", type=int, help=f"minimum tumor voxels for an abnormal call (default: {d['screen']['K']})")
        e.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"s4c {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"s4c {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, RuntimeError, KeyError, VolumeFormatError, WeightFileError) as exc:
        print(f"s4c {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
