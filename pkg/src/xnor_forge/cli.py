"""``xnor-forge`` command line.

Exit codes: 0 success, 1 validation or domain error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import __version__, engine, foldsim, hwsim, imgproc, modelio, netspec, verify
from .kernels import BACKEND

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class CliIOError(Exception):
    pass


def _crc_file(path) -> str:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return f"{crc:08x}"


def _crc_tree(path: Path) -> str:
    crc = 0
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        crc = zlib.crc32(str(f.relative_to(path)).encode(), crc)
        crc = zlib.crc32(f.read_bytes(), crc)
    return f"{crc:08x}"


def manifest(command: str, config: dict, inputs: dict, seed=None) -> dict:
    digests = {}
    for label, path in inputs.items():
        if path is None:
            continue
        p = Path(path)
        digests[label] = _crc_tree(p) if p.is_dir() else _crc_file(p)
    return {"command": command, "config": config, "inputs_crc32": digests,
            "tool_version": __version__, "seed": seed}


def emit(report: dict, path) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _spec_input(ref: str):
    return None if ref.startswith("builtin:") else ref


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("XNOR_FORGE_JOBS", "1")))
    except ValueError:
        return 1


def _parse_tiles(text: str) -> tuple[int, int]:
    try:
        tx, ty = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tiles must look like 8x8, got {text!r}") from None
    return tx, ty


def _pmap(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- infer -------------------------------------------------------------

def cmd_infer(args) -> int:
    spec = netspec.resolve_spec(args.spec)
    netspec.validate_network(spec)
    bundle = modelio.read_bundle(args.weights, spec)
    if args.image:
        img = imgproc.load_ppm(Path(args.image).read_bytes())
        img = imgproc.preprocess(img, None, args.clahe_tiles, args.clip_limit)
        samples = [(img, None)]
    else:
        samples = [(r.image, r.label) for r in imgproc.read_cache(args.dataset)]

    def run(sample):
        img, _ = sample
        return engine.infer(spec, bundle, imgproc.normalize(img, spec.input_range))

    outputs = _pmap(run, samples, args.jobs)
    results = []
    correct = 0
    labelled = 0
    for i, ((scores, pred), (_, truth)) in enumerate(zip(outputs, samples)):
        row = {"index": i, "predicted": pred}
        if not args.no_scores:
            row["scores"] = [float(s) for s in scores]
        if truth is not None:
            row["label"] = truth
            labelled += 1
            correct += int(pred == truth)
        results.append(row)
    report = {
        "manifest": manifest("infer", {"spec": args.spec, "clahe_tiles": list(args.clahe_tiles),
                                       "clip_limit": args.clip_limit, "backend": BACKEND},
                             {"spec": _spec_input(args.spec), "weights": args.weights,
                              "image": args.image, "dataset": args.dataset}),
        "count": len(results),
        "num_classes": spec.num_classes,
        "results": results,
    }
    if labelled:
        report["accuracy"] = correct / labelled
    emit(report, args.report)
    return EXIT_OK


# -- preprocess ----------------------------------------------------------

def cmd_preprocess(args) -> int:
    root = Path(args.gtsrb_dir)
    if not root.is_dir():
        raise CliIOError(f"{root}: not a directory")
    csv_files = imgproc.find_annotation_files(root)
    if not csv_files:
        raise CliIOError(f"{root}: no GT-*.csv annotation files found")
    skipped = []
    by_class: dict[int, list[imgproc.RgbImage]] = {}
    records = []

    def fail(message):
        if not args.keep_going:
            raise ValueError(message)
        skipped.append(message)

    jobs = []
    for csv_path in csv_files:
        row_errors = [] if args.keep_going else None
        try:
            annotations = imgproc.parse_annotations(csv_path.read_text(), row_errors)
        except imgproc.AnnotationError as exc:
            fail(f"{csv_path}: {exc}")
            continue
        for exc in row_errors or []:
            fail(f"{csv_path}: {exc}")
        jobs += [(csv_path, a) for a in annotations]

    def load(job):
        csv_path, ann = job
        ppm = csv_path.parent / ann.filename
        try:
            img = imgproc.load_ppm(ppm.read_bytes())
            return imgproc.preprocess(img, ann.roi, args.clahe_tiles, args.clip_limit), None
        except (OSError, ValueError) as exc:
            return None, f"{ppm}: {exc}"

    for (csv_path, ann), (img, err) in zip(jobs, _pmap(load, jobs, args.jobs)):
        if err:
            fail(err)
            continue
        sources = by_class.setdefault(ann.class_id, [])
        records.append(imgproc.CacheRecord(ann.class_id, img, False, len(sources)))
        sources.append(img)

    plan = {}
    if args.balance:
        plan = imgproc.balance_plan({c: len(v) for c, v in by_class.items()}, args.balance)
        for cid in sorted(plan):
            sources = by_class[cid]
            for src, params in imgproc.augment_schedule(cid, len(sources), plan[cid], args.seed):
                records.append(imgproc.CacheRecord(cid, imgproc.augment(sources[src], params), True, src))

    imgproc.write_cache(args.out, records)
    report = {
        "manifest": manifest("preprocess", {"clahe_tiles": list(args.clahe_tiles), "clip_limit": args.clip_limit,
                                            "balance": args.balance, "keep_going": args.keep_going},
                             {"gtsrb_dir": args.gtsrb_dir}, seed=args.seed),
        "records": len(records),
        "originals": sum(len(v) for v in by_class.values()),
        "augmented": sum(plan.values()),
        "classes": {str(c): len(v) for c, v in sorted(by_class.items())},
        "skipped": skipped,
    }
    emit(report, Path(args.out) / "manifest.json")
    if args.report:
        emit(report, args.report)
    return EXIT_OK


# -- simulate / fold -----------------------------------------------------

def cmd_simulate(args) -> int:
    spec = netspec.resolve_spec(args.spec)
    report = hwsim.simulate(spec, hwsim.ClockConfig(args.clock))
    emit({"manifest": manifest("simulate", {"spec": args.spec, "clock_hz": args.clock},
                               {"spec": _spec_input(args.spec)}),
          "report": report.to_dict()}, args.report)
    return EXIT_OK


def _load_folding(ref: str) -> foldsim.FoldingConfig:
    if ref in foldsim.EXPERIMENTS:
        return foldsim.experiment(ref)
    return foldsim.FoldingConfig.from_json(Path(ref).read_text())


def cmd_fold(args) -> int:
    spec = netspec.resolve_spec(args.spec)
    netspec.validate_network(spec)
    config = {"spec": args.spec, "clock_hz": args.clock}
    if args.explore:
        front = foldsim.explore(spec, args.clock, layer_budget=args.layer_budget, total_budget=args.budget)
        config.update(explore=True, budget=args.budget, layer_budget=args.layer_budget)
        body = {"frontier": [p.to_dict() for p in front]}
        inputs = {"spec": _spec_input(args.spec)}
    else:
        if not args.config:
            raise ValueError("fold needs --config or --explore")
        folding = _load_folding(args.config)
        body = {"report": foldsim.throughput(spec, folding, args.clock).to_dict(),
                "folding": folding.to_dict()}
        config["config"] = args.config
        inputs = {"spec": _spec_input(args.spec),
                  "config": None if args.config in foldsim.EXPERIMENTS else args.config}
    emit({"manifest": manifest("fold", config, inputs), **body}, args.report)
    return EXIT_OK


# -- verify --------------------------------------------------------------

def cmd_verify(args) -> int:
    results = verify.run_all(args.seed, args.cases, fault=args.inject_fault)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name}: {r.cases} cases, {r.failures} failures")
        if not r.ok:
            print(f"  counterexample: {json.dumps(r.counterexample)}", file=sys.stderr)
    if args.report:
        emit({"manifest": manifest("verify", {"cases": args.cases, "backend": BACKEND}, {}, seed=args.seed),
              "suites": [r.to_dict() for r in results]}, args.report)
    return EXIT_OK if all(r.ok for r in results) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xnor-forge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    inf = sub.add_parser("infer", help="classify preprocessed images")
    inf.add_argument("--spec", default="builtin:custom")
    inf.add_argument("--weights", required=True, help="XNORNET1 bundle or JSON import document")
    src = inf.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="PPM image (run through the preprocessing pipeline)")
    src.add_argument("--dataset", help="preprocessed cache directory")
    inf.add_argument("--report")
    inf.add_argument("--clahe-tiles", type=_parse_tiles, default=imgproc.CLAHE_TILES)
    inf.add_argument("--clip-limit", type=float, default=imgproc.CLAHE_CLIP)
    inf.add_argument("--no-scores", action="store_true", help="omit per-class scores from the report")
    inf.add_argument("--jobs", type=int, default=_jobs_default())
    inf.set_defaults(func=cmd_infer)

    pre = sub.add_parser("preprocess", help="build a preprocessed cache from a GTSRB tree")
    pre.add_argument("--gtsrb-dir", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--clahe-tiles", type=_parse_tiles, default=imgproc.CLAHE_TILES)
    pre.add_argument("--clip-limit", type=float, default=imgproc.CLAHE_CLIP)
    pre.add_argument("--balance", type=int, default=0, help="augment every class up to this many examples")
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--keep-going", action="store_true")
    pre.add_argument("--report")
    pre.add_argument("--jobs", type=int, default=_jobs_default())
    pre.set_defaults(func=cmd_preprocess)

    sim = sub.add_parser("simulate", help="cycle model of the custom accelerator")
    sim.add_argument("--spec", default="builtin:custom")
    sim.add_argument("--clock", type=float, default=1.0e8)
    sim.add_argument("--report")
    sim.set_defaults(func=cmd_simulate)

    fold = sub.add_parser("fold", help="folding throughput model / design-space exploration")
    fold.add_argument("--spec", default="builtin:finn")
    fold.add_argument("--config", help="folding JSON file or experiment name E1..E4")
    fold.add_argument("--explore", action="store_true")
    fold.add_argument("--budget", type=int, help="max total PE*SIMD")
    fold.add_argument("--layer-budget", type=int, help="max PE*SIMD per layer")
    fold.add_argument("--clock", type=float, default=1.0e8)
    fold.add_argument("--report")
    fold.set_defaults(func=cmd_fold)

    ver = sub.add_parser("verify", help="run the randomized oracle suites")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--cases", type=int, default=1000)
    ver.add_argument("--report")
    ver.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    ver.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliIOError, OSError) as exc:
        print(f"xnor-forge: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"xnor-forge: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
