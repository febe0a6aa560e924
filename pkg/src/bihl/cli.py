"""Command-line entry point: ``bihl {train,propose,eval,repeat,perturb,synth}``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import binmodel, evalkit, imgpyr, proposer, trainer
from .errors import BihlError
from .hlfeat import feature_image
from .merger import MergeConfig, merge_groups
from .proposer import ProposerConfig

log = logging.getLogger("bihl")

IMAGE_EXTS = (".pgm", ".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ConfigError(Exception):
    """Bad flags or unreadable inputs, detected before any work starts (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# --- argument helpers -------------------------------------------------------

def _list_images(path: str) -> List[str]:
    if not os.path.exists(path):
        raise ConfigError(f"images not found: {path}")
    if os.path.isfile(path):
        return [path]
    files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTS))
    if not files:
        raise ConfigError(f"no images in {path}")
    return files


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"--{what} is required")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _threads(args) -> int:
    n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n


def _proposer_cfg(args) -> ProposerConfig:
    try:
        return ProposerConfig(tc=args.tc, tmval=args.tmval, budget=args.budget)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _merge_cfg(args) -> MergeConfig:
    try:
        return MergeConfig(ts1=args.ts1, ts2=args.ts2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_model(path: str):
    _require(path, "model")
    try:
        return binmodel.load_model(path)
    except BihlError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_binarization(args):
    if not 1 <= args.ng <= 8:
        raise ConfigError("ng must be in 1..8")
    if not 1 <= args.na <= binmodel.MAX_NA:
        raise ConfigError(f"na must be in 1..{binmodel.MAX_NA}")


def _open_out(path: Optional[str]):
    if path in (None, "-"):
        return sys.stdout
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w", newline="")


def _map_ordered(fn, items: Sequence, threads: int) -> list:
    if threads == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- subcommands ------------------------------------------------------------

def cmd_train(args) -> int:
    _check_binarization(args)
    files = _list_images(args.images)
    ann_path = _require(args.annotations, "annotations")
    _require_out(args.model, "model")
    try:
        cfg = trainer.TrainConfig(epochs=args.epochs, lr=args.lr, C=args.C, seed=args.seed,
                                  negatives_per_image=args.negatives)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    annotations = trainer.load_annotations(ann_path)
    images = [imgpyr.read_image(f) for f in files]
    boxes = [annotations.get(trainer.image_key(f), []) for f in files]
    unused = set(annotations) - {trainer.image_key(f) for f in files}
    if unused:
        log.warning("%d annotated images have no image file", len(unused))

    history: List[float] = []
    model, (X, y) = trainer.train_model(images, boxes, cfg, args.ng, args.na, history=history)
    scales = imgpyr.enumerate_scales()
    if args.calibrate:
        model = trainer.fit_calibration(model, images, boxes, cfg, ProposerConfig(tc=args.tc, tmval=args.tmval), scales)
    binmodel.save_model(model, scales, args.model)
    n_pos = int(np.count_nonzero(y > 0))
    print(f"samples: {n_pos} positive, {len(y) - n_pos} negative")
    if history:
        print(f"loss: first {history[0]:.6g}  last {history[-1]:.6g}  min {min(history):.6g}  epochs {len(history)}")
    print(f"model: {args.model}")
    return 0


def _require_out(path: Optional[str], what: str):
    if not path:
        raise ConfigError(f"--{what} is required")


def _dump_features(img: imgpyr.ImagePlane, name: str, directory: str):
    os.makedirs(directory, exist_ok=True)
    for s, fmap in proposer.feature_maps(img).items():
        imgpyr.write_pgm(feature_image(fmap), os.path.join(directory, f"{name}_hl_{s.m}{s.n}.pgm"))


def cmd_propose(args) -> int:
    files = _list_images(args.images)
    model, scales = _load_model(args.model)
    cfg = _proposer_cfg(args)
    mcfg = _merge_cfg(args)
    threads = _threads(args)
    merge = not args.no_merge

    def work(path):
        img = imgpyr.read_image(path)
        name = os.path.basename(path)
        props = proposer.propose(img, model, cfg, merge=merge, merge_cfg=mcfg, scales=scales)
        if args.dump_features:
            _dump_features(img, trainer.image_key(path), args.dump_features)
        if args.dump_grid and merge:
            V = proposer.propose(img, model, cfg, merge=False, scales=scales)[: mcfg.cap]
            _, grid = merge_groups(V, mcfg, (img.width, img.height))
            os.makedirs(args.dump_grid, exist_ok=True)
            imgpyr.write_pgm(grid.to_image(), os.path.join(args.dump_grid, f"{trainer.image_key(path)}_grid.pgm"))
        return name, props

    results = _map_ordered(work, files, threads)
    fh = _open_out(args.out)
    try:
        if args.format == "jsonl":
            proposer.write_jsonl(fh, results)
        else:
            proposer.write_csv(fh, results)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def _ground_truth(args, keys: Optional[Sequence[str]] = None) -> Dict[str, list]:
    ann = trainer.load_annotations(_require(args.annotations, "annotations"))
    if keys is not None:
        ann = {k: ann.get(k, []) for k in keys}
    # difficult boxes count like any other
    return {k: list(v) for k, v in ann.items() if v}


def _write_report(report: evalkit.EvalReport, out: Optional[str]):
    if out in (None, "-"):
        sys.stdout.write(report.to_json() + "\n")
        return
    base = out[:-5] if out.endswith(".json") else out
    os.makedirs(os.path.dirname(os.path.abspath(base)), exist_ok=True)
    with open(base + ".json", "w") as fh:
        fh.write(report.to_json() + "\n")
    with open(base + ".csv", "w", newline="") as fh:
        fh.write(report.to_csv())
    print(f"DR@{report.iou_threshold}: {report.detection_rate:.4f}  MABO: {report.mabo:.4f}  -> {base}.json, {base}.csv")


def cmd_eval(args) -> int:
    if not 0 < args.iou <= 1:
        raise ConfigError("iou must be in (0, 1]")
    times = None
    if args.proposals:
        props = proposer.read_csv(_require(args.proposals, "proposals"))
        props = {trainer.image_key(k): v for k, v in props.items()}
        gt = _ground_truth(args)
    else:
        files = _list_images(args.images)
        model, scales = _load_model(args.model)
        cfg = _proposer_cfg(args)
        mcfg = _merge_cfg(args)
        keys = [trainer.image_key(f) for f in files]
        gt = _ground_truth(args, keys)
        props, times = {}, []
        # timing runs are single-threaded so numbers are comparable
        for f, k in zip(files, keys):
            t0 = time.perf_counter()
            img = imgpyr.read_image(f)
            p = proposer.propose(img, model, cfg, merge=not args.no_merge, merge_cfg=mcfg, scales=scales)
            list(proposer.proposal_rows(k, p))
            times.append(time.perf_counter() - t0)
            props[k] = p
    if not gt:
        raise ConfigError("no ground-truth boxes for the given images")
    report = evalkit.evaluate(props, gt, args.iou, args.budget, times, sweep=(0.5, 0.6, 0.7, 0.8, 0.9))
    _write_report(report, args.out)
    return 0


def _perturbations(args) -> List[evalkit.Perturbation]:
    kinds = args.kind or [k for k in evalkit.LADDERS]
    out = []
    for kind in kinds:
        if kind not in evalkit.KINDS:
            raise ConfigError(f"unknown perturbation kind {kind!r}; expected one of {', '.join(evalkit.KINDS)}")
        if kind == "identity":
            out.append(evalkit.Perturbation("identity"))
            continue
        ladder = evalkit.LADDERS[kind]
        idxs = [args.level] if args.level is not None else range(len(ladder))
        for i in idxs:
            try:
                out.append(evalkit.Perturbation.from_index(kind, i))
            except BihlError as exc:
                raise ConfigError(str(exc)) from None
    return out


def cmd_repeat(args) -> int:
    files = _list_images(args.images)
    model, scales = _load_model(args.model)
    cfg = _proposer_cfg(args)
    perts = _perturbations(args)
    merge = not args.no_merge
    threads = _threads(args)

    def work(path):
        img = imgpyr.read_image(path)
        base = proposer.propose(img, model, cfg, merge, scales=scales)
        return [evalkit.repeatability(model, img, p, cfg, merge, args.top, args.iou, args.seed, base)
                for p in perts]

    per_image = np.array(_map_ordered(work, files, threads), dtype=np.float64).reshape(len(files), len(perts))
    buf = io.StringIO()
    buf.write("kind,level,repeatability\n")
    for j, p in enumerate(perts):
        buf.write(f"{p.kind},{p.level!r},{float(per_image[:, j].mean())!r}\n")
    fh = _open_out(args.out)
    try:
        fh.write(buf.getvalue())
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_perturb(args) -> int:
    files = _list_images(args.images)
    if not args.kind or len(args.kind) != 1:
        raise ConfigError("perturb needs exactly one --kind")
    _require_out(args.out, "out")
    kind = args.kind[0]
    if kind != "identity" and args.level is None:
        raise ConfigError("--level (ladder index) is required")
    (p,) = _perturbations(args)
    os.makedirs(args.out, exist_ok=True)
    maps = {}
    for f in files:
        img = imgpyr.read_image(f)
        key = trainer.image_key(f)
        if p.kind == "jpeg":
            dst = os.path.join(args.out, f"{key}.jpg")
            with open(dst, "wb") as fh:
                fh.write(evalkit.jpeg_bytes(img, int(p.level)))
            mapping = evalkit.BoxMapping.identity((img.width, img.height))
        else:
            out_img, mapping = evalkit.perturb(img, p, args.seed)
            dst = os.path.join(args.out, f"{key}.png")
            imgpyr.write_image(out_img, dst)
        maps[os.path.basename(dst)] = {"source": os.path.basename(f), "forward": mapping.forward.tolist(),
                                       "src_size": list(mapping.src_size), "dst_size": list(mapping.dst_size)}
    with open(os.path.join(args.out, "mapping.json"), "w") as fh:
        json.dump({"kind": p.kind, "level": p.level, "seed": args.seed, "images": maps}, fh, indent=2, sort_keys=True)
    print(f"{len(files)} images -> {args.out} ({p.kind} {p.level})")
    return 0


def cmd_synth(args) -> int:
    from .synth import synthetic_corpus, write_corpus

    if args.count < 1:
        raise ConfigError("count must be >= 1")
    _require_out(args.out, "out")
    scenes = synthetic_corpus(args.count, args.seed, args.prefix)
    ann = write_corpus(scenes, args.out)
    print(f"{len(scenes)} images, {sum(len(s.boxes) for s in scenes)} boxes -> {ann}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bihl", description="Binarized HL-feature object proposals.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--images", required=True, help="image file or directory")
        if model:
            sp.add_argument("--model", help="model JSON")
        sp.add_argument("--out", help="output path ('-' = stdout)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None)

    def filters(sp):
        sp.add_argument("--tc", type=float, default=0.0, help="minimum window score")
        sp.add_argument("--tmval", type=float, default=8.0, help="minimum window HL peak")
        sp.add_argument("--budget", "--max", dest="budget", type=int, default=10_000)

    def merging(sp):
        sp.add_argument("--no-merge", action="store_true")
        sp.add_argument("--ts1", type=int, default=25)
        sp.add_argument("--ts2", type=int, default=25)

    t = sub.add_parser("train", help="train a model from annotated images")
    common(t)
    t.add_argument("--annotations", help="VOC XML directory or image,label,x,y,w,h line file")
    t.add_argument("--ng", type=int, default=binmodel.DEFAULT_NG)
    t.add_argument("--na", type=int, default=binmodel.DEFAULT_NA)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--C", type=float, default=1.0)
    t.add_argument("--negatives", type=int, default=50, help="negatives per image")
    t.add_argument("--calibrate", action="store_true", help="fit per-scale score calibration")
    t.add_argument("--tc", type=float, default=0.0)
    t.add_argument("--tmval", type=float, default=8.0)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("propose", help="write proposals as CSV")
    common(pr)
    filters(pr)
    merging(pr)
    pr.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    pr.add_argument("--dump-features", metavar="DIR", help="write HL maps as PGM")
    pr.add_argument("--dump-grid", metavar="DIR", help="write merge occupancy grids as PGM")
    pr.set_defaults(func=cmd_propose)

    ev = sub.add_parser("eval", help="DR / MABO report")
    ev.add_argument("--images", help="images to propose on (with --model)")
    ev.add_argument("--model")
    ev.add_argument("--proposals", help="proposal CSV instead of running the proposer")
    ev.add_argument("--annotations")
    ev.add_argument("--out", help="report path prefix; writes .json and .csv")
    ev.add_argument("--iou", type=float, default=0.5)
    filters(ev)
    merging(ev)
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("repeat", help="repeatability under perturbations")
    common(rp)
    filters(rp)
    merging(rp)
    rp.add_argument("--kind", action="append", help="perturbation kind (repeatable); default all ladders")
    rp.add_argument("--level", type=int, help="ladder index; default whole ladder")
    rp.add_argument("--top", type=int, default=1000)
    rp.add_argument("--iou", type=float, default=0.5)
    rp.set_defaults(func=cmd_repeat)

    pt = sub.add_parser("perturb", help="write perturbed images")
    common(pt, model=False)
    pt.add_argument("--kind", action="append")
    pt.add_argument("--level", type=int, help="ladder index")
    pt.set_defaults(func=cmd_perturb)

    sy = sub.add_parser("synth", help="write a seeded synthetic corpus")
    sy.add_argument("--out", required=True)
    sy.add_argument("--count", type=int, default=200)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--prefix", default="syn")
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"bihl: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bihl: error: {exc}", file=sys.stderr)
        return 2
    except BihlError as exc:
        print(f"bihl: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # reader went away (e.g. piped into head); not an error of ours
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except OSError as exc:
        print(f"bihl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
