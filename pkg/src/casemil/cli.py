"""Command line: generate, train, eval, gradcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import plotting
from . import tensor as T
from .casedata import CaseRecord, DataError, generate_synthetic, load_manifest, resize_bilinear, write_dataset
from .config import ConfigError, RunConfig, load_config, parse_config
from .evaluation import (CONFUSION_COLS, CONFUSION_ROWS, IOU_MODES, attention_entropy, evaluate)
from .featurenet import NetConfig
from .gradcheck import TOLERANCE, run_all
from .imageio import write_unit_pgm
from .milpool import PoolingSpec, SpecError
from .model import CaseModel, ModelConfig
from .training import TrainingError, load_checkpoint_into, read_checkpoint_meta, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
CHECKPOINT_NAME = "model.prm"
TRAIN_LOG = "train.log"

log = logging.getLogger("casemil")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- shared helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config("")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg


def _load(path, cfg: RunConfig) -> list[CaseRecord]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"manifest not found: {p}")
    return load_manifest(p, cfg.get("model.image_height"), cfg.get("model.image_width"))


def _dataset(cfg: RunConfig) -> dict[str, list[CaseRecord]]:
    """train/val/test case lists from whichever dataset keys are set."""
    if cfg.get("dataset.synthetic"):
        tr, va, te = generate_synthetic(cfg.synthetic_config())
        return {"train": tr, "val": va, "test": te}
    out: dict[str, list[CaseRecord]] = {}
    root = cfg.get("dataset.dir")
    for split in ("train", "val", "test"):
        path = cfg.get(f"dataset.{split}")
        if path is None and root is not None:
            cand = Path(root) / f"{split}.csv"
            path = cand if cand.is_file() else None
        out[split] = _load(path, cfg) if path is not None else []
    if not any(out.values()):
        if cfg.get("dataset.manifest") is None:
            raise ConfigError("no dataset given: set dataset.synthetic, dataset.dir, dataset.<split> or dataset.manifest",
                              "dataset")
        out["test"] = _load(cfg.get("dataset.manifest"), cfg)
    return out


def _meta_model_config(meta: dict) -> ModelConfig:
    try:
        return ModelConfig(net=NetConfig(channels_per_stage=tuple(int(v) for v in meta["model.channels"].split(",")),
                                         embed_dim=int(meta["model.embed_dim"])),
                           pooling=meta["model.pooling"], t_fraction=float(meta["model.t_fraction"]),
                           k=int(meta["model.k"]), image_height=int(meta["model.image_height"]),
                           image_width=int(meta["model.image_width"]), patch_size=int(meta["model.patch_size"]),
                           hidden_dim=int(meta["model.hidden_dim"]))
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint metadata incomplete: {exc}", EXIT_DATA) from None


def _model_meta(mc: ModelConfig) -> dict:
    return {"model.pooling": mc.pooling, "model.t_fraction": mc.t_fraction, "model.k": mc.k,
            "model.channels": ",".join(str(c) for c in mc.net.channels_per_stage),
            "model.embed_dim": mc.net.embed_dim, "model.hidden_dim": mc.hidden_dim,
            "model.patch_size": mc.patch_size, "model.image_height": mc.image_height,
            "model.image_width": mc.image_width}


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    cfg = _config(args)
    if not cfg.get("dataset.synthetic"):
        cfg.set("dataset.synthetic", "true")
    syn = cfg.synthetic_config()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} is not empty (use --force)", EXIT_DATA)
    tr, va, te = generate_synthetic(syn)
    write_dataset({"train": tr, "val": va, "test": te}, out)
    prov = ["# synthetic dataset provenance", f"cases = {syn.n_cases}",
            f"split.train = {len(tr)}", f"split.val = {len(va)}", f"split.test = {len(te)}"]
    keys = [k for k in cfg.to_text().splitlines() if k.startswith(("dataset.synthetic", "seeds.data", "model.image_"))]
    (out / "provenance.txt").write_text("\n".join(prov + keys) + "\n", encoding="utf-8")
    print(f"wrote {syn.n_cases} cases to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _config(args)
    mc = cfg.model_config()
    tc = cfg.train_config()
    data = _dataset(cfg)
    if not data["train"]:
        raise CliError("empty training split", EXIT_DATA)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = CaseModel(mc, seed=cfg.get("seeds.init"))
    try:
        res = train(model, data["train"], data["val"], tc, log_path=out / TRAIN_LOG)
    except TrainingError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    meta = dict(_model_meta(mc))
    meta.update({"seeds.init": cfg.get("seeds.init"), "seeds.data": cfg.get("seeds.data"),
                 "seeds.shuffle": cfg.get("seeds.shuffle"), "training.scheme": tc.scheme,
                 "best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
                 "best_val_auc": f"{res.best_val_auc:.6f}" if math.isfinite(res.best_val_auc) else "n/a"})
    save_checkpoint(model, out / CHECKPOINT_NAME, meta)
    (out / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
    print(f"checkpoint {out / CHECKPOINT_NAME} (best epoch {res.best_epoch} of {res.epochs_run})")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _draw_box(img: np.ndarray, box, value: float = 1.0) -> None:
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = img.shape
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return
    img[y0, x0:x1] = value
    img[y1 - 1, x0:x1] = value
    img[y0:y1, x0] = value
    img[y0:y1, x1 - 1] = value


def write_visualizations(preds, cases, out_dir, n: int) -> list[Path]:
    """Per case: image, upsampled saliency and boxed candidates as P5 files, plus attention.txt."""
    dirs = []
    for pred, case in list(zip(preds, cases))[:n]:
        d = Path(out_dir) / case.case_id
        d.mkdir(parents=True, exist_ok=True)
        lines = [f"case = {case.case_id}", f"label = {case.case_label.name}", f"prob = {pred.prob:.6f}"]
        for m, im in enumerate(case.images):
            stem = f"{m}_{im.side.value}_{im.view.value}"
            h, w = im.pixels.shape
            write_unit_pgm(d / f"{stem}_image.pgm", im.pixels)
            sal = resize_bilinear(np.asarray(pred.saliency[m], dtype=float), h, w)
            write_unit_pgm(d / f"{stem}_saliency.pgm", sal)
            boxed = im.pixels.copy()
            for box in pred.patch_boxes[m]:
                _draw_box(boxed, box, 1.0)
            write_unit_pgm(d / f"{stem}_boxes.pgm", boxed)
            a_m = "n/a" if pred.image_attention is None else f"{pred.image_attention[m]:.6f}"
            lines.append(f"image.{m}.{im.side.value}-{im.view.value}.a_m = {a_m}")
            for j, (box, a_j) in enumerate(zip(pred.patch_boxes[m], pred.patch_attention[m])):
                lines.append(f"image.{m}.patch.{j}.box = {':'.join(str(int(v)) for v in box)}")
                lines.append(f"image.{m}.patch.{j}.a_j = {a_j:.6f}")
            for g, box in enumerate(im.roi_boxes):
                lines.append(f"image.{m}.truth.{g} = {box.to_token()}")
        (d / "attention.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        dirs.append(d)
    return dirs


def write_figures(report, preds, cases, out_dir, train_log: Path | None = None) -> list[Path]:
    fig_dir = Path(out_dir) / "figures"
    v = report.values
    groups = {}
    for key, val in v.items():
        if key.startswith("group.") and key.endswith(".auc"):
            g = key[len("group."):-len(".auc")]
            groups[g] = {"auc": val, "n": v[f"group.{g}.n"]}
    from .casedata import GROUP_NAMES
    groups = {g: groups[g] for g in GROUP_NAMES if g in groups}
    paths = [plotting.group_auc_bars(groups, fig_dir / "group_auc.png"),
             plotting.confusion_plot(report.confusion, CONFUSION_ROWS, CONFUSION_COLS, fig_dir / "confusion_roi.png"),
             plotting.roc_plot([p.prob for p in preds], [int(c.case_label) for c in cases],
                               v.get("auc") if isinstance(v.get("auc"), float) else float("nan"), fig_dir / "roc.png")]
    ent = {0: [], 1: []}
    for p, c in zip(preds, cases):
        if p.image_attention is not None and len(c.images) == 4:
            ent[int(c.case_label)].append(attention_entropy(p.image_attention))
    if ent[0] or ent[1]:
        paths.append(plotting.entropy_plot(ent[0], ent[1], math.log(4), fig_dir / "attention_entropy.png"))
    if train_log is not None and train_log.is_file():
        paths.append(plotting.training_curves(train_log.read_text(encoding="utf-8"), fig_dir / "training_curves.png"))
    return paths


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_DATA)
    meta = read_checkpoint_meta(ckpt)
    mc = _meta_model_config(meta)
    expected = args.spec or (cfg.get("model.pooling") if cfg.is_set("model.pooling") else None)
    if expected is not None:
        try:
            expected = str(PoolingSpec.parse(expected))
        except SpecError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        if expected != mc.pooling:
            raise CliError(f"pooling spec mismatch: checkpoint has {mc.pooling}, requested {expected}", EXIT_CONFIG)
    # images are preprocessed at the checkpoint's resolution
    cfg.set("model.image_height", str(mc.image_height))
    cfg.set("model.image_width", str(mc.image_width))
    if args.data:
        cases = _load(args.data, cfg)
    else:
        split = _dataset(cfg)
        cases = split["test"]
    if not cases:
        raise CliError("no cases to evaluate", EXIT_DATA)
    model = CaseModel(mc, seed=0)
    try:
        load_checkpoint_into(model, ckpt)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    report, preds = evaluate(model, cases, roi_match_threshold=cfg.get("eval.roi_match_threshold"),
                             attention_threshold=cfg.get("eval.attention_threshold"),
                             probability_threshold=cfg.get("eval.probability_threshold"))
    modes = args.iou_mode or list(IOU_MODES)
    for key in [k for k in report.values if k.startswith("roi.")]:
        if key.split(".")[1] not in modes:
            del report.values[key]
    report.values["model.pooling"] = mc.pooling
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    figs = [] if args.no_figures else write_figures(report, preds, cases, out, ckpt.parent / TRAIN_LOG)
    if args.visualize:
        write_visualizations(preds, cases, out / "visualize", args.visualize)
    print(report.to_text(), end="")
    for p in figs:
        print(f"figure {p}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    if args.inject_fault:
        with T.inject_fault(args.inject_fault, args.fault_factor):
            results, seconds = run_all(args.seed, args.trials)
    else:
        results, seconds = run_all(args.seed, args.trials)
    for r in results:
        print(r.line())
    bad = [r for r in results if not r.ok]
    print(f"checks = {len(results)} failed = {len(bad)} tolerance = {TOLERANCE:g} seconds = {seconds:.1f}")
    return EXIT_VERIFY if bad else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="casemil", description="Case-level two-level MIL for multi-view mammography.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="run config file (section.key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")

    p = sub.add_parser("generate", help="write a synthetic dataset (manifests + 16-bit P5 images)")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model; writes checkpoint, sidecars and a per-epoch log")
    with_config(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics.txt and figures")
    with_config(p)
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    p.add_argument("--data", help="manifest to evaluate (default: the config's test split)")
    p.add_argument("--out", help="output directory (default: <ckpt dir>/eval)")
    p.add_argument("--spec", help="expected pooling spec; error if the checkpoint differs")
    p.add_argument("--iou-mode", action="append", choices=IOU_MODES, help="IoU/DSC mode to report; repeatable")
    p.add_argument("--visualize", type=int, default=0, metavar="N", help="write P5 montages for the first N cases")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20, help="random inputs per op kind")
    p.add_argument("--inject-fault", choices=T.OP_KINDS, help="scale one op's gradient (harness self-test)")
    p.add_argument("--fault-factor", type=float, default=1.5)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpecError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
