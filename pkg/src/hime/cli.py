"""Command-line front door: ``hime <subcommand> ...``.

Exit codes: 0 success, 1 a check or verification failed, 2 usage or
configuration error.  ``train`` also reads a flat JSON ``--config`` whose
keys are flag names (dashes or underscores); flags given on the command line
win over the file.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import gradcheck as gc
from .alignment import block_match_flow
from .imaging import corrmap_visualize, load_image, psnr, save_image, ssim
from .losses import correlation_map
from .model import HimeConfig, hime_forward, load_checkpoint
from .tensor import load_htf, save_htf
from .training import SynthSpec, TrainingDiverged, estimate_flows, train_toy

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


TRAIN_DEFAULTS: Dict[str, object] = {
    "iters": 1000,
    "out": "run",
    "refs": 3,
    "rfa": "large",
    "agg": "cofa",
    "flip": "none",
    "loss": "rec",
    "flow_source": "blockmatch",
    "seed": 0,
    "lr": 1e-3,
    "batch": 4,
    "scale": 4,
    "c_f": 16,
    "k_l": 2,
    "k_h": 1,
    "k_r": 4,
    "size": 64,
    "eval_every": 100,
    "sample_every": 100,
    "k": 3,
    "dilation": 1,
}

_TRAIN_HELP = {
    "iters": "Adam steps",
    "out": "output directory for checkpoint, log.csv and sample images",
    "refs": "references per sample (0 trains the reference-free baseline)",
    "rfa": "alignment: small (learned offsets), large (flow-guided), conv (zero-offset ablation)",
    "agg": "aggregation of aligned references",
    "flip": "horizontal flip augmentation",
    "loss": "rec (Charbonnier), rec+cor (+ correlation), p (+ correlation + feature L1)",
    "flow_source": "where flow comes from in large mode; none is rejected",
    "seed": "seed for initialisation and data",
    "lr": "Adam learning rate",
    "batch": "samples per step",
    "scale": "upscaling factor s",
    "c_f": "feature channels",
    "k_l": "residual blocks in the LR extractor",
    "k_h": "residual blocks in the reference extractor",
    "k_r": "residual blocks in the reconstructor",
    "size": "HR image side of the synthetic samples",
    "eval_every": "iterations between held-out evaluations",
    "sample_every": "iterations between sample image dumps and checkpoints",
    "k": "correlation window size",
    "dilation": "correlation window dilation",
}

_TRAIN_CHOICES = {
    "rfa": ("small", "large", "conv"),
    "agg": ("cofa", "average", "maxpool"),
    "flip": ("none", "uneven", "even"),
    "loss": ("rec", "rec+cor", "p"),
    "flow_source": ("blockmatch", "none"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _odd_int(text: str) -> int:
    v = int(text)
    if v < 1 or v % 2 == 0:
        raise argparse.ArgumentTypeError(f"k must be a positive odd integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="hime", description="Multi-exemplar headshot super-resolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("corrmap", help="render the correlation map of an image", formatter_class=fmt)
    c.add_argument("--input", required=True, help="PNG/PPM/PGM image")
    c.add_argument("--k", type=_odd_int, default=3, help="window size (odd)")
    c.add_argument("--dilation", type=int, default=1, help="window dilation")
    c.add_argument("--out", required=True, help="visualisation PNG")
    c.add_argument("--raw", default=None, help="optional HTF dump of the raw map")
    c.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    g = sub.add_parser("gradcheck", help="finite-difference check of every vjp", formatter_class=fmt)
    g.add_argument("--op", action="append", default=None, help="op name (repeatable); default all")
    g.add_argument("--tolerance", type=float, default=None,
                   help="override tolerance (default 1e-4 per op, 1e-3 end-to-end)")
    g.add_argument("--seed", type=int, default=0, help="seed for inputs and cotangents")

    t = sub.add_parser("train", help="train the toy model on synthetic headshots")
    t.add_argument("--config", default=None, help="flat JSON object of flag values")
    for key, default in TRAIN_DEFAULTS.items():
        kw = dict(default=None, help=f"{_TRAIN_HELP[key]} (default: {default})")
        if key in _TRAIN_CHOICES:
            kw["choices"] = _TRAIN_CHOICES[key]
        elif not isinstance(default, str):
            kw["type"] = type(default)
        t.add_argument("--" + key.replace("_", "-"), dest=key, **kw)

    i = sub.add_parser("infer", help="super-resolve an LR image with exemplars", formatter_class=fmt)
    i.add_argument("--checkpoint", required=True, help="HMC1 checkpoint")
    i.add_argument("--lr", required=True, help="LR image")
    i.add_argument("--ref", nargs="*", default=[], help="reference images (any number)")
    i.add_argument("--flow", nargs="*", default=None,
                   help="HTF flows, one per reference (large mode; default: block matching)")
    i.add_argument("--out", required=True, help="SR image path")
    i.add_argument("--gt", default=None, help="ground truth for PSNR/SSIM")
    i.add_argument("--seed", type=int, default=0, help="unused; inference is deterministic")

    m = sub.add_parser("metrics", help="PSNR and SSIM between two images", formatter_class=fmt)
    m.add_argument("--a", required=True, help="first image")
    m.add_argument("--b", required=True, help="second image")
    m.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    f = sub.add_parser("flow", help="block-matching flow, dst(p) ~ src(p + flow)", formatter_class=fmt)
    f.add_argument("--src", required=True, help="source image")
    f.add_argument("--dst", required=True, help="destination image")
    f.add_argument("--out", required=True, help="HTF flow (1,2,H,W), channel 0 dy, 1 dx")
    f.add_argument("--radius", type=int, default=2, help="search radius per level")
    f.add_argument("--block", type=int, default=4, help="block side")
    f.add_argument("--levels", type=int, default=1, help="pyramid levels")
    f.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    return p


# --- commands -----------------------------------------------------------------

def cmd_corrmap(a) -> int:
    img = load_image(a.input)
    m, _ = correlation_map(img, a.k, a.dilation)
    corrmap_visualize(m, a.out)
    if a.raw:
        save_htf(a.raw, m)
    print(f"correlation map {m.shape[1]} channels -> {a.out}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    names = a.op
    if names:
        unknown = [n for n in names if n not in gc.SUITE]
        if unknown:
            raise UsageError(f"unknown op(s) {', '.join(unknown)}; available: {', '.join(sorted(gc.SUITE))}")
    rows = gc.run_suite(names, tolerance=a.tolerance, seed=a.seed)
    print(f"{'op':<20} {'case':<14} {'max_rel_err':>12} {'tol':>8}  status")
    ok = True
    for name, rep in rows:
        status = "ok" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{name:<20} {rep.label:<14} {rep.max_error:>12.3e} {rep.tolerance:>8.0e}  {status}")
    return EXIT_OK if ok else EXIT_FAIL


def resolve_train_options(args) -> Dict[str, object]:
    """Defaults, then the JSON config, then explicit flags."""
    opts = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not JSON: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError("config must be a flat JSON object")
        for key, val in cfg.items():
            k = key.replace("-", "_")
            if k not in TRAIN_DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            if isinstance(val, (dict, list)):
                raise UsageError(f"config key {key!r} must be a scalar")
            if k in _TRAIN_CHOICES and val not in _TRAIN_CHOICES[k]:
                raise UsageError(f"{key} must be one of {_TRAIN_CHOICES[k]}")
            opts[k] = val
    for k in TRAIN_DEFAULTS:
        v = getattr(args, k)
        if v is not None:
            opts[k] = v
    return opts


def cmd_train(a) -> int:
    o = resolve_train_options(a)
    if o["rfa"] == "large" and o["flow_source"] == "none" and int(o["refs"]) > 0:
        raise UsageError("large RFA needs a flow source; use --flow-source blockmatch")
    cfg = HimeConfig.toy(s=int(o["scale"]), n_refs=int(o["refs"]), c_f=int(o["c_f"]), k_l=int(o["k_l"]),
                         k_h=int(o["k_h"]), k_r=int(o["k_r"]), rfa_mode=o["rfa"], cofa_mode=o["agg"],
                         seed=int(o["seed"]))
    spec = SynthSpec(size=int(o["size"]), s=int(o["scale"]), n_refs=int(o["refs"]), seed=int(o["seed"]),
                     flip_mode=o["flip"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = train_toy(cfg, spec, int(o["iters"]), loss=o["loss"], lr=float(o["lr"]), batch=int(o["batch"]),
                        eval_every=int(o["eval_every"]), k=int(o["k"]), d=int(o["dilation"]),
                        out_dir=out, sample_every=int(o["sample_every"]))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    h = res.holdout
    print(f"held-out psnr {h['psnr']:.3f} (bicubic {h['psnr_bicubic']:.3f}) "
          f"ssim {h['ssim']:.4f} (bicubic {h['ssim_bicubic']:.4f}) -> {out}")
    return EXIT_OK


def _load_checked(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} file {path} not found")
    return load_image(path)


def cmd_infer(a) -> int:
    if not Path(a.checkpoint).is_file():
        raise UsageError(f"checkpoint {a.checkpoint} not found")
    model = load_checkpoint(a.checkpoint).astype(np.float64)
    lr = _load_checked(a.lr, "LR")
    refs = [_load_checked(r, "reference") for r in a.ref]
    if lr.shape[1] == 1:
        lr = np.repeat(lr, 3, axis=1)
    refs = [np.repeat(r, 3, axis=1) if r.shape[1] == 1 else r for r in refs]
    flows: Optional[List[np.ndarray]] = None
    if model.cfg.rfa_mode == "large" and refs:
        if a.flow is None:
            flows = estimate_flows(lr, refs, model.cfg.s)
        elif len(a.flow) != len(refs):
            raise UsageError(f"{len(a.flow)} flows for {len(refs)} references in large mode")
        else:
            flows = [load_htf(p).astype(np.float64) for p in a.flow]
    sr, _ = hime_forward(model, lr, refs, flows)
    save_image(sr, a.out)
    print(f"wrote {a.out} {sr.shape[3]}x{sr.shape[2]} using {len(refs)} reference(s)")
    if a.gt:
        gt = _load_checked(a.gt, "ground truth")
        clamped = np.clip(sr, 0.0, 1.0)
        _print_metrics(clamped, gt)
    return EXIT_OK


def _print_metrics(x, y):
    if x.shape != y.shape:
        raise UsageError(f"image sizes differ: {x.shape[1:]} vs {y.shape[1:]}")
    p = psnr(x, y)
    print(f"psnr {'inf' if math.isinf(p) else f'{p:.4f}'}")
    print(f"ssim {ssim(x, y):.6f}")


def cmd_metrics(a) -> int:
    _print_metrics(_load_checked(a.a, "image"), _load_checked(a.b, "image"))
    return EXIT_OK


def cmd_flow(a) -> int:
    src, dst = _load_checked(a.src, "source"), _load_checked(a.dst, "destination")
    if src.shape != dst.shape:
        raise UsageError(f"image sizes differ: {src.shape[1:]} vs {dst.shape[1:]}")
    flow = block_match_flow(src, dst, search_radius=a.radius, block=a.block, levels=a.levels)
    save_htf(a.out, flow)
    print(f"flow {flow.shape} mean |dy| {np.abs(flow[0, 0]).mean():.3f} mean |dx| {np.abs(flow[0, 1]).mean():.3f}")
    return EXIT_OK


COMMANDS = {"corrmap": cmd_corrmap, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "infer": cmd_infer, "metrics": cmd_metrics, "flow": cmd_flow}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        # ShapeError, ParameterError, ConfigurationError and FormatError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
