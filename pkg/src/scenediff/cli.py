"""Command line: ``scenediff {synth,train,infer,eval}``.

Option precedence is flag > ``--config`` file > built-in default.  Every
failure exits with status 1 and a single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

from . import __version__, evalkit
from .labels import (CHANNELS, ChangeMaps, DatasetError, ImagePair, LabelError, load_dataset,
                     read_rgb, resize_bilinear, resize_nearest, resize_pair, save_maps)
from .synth import SynthError, SynthSpec, generate_dataset, load_bank, load_bases
from .tensor import ShapeError
from .train import TrainConfig, fit
from .unet import (FULL_SIZE, CheckpointError, UNetConfig, binarize, build, forward,
                   load_checkpoint, preset)

CONFIG_SECTIONS = {"synth", "model", "train"}
MODEL_KEYS = {"preset", "input_size", "use_skip"}


class CLIError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise CLIError("config file must hold a JSON object")
    unknown = set(doc) - CONFIG_SECTIONS
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(sorted(unknown))}")
    bad = set(doc.get("model", {})) - MODEL_KEYS
    if bad:
        raise CLIError(f"unknown model keys: {', '.join(sorted(bad))}")
    return doc


def parse_size(text) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise CLIError(f"size must look like HxW, got {text!r}") from None
    return h, w


def parse_thresholds(text) -> list[float]:
    if text is None:
        return list(evalkit.DEFAULT_THRESHOLDS)
    if text.startswith("step:"):
        step = float(text[5:])
        n = int(round(1 / step))
        return [round(i * step, 10) for i in range(n + 1)]
    return [float(v) for v in text.split(",")]


def _require_dir(path, what):
    if path is None:
        raise CLIError(f"--{what} is required")
    if not Path(path).is_dir():
        raise CLIError(f"{what} directory not found: {path}")
    return Path(path)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    spec_dict = dict(cfg.get("synth", {}))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    bases = load_bases(_require_dir(args.bases, "bases"))
    bank = load_bank(_require_dir(args.bank, "bank"))
    manifest = generate_dataset(bases, bank, spec, args.count, args.out)
    print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")
    return 0


def model_config(args, cfg) -> UNetConfig:
    m = cfg.get("model", {})
    name = args.preset or m.get("preset")
    if name is None:
        raise CLIError("--preset is required (A, B or C)")
    size = parse_size(args.size) if args.size else tuple(m.get("input_size", FULL_SIZE))
    try:
        return preset(name, input_size=size, use_skip=m.get("use_skip", True))
    except KeyError as e:
        raise CLIError(e.args[0]) from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    mcfg = model_config(args, cfg)
    t = dict(cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch", "batch_size"),
                      ("seed", "seed"), ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag) is not None:
            t[key] = getattr(args, flag)
    tcfg = TrainConfig.from_dict(t)
    data = load_dataset(_require_dir(args.data, "data"), args.from_labels)
    if not data:
        raise CLIError(f"no pairs in {args.data}")
    val = load_dataset(_require_dir(args.val_root, "val-root"), args.from_labels) \
        if args.val_root else None
    model = build(mcfg, tcfg.seed)
    history = fit(model, data, tcfg, args.out, val=val)
    print(f"trained preset {mcfg.preset} for {len(history)} epochs, "
          f"final loss {history.losses[-1]:.6f}")
    return 0


def outline(mask: np.ndarray, width: int = 2) -> np.ndarray:
    mask = mask.astype(bool)
    return mask & ~binary_erosion(mask, iterations=width, border_value=0)


def overlay(pair: ImagePair, maps: ChangeMaps) -> np.ndarray:
    """Before image with removed outlined (red) above after image with added outlined (green)."""
    top = pair.before.copy()
    bottom = pair.after.copy()
    top[outline(maps.removed)] = (1.0, 0.0, 0.0)
    bottom[outline(maps.added)] = (0.0, 1.0, 0.0)
    return np.concatenate([top, bottom], axis=0)


def infer_maps(model, pair: ImagePair, threshold: float) -> ChangeMaps:
    h, w = model.config.input_size
    src = pair.size
    if src != (h, w):
        pair = ImagePair(resize_bilinear(pair.before, h, w), resize_bilinear(pair.after, h, w), pair.id)
    hit = (forward(model, pair)[0] >= threshold).astype(np.uint8)
    r, a, c = (resize_nearest(m, *src) for m in hit[:3])
    return ChangeMaps.from_masks(r, a, c)


def cmd_infer(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise CLIError(f"threshold must be in [0, 1], got {args.threshold}")
    model = load_checkpoint(args.ckpt)
    before, after = read_rgb(args.before), read_rgb(args.after)
    if before.shape != after.shape:
        raise CLIError(f"image sizes differ: {before.shape[:2]} vs {after.shape[:2]}")
    pair = ImagePair(before, after, "infer")
    maps = infer_maps(model, pair, args.threshold)
    out = Path(args.out)
    save_maps(maps, out)
    img = np.clip(np.rint(overlay(pair, maps) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(out / "overlay.png", format="PNG")
    counts = {n: int(m.sum()) for n, m in zip(CHANNELS, maps)}
    print(json.dumps(counts))
    return 0


def evaluate(score_fn, dataset, size, thresholds, summary_threshold=0.5, batch_size=8):
    """Sweep thresholds over a dataset; ``score_fn(pairs) -> (n, 4, h, w)`` scores.

    Returns the PR curve and per-channel metrics at ``summary_threshold``.
    """
    acc = evalkit.SweepAccumulator(thresholds)
    summary = [evalkit.ConfusionCounts()] * 4
    for i in range(0, len(dataset), batch_size):
        chunk = [resize_pair(p, m, *size) for p, m in dataset[i:i + batch_size]]
        pairs = [p for p, _ in chunk]
        gt = np.stack([m.stack() for _, m in chunk])
        scores = score_fn(pairs)
        acc.update(scores, gt)
        pred = np.stack([m.stack() for m in binarize(scores, summary_threshold)])
        summary = [a + b for a, b in zip(summary, evalkit.confusion_stack(pred, gt))]
    return acc.curve(), {n: evalkit.metrics(c) for n, c in zip(CHANNELS, summary)}


def write_eval(curve, summary, out, title="precision-recall"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.emit_csv(curve, out / "pr.csv")
    evalkit.emit_svg(curve, out / "pr.svg", title)
    (out / "summary.json").write_text(json.dumps(
        {n: dict(zip(("precision", "recall", "accuracy"), v)) for n, v in summary.items()},
        indent=2) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    thresholds = parse_thresholds(args.thresholds)
    model = load_checkpoint(args.ckpt)
    data = load_dataset(_require_dir(args.data, "data"), args.from_labels)
    if not data:
        raise CLIError(f"no pairs in {args.data}")
    curve, summary = evaluate(lambda pairs: forward(model, pairs), data,
                              model.config.input_size, thresholds)
    write_eval(curve, summary, args.out, f"preset {model.config.preset or '?'}")
    print("channel,precision,recall,accuracy @0.5")
    for name, (p, r, a) in summary.items():
        print(f"{name},{p:.6f},{r:.6f},{a:.6f}")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="scenediff", description="Scene change maps from registered image pairs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--version", action="version", version=f"scenediff {__version__}")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic labelled dataset")
    p.add_argument("--bases", required=True, help="dataset root or folder of scene images")
    p.add_argument("--bank", required=True, help="folder of RGBA sprite PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")

    p = add("train", cmd_train, "train a change-map network")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", help="A, B or C")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", help="network input HxW (default 256x512)")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--val-root", dest="val_root")
    p.add_argument("--from-labels", action="store_true", dest="from_labels",
                   help="rasterize labels.json even when map PNGs exist")
    p.add_argument("--config")

    p = add("infer", cmd_infer, "predict change maps for one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("eval", cmd_eval, "precision-recall evaluation over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", help="comma list or step:<s> (default step:0.05)")
    p.add_argument("--from-labels", action="store_true", dest="from_labels")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as e:  # --help, --version and usage errors
        return e.code if isinstance(e.code, int) else 1
    try:
        return args.func(args)
    except (CLIError, DatasetError, LabelError, SynthError, CheckpointError, ShapeError,
            ValueError, KeyError, OSError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
