"""Preset comparison on synthetic data: train A/B/C, sweep PR curves, write a report."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import evalkit
from .cli import evaluate, write_eval
from .labels import CHANNELS
from .synth import SynthSpec, generate_pair, pair_seed, procedural_bank, procedural_bases
from .train import TrainConfig, fit
from .unet import build, forward, param_count, preset

log = logging.getLogger(__name__)


@dataclass
class TrendSetup:
    size: tuple[int, int] = (32, 64)
    train_pairs: int = 16
    eval_pairs: int = 200
    epochs: int = 5
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    presets: tuple[str, ...] = ("A", "B", "C")


def synthetic_set(n, size, seed, n_bases=8, n_sprites=12):
    h, w = size
    smallest = max(4, min(h, w) // 6)
    bases = procedural_bases(n_bases, h, w, seed=seed)
    bank = procedural_bank(n_sprites, (smallest, 2 * smallest), seed=seed + 1)
    spec = SynthSpec(seed=seed)
    return [generate_pair(bases[i % n_bases], bank, spec, pair_seed(seed, i), i % n_sprites)
            for i in range(n)]


def area_under(points) -> float:
    """Trapezoid area under precision over recall, used only as a ranking summary."""
    pts = sorted((p.recall, p.precision) for p in points)
    return sum((r1 - r0) * (p0 + p1) / 2 for (r0, p0), (r1, p1) in zip(pts, pts[1:]))


def trend_report(out_dir, setup: TrendSetup = TrendSetup()) -> dict:
    out_dir = Path(out_dir)
    train = synthetic_set(setup.train_pairs, setup.size, setup.seed)
    test = synthetic_set(setup.eval_pairs, setup.size, setup.seed + 1000)
    report = {"setup": {k: list(v) if isinstance(v, tuple) else v
                        for k, v in vars(setup).items()}, "presets": {}}
    for name in setup.presets:
        model = build(preset(name, input_size=setup.size), setup.seed)
        cfg = TrainConfig(lr=setup.lr, epochs=setup.epochs, batch_size=setup.batch_size,
                          seed=setup.seed)
        history = fit(model, train, cfg)
        curve, summary = evaluate(lambda pairs: forward(model, pairs), test, setup.size,
                                  evalkit.DEFAULT_THRESHOLDS)
        write_eval(curve, summary, out_dir / name, f"preset {name}")
        report["presets"][name] = {
            "param_count": param_count(model),
            "final_train_loss": history.losses[-1],
            "area": {c: area_under(curve.points[c]) for c in CHANNELS},
            "at_0.5": {c: dict(zip(("precision", "recall", "accuracy"), summary[c]))
                       for c in CHANNELS},
        }
        log.info("preset %s done", name)
    report["best_by_area"] = {
        c: max(report["presets"], key=lambda p: report["presets"][p]["area"][c]) for c in CHANNELS}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report
