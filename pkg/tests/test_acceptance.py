"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import json
import time
import xml.etree.ElementTree as ET
from contextlib import contextmanager

import numpy as np
import pytest

from scenediff import evalkit
from scenediff.experiments import TrendSetup, trend_report
from scenediff.labels import (CHANNELS, ChangeMaps, PolygonLabel, load_dataset,
                              load_maps, rasterize, save_maps, save_pair)
from scenediff.synth import (SynthSpec, generate_dataset, generate_pair, pair_seed,
                             procedural_bank, procedural_bases)
from scenediff.tensor import (BatchNorm2d, Conv2d, ConvTranspose2d, ReLU, Sigmoid,
                              finite_diff_check, mse_loss)
from scenediff.train import TrainConfig, fit
from scenediff.unet import (CheckpointError, UNetConfig, build, load_checkpoint, param_count,
                            predict, preset, save_checkpoint)


@contextmanager
def criterion(capsys, number, title):
    start = time.perf_counter()
    try:
        yield
    except BaseException as e:
        reason = str(e).strip().splitlines()[0][:120] if str(e).strip() else type(e).__name__
        with capsys.disabled():
            print(f"\nFAIL criterion {number}: {title} ({reason})")
        raise
    with capsys.disabled():
        print(f"\nPASS criterion {number}: {title} ({time.perf_counter() - start:.1f}s)")


# ---------------------------------------------------------------------------
# independent oracles


def point_in_polygon(px, py, pts):
    inside = False
    j = len(pts) - 1
    for i in range(len(pts)):
        xi, yi = pts[i]
        xj, yj = pts[j]
        if (yi > py) != (yj > py) and px < (xj - xi) * (py - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


def count_oracle(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def metrics_oracle(tp, fp, tn, fn):
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall, (tp + tn) / (tp + fp + tn + fn)


def away_from_zero(rng, shape):
    # keeps ReLU inputs off its kink, where central differences are meaningless
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 2.0, shape)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------


def test_criterion_1_gradients(capsys):
    with criterion(capsys, 1, "finite-difference gradients, layers < 1e-3, tiny net < 2e-3, < 30 s"):
        start = time.perf_counter()
        rng = np.random.default_rng(100)
        cases = {
            "conv k3 s1": (Conv2d(3, 2, 3, 1, rng=rng), rng.standard_normal((2, 3, 6, 6)), 1e-3),
            "conv k3 s2": (Conv2d(3, 2, 3, 2, rng=rng), rng.standard_normal((2, 3, 6, 6)), 1e-3),
            "tconv k2 s2": (ConvTranspose2d(3, 2, 2, rng=rng), rng.standard_normal((2, 3, 3, 3)), 1e-3),
            "tconv k4 s2": (ConvTranspose2d(3, 2, 4, rng=rng), rng.standard_normal((2, 3, 3, 3)), 1e-3),
            "batchnorm train": (BatchNorm2d(3).train(), rng.standard_normal((2, 3, 6, 6)), 1e-3),
            "batchnorm eval": (BatchNorm2d(3).eval(), rng.standard_normal((2, 3, 6, 6)), 1e-3),
            "relu": (ReLU(), away_from_zero(rng, (2, 3, 6, 6)), 1e-3),
            "sigmoid": (Sigmoid(), rng.standard_normal((2, 3, 6, 6)), 1e-3),
        }
        errors = {name: finite_diff_check(layer, x, eps=eps).max_error
                  for name, (layer, x, eps) in cases.items()}

        pred, target = rng.random((2, 3, 6, 6)), rng.random((2, 3, 6, 6))
        _, grad = mse_loss(pred, target)
        num = np.zeros_like(pred)
        h = 1e-6
        for i in range(pred.size):
            d = np.zeros(pred.size)
            d[i] = h
            d = d.reshape(pred.shape)
            num.flat[i] = (mse_loss(pred + d, target)[0] - mse_loss(pred - d, target)[0]) / (2 * h)
        errors["mse loss"] = float(np.max(np.abs(grad - num) / np.maximum(np.abs(num), 1e-6)))

        model = build(UNetConfig((4, 8), input_size=(8, 8)), 0).train()
        x = rng.random((2, 6, 8, 8))
        y = (rng.random((2, 4, 8, 8)) > 0.5).astype(float)
        net_error = finite_diff_check(model, x, eps=1e-5, loss=lambda out: mse_loss(out, y)).max_error
        elapsed = time.perf_counter() - start

        for name, err in errors.items():
            assert err < 1e-3, f"{name}: relative error {err:.2e}"
        assert net_error < 2e-3, f"tiny UNet: relative error {net_error:.2e}"
        assert elapsed < 30, f"took {elapsed:.1f}s"


def test_criterion_2_rasterizer(capsys):
    with criterion(capsys, 2, "rasterizer equals even-odd oracle on 200 random polygons"):
        rng = np.random.default_rng(200)
        for n in range(200):
            h, w = (int(v) for v in rng.integers(1, 33, 2))
            k = int(rng.integers(3, 13))
            if n % 4 == 0:  # integer vertices, edges through pixel boundaries
                pts = np.column_stack([rng.integers(0, w + 1, k), rng.integers(0, h + 1, k)]).astype(float)
            else:
                pts = np.column_stack([rng.uniform(0, w, k), rng.uniform(0, h, k)])
            got = rasterize([PolygonLabel("added", pts)], h, w).added.astype(bool)
            plist = [tuple(p) for p in pts.tolist()]
            want = np.array([[point_in_polygon(c + 0.5, r + 0.5, plist) for c in range(w)]
                             for r in range(h)], bool).reshape(h, w)
            assert np.array_equal(got, want), f"polygon {n} ({h}x{w}, {k} vertices) differs"


def test_criterion_3_synthesis(capsys, tmp_path):
    with criterion(capsys, 3, "100 synthetic pairs: AND rule, complement, binarity, replay"):
        bases = procedural_bases(4, 32, 48, seed=30)
        bank = procedural_bank(6, (6, 14), seed=31)
        spec = SynthSpec(seed=32, change_overlap_prob=0.5)
        for i in range(100):
            pair, maps = generate_pair(bases[i % 4], bank, spec, pair_seed(32, i), i % 6)
            r, a, c, nc = (m.astype(np.int64) for m in maps)
            for m in (r, a, c, nc):
                assert set(np.unique(m).tolist()) <= {0, 1}
            assert np.array_equal(c, r & a), f"pair {i}: changed != removed AND added"
            assert np.array_equal(nc, 1 - (r | a | c)), f"pair {i}: notchanged is not the complement"
            again_pair, again_maps = generate_pair(bases[i % 4], bank, spec, pair_seed(32, i), i % 6)
            assert again_pair.before.tobytes() == pair.before.tobytes()
            assert again_pair.after.tobytes() == pair.after.tobytes()
            assert again_maps.stack().tobytes() == maps.stack().tobytes()
        generate_dataset(bases, bank, spec, 100, tmp_path / "a")
        generate_dataset(bases, bank, spec, 100, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b"), "dataset replay differs"


@pytest.mark.slow
def test_criterion_4_overfit(capsys):
    with criterion(capsys, 4, "preset B overfits 4 pairs at 64x128: MSE < 0.02 in 300 steps, "
                              "accuracy >= 0.99, < 10 min"):
        start = time.perf_counter()
        bases = procedural_bases(4, 64, 128, seed=1)
        bank = procedural_bank(8, seed=2)
        spec = SynthSpec(seed=3)
        data = [generate_pair(bases[i], bank, spec, pair_seed(3, i), i % 8) for i in range(4)]
        model = build(preset("B", input_size=(64, 128)), 0)
        # 4 pairs with batch 4 is one step per epoch
        history = fit(model, data, TrainConfig(lr=1e-3, epochs=300, batch_size=4, seed=0))
        preds = predict(model, [p for p, _ in data], 0.5)
        accuracy = float(np.mean([(pr.stack() == gt.stack()).mean() for pr, (_, gt) in zip(preds, data)]))
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"\n  final loss {history.losses[-1]:.5f}, pixel accuracy {accuracy:.4f}, "
                  f"{elapsed:.0f}s")
        assert len(history) == 300
        assert min(history.losses) < 0.02, f"best loss {min(history.losses):.4f}"
        assert history.losses[-1] < 0.02, f"final loss {history.losses[-1]:.4f}"
        assert accuracy >= 0.99, f"pixel accuracy {accuracy:.4f}"
        assert elapsed < 600, f"took {elapsed:.0f}s"


def test_criterion_5_metrics(capsys):
    with criterion(capsys, 5, "confusion, metrics and PR sweep equal counting oracles on 100 pairs"):
        rng = np.random.default_rng(500)
        thresholds = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
        for n in range(100):
            h, w = (int(v) for v in rng.integers(1, 12, 2))
            gt = ChangeMaps.from_masks(*(rng.random((3, h, w)) < rng.random()))
            scores = rng.random((4, h, w))
            pred = ChangeMaps.from_masks(*(scores[:3] >= 0.5))
            for got, p, g in zip(evalkit.confusion(pred, gt), pred, gt):
                want = count_oracle(p, g)
                assert (got.tp, got.fp, got.tn, got.fn) == want, f"pair {n}"
                assert evalkit.metrics(got) == metrics_oracle(*want), f"pair {n}"
            curve = evalkit.pr_sweep(scores, gt, thresholds)
            for k, name in enumerate(CHANNELS):
                for t, point in zip(thresholds, curve.points[name]):
                    want = metrics_oracle(*count_oracle(scores[k] >= t, gt.stack()[k]))
                    assert (point.precision, point.recall, point.accuracy) == want, f"pair {n} {name} @{t}"
        empty = evalkit.confusion(ChangeMaps.empty(3, 3), ChangeMaps.empty(3, 3))[0]
        assert evalkit.metrics(empty) == (1.0, 1.0, 1.0)
        assert evalkit.metrics(evalkit.ConfusionCounts(tn=3, fn=1))[0] == 1.0
        assert evalkit.metrics(evalkit.ConfusionCounts(tn=3, fp=1))[1] == 1.0


def test_criterion_6_formats(capsys, tmp_path):
    with criterion(capsys, 6, "maps, checkpoints and dataset dirs round-trip; corrupt checkpoints rejected"):
        rng = np.random.default_rng(600)
        for n in range(20):
            h, w = (int(v) for v in rng.integers(1, 40, 2))
            maps = ChangeMaps.from_masks(*(rng.random((3, h, w)) < 0.3))
            save_maps(maps, tmp_path / "m" / str(n))
            back = load_maps(tmp_path / "m" / str(n))
            assert back.stack().tobytes() == maps.stack().tobytes()
            save_maps(back, tmp_path / "m2" / str(n))
        assert tree_bytes(tmp_path / "m") == tree_bytes(tmp_path / "m2")

        model = build(UNetConfig((4, 8), input_size=(8, 8)), 6).train()
        model.forward(rng.random((2, 6, 8, 8)).astype(np.float32))
        save_checkpoint(model, tmp_path / "a.sdck")
        loaded = load_checkpoint(tmp_path / "a.sdck")
        assert loaded.config == model.config
        for x, y in zip(model.state_arrays(), loaded.state_arrays()):
            assert x.tobytes() == y.tobytes()
        save_checkpoint(loaded, tmp_path / "b.sdck")
        data = (tmp_path / "a.sdck").read_bytes()
        assert data == (tmp_path / "b.sdck").read_bytes()

        header_len = int.from_bytes(data[8:12], "little")
        corruptions = {
            "magic": b"SDCX" + data[4:],
            "version": data[:4] + (7).to_bytes(4, "little") + data[8:],
            "truncated blob": data[:-3],
            "truncated header": data[:10],
            "trailing bytes": data + b"\x00",
            "header length": data[:8] + (header_len + 5).to_bytes(4, "little") + data[12:],
            "header json": data[:12] + b"{" * header_len + data[12 + header_len:],
            "empty": b"",
        }
        for name, blob in corruptions.items():
            (tmp_path / "bad.sdck").write_bytes(blob)
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "bad.sdck")

        bases = procedural_bases(2, 16, 24, seed=60)
        bank = procedural_bank(3, (4, 8), seed=61)
        generate_dataset(bases, bank, SynthSpec(seed=62), 5, tmp_path / "ds")
        for pair, maps in load_dataset(tmp_path / "ds"):
            save_pair(pair, maps, tmp_path / "ds2" / "pairs" / pair.id)
        original = {k: v for k, v in tree_bytes(tmp_path / "ds").items() if k.startswith("pairs")}
        assert original == tree_bytes(tmp_path / "ds2")


def test_criterion_7_architecture(capsys):
    with criterion(capsys, 7, "presets A/B/C widths, B < C < A parameters, 4-channel full-size output"):
        widths = {"A": (16, 32, 64, 128, 256), "B": (16, 32, 64), "C": (16, 32, 64, 128)}
        counts = {}
        for name, w in widths.items():
            cfg = preset(name)
            assert cfg.encoder_widths == w
            assert cfg.input_size == (256, 512)
            model = build(cfg, 0)
            counts[name] = param_count(model)
            out = model.eval().forward(np.random.default_rng(7).random((1, 6, 256, 512), np.float32))
            assert out.shape == (1, 4, 256, 512), f"preset {name} output {out.shape}"
        assert counts["B"] < counts["C"] < counts["A"], str(counts)
        with capsys.disabled():
            print(f"\n  parameter counts {counts}")


@pytest.mark.slow
def test_criterion_8_trend_report(capsys, tmp_path):
    with criterion(capsys, 8, "per-preset PR report on 200 synthetic eval pairs is well-formed"):
        setup = TrendSetup()
        assert setup.eval_pairs == 200
        report = trend_report(tmp_path, setup)
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk["best_by_area"] == report["best_by_area"]
        assert set(on_disk["presets"]) == {"A", "B", "C"}
        for name, entry in on_disk["presets"].items():
            lines = (tmp_path / name / "pr.csv").read_text().splitlines()
            assert lines[1] == evalkit.CSV_HEADER
            assert len(lines) - 2 == 4 * len(evalkit.DEFAULT_THRESHOLDS)
            for row in lines[2:]:
                channel, _, *values = row.split(",")
                assert channel in CHANNELS
                assert all(0.0 <= float(v) <= 1.0 for v in values)
            ET.parse(tmp_path / name / "pr.svg")
            assert set(entry["area"]) == set(CHANNELS)
            assert all(0.0 <= v <= 1.0 for v in entry["area"].values())
            assert np.isfinite(entry["final_train_loss"])
        assert set(on_disk["best_by_area"].values()) <= {"A", "B", "C"}
        with capsys.disabled():
            print(f"\n  best preset by PR area per channel (non-binding): {on_disk['best_by_area']}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
