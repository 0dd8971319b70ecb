"""Image pairs, polygon annotations and the four binary change maps.

Dataset layout on disk::

    <root>/pairs/<id>/before.png
    <root>/pairs/<id>/after.png
    <root>/pairs/<id>/labels.json                      (optional)
    <root>/pairs/<id>/{removed,added,changed,notchanged}.png  (optional)

Stored map PNGs take precedence over ``labels.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CHANNELS = ("removed", "added", "changed", "notchanged")
LABEL_CLASSES = CHANNELS[:3]
LABELS_VERSION = 1


class LabelError(ValueError):
    """Invalid annotation content."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class DatasetError(ValueError):
    """Missing or inconsistent files in a pair directory."""

    def __init__(self, message, path=None):
        self.path = None if path is None else str(path)
        super().__init__(message if path is None else f"{message}: {path}")


@dataclass
class ImagePair:
    before: np.ndarray  # (H, W, 3) float32 in [0, 1]
    after: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.before.shape != self.after.shape:
            raise DatasetError(f"before {self.before.shape} and after {self.after.shape} differ in size")
        if self.before.ndim != 3 or self.before.shape[2] != 3:
            raise DatasetError(f"images must be (H, W, 3), got {self.before.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.before.shape[:2]


@dataclass
class PolygonLabel:
    cls: str
    points: np.ndarray  # (k, 2) of (x, y)


@dataclass
class ChangeMaps:
    """Binary ``uint8`` maps in channel order removed, added, changed, notchanged."""

    removed: np.ndarray
    added: np.ndarray
    changed: np.ndarray
    notchanged: np.ndarray

    @classmethod
    def from_masks(cls, removed, added, changed) -> "ChangeMaps":
        removed, added, changed = (np.asarray(m).astype(np.uint8) for m in (removed, added, changed))
        notchanged = (1 - (removed | added | changed)).astype(np.uint8)
        return cls(removed, added, changed, notchanged)

    @classmethod
    def empty(cls, h, w) -> "ChangeMaps":
        z = np.zeros((h, w), np.uint8)
        return cls.from_masks(z, z, z)

    @classmethod
    def from_stack(cls, stack) -> "ChangeMaps":
        stack = np.asarray(stack)
        return cls(*(stack[i].astype(np.uint8) for i in range(4)))

    def stack(self) -> np.ndarray:
        return np.stack([self.removed, self.added, self.changed, self.notchanged])

    @property
    def shape(self):
        return self.removed.shape

    def __iter__(self):
        return iter((self.removed, self.added, self.changed, self.notchanged))

    def __eq__(self, other):
        return isinstance(other, ChangeMaps) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self, other))

    def validate(self) -> "ChangeMaps":
        shapes = {m.shape for m in self}
        if len(shapes) != 1:
            raise DatasetError(f"change maps disagree in shape: {sorted(shapes)}")
        for name, m in zip(CHANNELS, self):
            if not np.isin(m, (0, 1)).all():
                raise DatasetError(f"{name} map is not binary")
        union = self.removed | self.added | self.changed
        if not np.array_equal(self.notchanged, 1 - union):
            raise DatasetError("notchanged is not the complement of removed|added|changed")
        return self


# ---------------------------------------------------------------------------
# annotations


def _polygon(entry, i, h, w) -> PolygonLabel:
    if not isinstance(entry, dict) or "class" not in entry or "points" not in entry:
        raise LabelError(f"label {i}: expected an object with 'class' and 'points'", i)
    cls = entry["class"]
    if cls not in LABEL_CLASSES:
        raise LabelError(f"label {i}: unknown class {cls!r} (expected one of {', '.join(LABEL_CLASSES)})", i)
    try:
        pts = np.asarray(entry["points"], dtype=np.float64)
    except (TypeError, ValueError):
        raise LabelError(f"label {i}: points must be [[x, y], ...]", i) from None
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise LabelError(f"label {i}: points must be [[x, y], ...]", i)
    if len(pts) < 3:
        raise LabelError(f"label {i}: polygon needs at least 3 points, got {len(pts)}", i)
    if not np.isfinite(pts).all():
        raise LabelError(f"label {i}: non-finite coordinate", i)
    if h is not None and w is not None:
        bad = np.nonzero((pts[:, 0] < 0) | (pts[:, 0] > w) | (pts[:, 1] < 0) | (pts[:, 1] > h))[0]
        if len(bad):
            j = int(bad[0])
            raise LabelError(f"label {i}: point {j} {tuple(pts[j])} outside the {w}x{h} frame", i)
    return PolygonLabel(cls, pts)


def parse_labels(text: str, h: int | None = None, w: int | None = None) -> list[PolygonLabel]:
    """Parse ``labels.json`` content; bounds are checked when ``h, w`` are given."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise LabelError(f"labels file is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("labels"), list):
        raise LabelError("labels file must be an object with a 'labels' list")
    version = doc.get("version", LABELS_VERSION)
    if version != LABELS_VERSION:
        raise LabelError(f"unsupported labels version {version!r}")
    return [_polygon(e, i, h, w) for i, e in enumerate(doc["labels"])]


def dump_labels(labels) -> str:
    return json.dumps({"version": LABELS_VERSION,
                       "labels": [{"class": l.cls, "points": np.asarray(l.points).tolist()}
                                  for l in labels]})


def polygon_mask(points, h: int, w: int) -> np.ndarray:
    """Even-odd fill sampled at pixel centres ``(col + .5, row + .5)``."""
    pts = np.asarray(points, dtype=np.float64)
    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    inside = np.zeros((h, w), dtype=bool)
    for (x1, y1), (x2, y2) in zip(pts, np.roll(pts, -1, axis=0)):
        rows = (y1 > py) != (y2 > py)
        if not rows.any():
            continue
        # x where the edge crosses each row's centre line
        xc = x1 + (py[rows] - y1) * (x2 - x1) / (y2 - y1)
        inside[rows] ^= px[None, :] < xc[:, None]
    return inside


def rasterize(labels, h: int, w: int) -> ChangeMaps:
    if h < 1 or w < 1:
        raise ValueError(f"raster size must be positive, got {h}x{w}")
    masks = {c: np.zeros((h, w), dtype=bool) for c in LABEL_CLASSES}
    for label in labels:
        masks[label.cls] |= polygon_mask(label.points, h, w)
    return ChangeMaps.from_masks(*(masks[c] for c in LABEL_CLASSES))


# ---------------------------------------------------------------------------
# image and map I/O


def read_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError("missing file", path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_rgb(img: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def save_maps(maps: ChangeMaps, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, m in zip(CHANNELS, maps):
        Image.fromarray((np.asarray(m, np.uint8) * 255).astype(np.uint8), "L").save(
            directory / f"{name}.png", format="PNG")


def load_maps(directory) -> ChangeMaps:
    directory = Path(directory)
    out = []
    for name in CHANNELS:
        path = directory / f"{name}.png"
        if not path.is_file():
            raise DatasetError("missing file", path)
        with Image.open(path) as im:
            out.append((np.asarray(im.convert("L")) >= 128).astype(np.uint8))
    return ChangeMaps(*out)


def has_maps(directory) -> bool:
    return all((Path(directory) / f"{n}.png").is_file() for n in CHANNELS)


def load_pair(directory, prefer_labels: bool = False) -> tuple[ImagePair, ChangeMaps]:
    """Load one pair directory; map PNGs win over labels.json unless ``prefer_labels``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError("missing pair directory", directory)
    pair = ImagePair(read_rgb(directory / "before.png"), read_rgb(directory / "after.png"),
                     directory.name)
    h, w = pair.size
    labels_path = directory / "labels.json"
    if has_maps(directory) and not (prefer_labels and labels_path.is_file()):
        maps = load_maps(directory)
    elif labels_path.is_file():
        maps = rasterize(parse_labels(labels_path.read_text(encoding="utf-8"), h, w), h, w)
    else:
        raise DatasetError("no labels.json or map PNGs", directory)
    if maps.shape != (h, w):
        raise DatasetError(f"maps {maps.shape} do not match images {(h, w)}", directory)
    return pair, maps.validate()


def save_pair(pair: ImagePair, maps: ChangeMaps | None, directory, labels=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_rgb(pair.before, directory / "before.png")
    write_rgb(pair.after, directory / "after.png")
    if labels is not None:
        (directory / "labels.json").write_text(dump_labels(labels), encoding="utf-8")
    if maps is not None:
        save_maps(maps, directory)


def list_pairs(root) -> list[Path]:
    root = Path(root)
    pairs = root / "pairs"
    if not pairs.is_dir():
        raise DatasetError("not a dataset root (no pairs/ directory)", root)
    return sorted((p for p in pairs.iterdir() if p.is_dir()), key=lambda p: p.name)


def load_dataset(root, prefer_labels: bool = False) -> list[tuple[ImagePair, ChangeMaps]]:
    return [load_pair(d, prefer_labels) for d in list_pairs(root)]


# ---------------------------------------------------------------------------
# resizing


def _src_coords(n_out, n_in):
    # half-pixel centres, clamped at the border
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0, n_in - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (s - i0).astype(np.float32)


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    y0, y1, wy = _src_coords(h, img.shape[0])
    x0, x1, wx = _src_coords(w, img.shape[1])
    extra = (None,) * (img.ndim - 2)
    wy = wy[(slice(None), None, *extra)]
    wx = wx[(None, slice(None), *extra)]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype, copy=False)


def resize_nearest(m: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum(((np.arange(h) + 0.5) * m.shape[0] / h).astype(np.intp), m.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * m.shape[1] / w).astype(np.intp), m.shape[1] - 1)
    return m[rows][:, cols]


def resize_pair(pair: ImagePair, maps: ChangeMaps, h: int, w: int) -> tuple[ImagePair, ChangeMaps]:
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    out = ImagePair(resize_bilinear(pair.before, h, w), resize_bilinear(pair.after, h, w), pair.id)
    r, a, c = (resize_nearest(m, h, w) for m in (maps.removed, maps.added, maps.changed))
    return out, ChangeMaps.from_masks(r, a, c)
