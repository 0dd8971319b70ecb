"""Synthetic change pairs: paste object sprites into static scenes.

A sprite pasted into the *before* image marks the ``removed`` map over its
footprint, one pasted into the *after* image marks ``added``, and
``changed`` is their pixelwise AND.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .labels import (ChangeMaps, DatasetError, ImagePair, list_pairs, read_rgb, save_pair,
                     write_rgb)

SEED_MASK = (1 << 64) - 1
MAX_PLACEMENT_ATTEMPTS = 100
MIN_VISIBLE_FRACTION = 0.25
FOOTPRINT_ALPHA = 0.5


class SynthError(ValueError):
    pass


@dataclass
class ObjectSprite:
    rgb: np.ndarray  # (h, w, 3) in [0, 1]
    alpha: np.ndarray  # (h, w) in [0, 1]
    name: str = ""

    def __post_init__(self):
        if self.rgb.shape[:2] != self.alpha.shape or self.rgb.ndim != 3:
            raise SynthError(f"sprite {self.name!r}: rgb {self.rgb.shape} and alpha "
                             f"{self.alpha.shape} differ")
        if self.alpha.size and (self.alpha.min() < 0 or self.alpha.max() > 1):
            raise SynthError(f"sprite {self.name!r}: alpha outside [0, 1]")

    @property
    def shape(self):
        return self.alpha.shape


@dataclass
class SynthSpec:
    seed: int = 0
    objects_per_pair: tuple[int, int] = (1, 3)
    brightness_range: tuple[float, float] = (0.7, 1.3)
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    feather_radius: int = 2
    change_overlap_prob: float = 0.2

    def __post_init__(self):
        for name in ("objects_per_pair", "brightness_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (lo, hi))
            if lo > hi:
                raise SynthError(f"{name}: low {lo} exceeds high {hi}")
        if self.objects_per_pair[0] < 0:
            raise SynthError("objects_per_pair must be non-negative")
        if self.brightness_range[0] <= 0:
            raise SynthError("brightness must be positive")
        if self.noise_sigma_range[0] < 0:
            raise SynthError("noise sigma must be non-negative")
        if self.feather_radius < 0:
            raise SynthError("feather_radius must be non-negative")
        if not 0.0 <= self.change_overlap_prob <= 1.0:
            raise SynthError("change_overlap_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthError(f"unknown synth keys: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def augment_sprite(s: ObjectSprite, brightness: float, noise_sigma: float, feather: int,
                   rng: np.random.Generator) -> ObjectSprite:
    if brightness <= 0:
        raise SynthError(f"brightness must be positive, got {brightness}")
    rgb = np.clip(s.rgb * brightness, 0.0, 1.0)
    if noise_sigma > 0:
        inside = (s.alpha > 0)[..., None]
        noise = rng.normal(0.0, noise_sigma, size=rgb.shape)
        rgb = np.clip(rgb + noise * inside, 0.0, 1.0)
    alpha = s.alpha
    if feather > 0:
        alpha = np.clip(uniform_filter(alpha.astype(np.float64), size=2 * feather + 1,
                                       mode="constant"), 0.0, 1.0)
    return ObjectSprite(rgb.astype(np.float32), alpha.astype(np.float32), s.name)


def _clip_box(img_shape, sprite_shape, x, y):
    H, W = img_shape[:2]
    h, w = sprite_shape
    x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
    return x0, y0, x1, y1


def paste(img: np.ndarray, s: ObjectSprite, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-composite ``s`` with its top-left corner at ``(x, y)``.

    Returns the new image and the in-frame footprint (alpha >= 0.5).
    """
    x0, y0, x1, y1 = _clip_box(img.shape, s.shape, x, y)
    if x0 >= x1 or y0 >= y1:
        raise SynthError(f"sprite {s.name!r} at ({x}, {y}) lies entirely outside the frame")
    out = img.copy()
    footprint = np.zeros(img.shape[:2], dtype=np.uint8)
    a = s.alpha[y0 - y:y1 - y, x0 - x:x1 - x][..., None]
    rgb = s.rgb[y0 - y:y1 - y, x0 - x:x1 - x]
    out[y0:y1, x0:x1] = a * rgb + (1 - a) * img[y0:y1, x0:x1]
    footprint[y0:y1, x0:x1] = a[..., 0] >= FOOTPRINT_ALPHA
    return out, footprint


def _visible_fraction(img_shape, sprite_shape, x, y):
    x0, y0, x1, y1 = _clip_box(img_shape, sprite_shape, x, y)
    return max(x1 - x0, 0) * max(y1 - y0, 0) / (sprite_shape[0] * sprite_shape[1])


def _place(rng, img_shape, sprite_shape, name=""):
    H, W = img_shape[:2]
    h, w = sprite_shape
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        x = int(rng.integers(-w + 1, W))
        y = int(rng.integers(-h + 1, H))
        if (_visible_fraction(img_shape, sprite_shape, x, y) >= MIN_VISIBLE_FRACTION
                and 0 <= x + w // 2 < W and 0 <= y + h // 2 < H):
            return x, y
    raise SynthError(f"no valid placement for sprite {name!r} {sprite_shape} in frame "
                     f"{(H, W)} after {MAX_PLACEMENT_ATTEMPTS} attempts")


def generate_pair(base: ImagePair, bank, spec: SynthSpec, seed: int | None = None,
                  lead_sprite: int | None = None) -> tuple[ImagePair, ChangeMaps]:
    """Synthesize one labelled pair from a static base pair.

    ``seed`` overrides ``spec.seed``; ``lead_sprite`` forces the bank index of
    the first object (used to cover the whole bank across a dataset).
    """
    if not bank:
        raise SynthError("sprite bank is empty")
    rng = np.random.default_rng((spec.seed if seed is None else seed) & SEED_MASK)
    before, after = base.before.copy(), base.after.copy()
    removed = np.zeros(base.size, np.uint8)
    added = np.zeros(base.size, np.uint8)

    def draw(index=None):
        if index is None:
            index = int(rng.integers(len(bank)))
        return augment_sprite(bank[index], rng.uniform(*spec.brightness_range),
                              rng.uniform(*spec.noise_sigma_range), spec.feather_radius, rng)

    lo, hi = spec.objects_per_pair
    for k in range(int(rng.integers(lo, hi + 1))):
        sprite = draw(lead_sprite if k == 0 else None)
        x, y = _place(rng, before.shape, sprite.shape, sprite.name)
        if rng.random() < spec.change_overlap_prob:
            # replace one object by another around the same centre
            other = draw()
            cx, cy = x + sprite.shape[1] // 2, y + sprite.shape[0] // 2
            before, fp = paste(before, sprite, x, y)
            removed |= fp
            after, fp = paste(after, other, cx - other.shape[1] // 2, cy - other.shape[0] // 2)
            added |= fp
        elif rng.random() < 0.5:
            before, fp = paste(before, sprite, x, y)
            removed |= fp
        else:
            after, fp = paste(after, sprite, x, y)
            added |= fp
    maps = ChangeMaps.from_masks(removed, added, removed & added)
    return ImagePair(before, after, base.id), maps


def pair_seed(seed: int, index: int) -> int:
    return (seed ^ index) & SEED_MASK


def generate_dataset(bases, bank, spec: SynthSpec, count: int, out_root) -> dict:
    """Write ``count`` pairs in the dataset layout plus ``manifest.json``."""
    if count < 1:
        raise SynthError(f"count must be >= 1, got {count}")
    if not bases:
        raise SynthError("no base images")
    out_root = Path(out_root)
    width = max(6, len(str(count - 1)))
    manifest = {"spec": spec.to_dict(), "pairs": []}
    cover_bank = spec.objects_per_pair[0] >= 1
    for i in range(count):
        seed = pair_seed(spec.seed, i)
        pid = f"{i:0{width}d}"
        pair, maps = generate_pair(bases[i % len(bases)], bank, spec, seed,
                                   i % len(bank) if cover_bank else None)
        save_pair(ImagePair(pair.before, pair.after, pid), maps, out_root / "pairs" / pid)
        manifest["pairs"].append({"id": pid, "seed": seed})
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# sprite banks and base scenes on disk


def load_bank(directory) -> list[ObjectSprite]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError("missing sprite bank directory", directory)
    bank = []
    for path in sorted(directory.glob("*.png")):
        with Image.open(path) as im:
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
        bank.append(ObjectSprite(rgba[..., :3], rgba[..., 3], path.stem))
    if not bank:
        raise DatasetError("sprite bank has no PNG files", directory)
    return bank


def save_bank(bank, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in bank:
        rgba = np.concatenate([s.rgb, s.alpha[..., None]], axis=-1)
        arr = np.clip(np.rint(rgba * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGBA").save(directory / f"{s.name}.png", format="PNG")


def load_bases(directory) -> list[ImagePair]:
    """Base scenes from a dataset root (its pairs) or a flat folder of images.

    A flat image is used as both the before and the after view.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError("missing bases directory", directory)
    if (directory / "pairs").is_dir():
        return [ImagePair(read_rgb(d / "before.png"), read_rgb(d / "after.png"), d.name)
                for d in list_pairs(directory)]
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise DatasetError("no base images found", directory)
    bases = []
    for p in paths:
        img = read_rgb(p)
        bases.append(ImagePair(img, img.copy(), p.stem))
    return bases


# ---------------------------------------------------------------------------
# procedural stand-ins for photographs and object cut-outs


def procedural_scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A muted, cluttered background: colour gradient, rectangles, mild noise."""
    c0, c1 = rng.uniform(0.25, 0.6, size=(2, 3))
    t = np.linspace(0, 1, w)[None, :, None]
    img = np.broadcast_to(c0 * (1 - t) + c1 * t, (h, w, 3)).copy()
    for _ in range(int(rng.integers(3, 8))):
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        y1 = min(h, y0 + int(rng.integers(h // 8 + 1, h // 2 + 2)))
        x1 = min(w, x0 + int(rng.integers(w // 8 + 1, w // 2 + 2)))
        img[y0:y1, x0:x1] = rng.uniform(0.2, 0.65, size=3)
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def procedural_sprite(rng: np.random.Generator, h: int, w: int, name: str = "") -> ObjectSprite:
    """An opaque, saturated ellipse, box or triangle with a shaded interior."""
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = (xx + 0.5) / w, (yy + 0.5) / h
    shape = rng.integers(3)
    if shape == 0:
        mask = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == 1:
        mask = (u > 0.08) & (u < 0.92) & (v > 0.08) & (v < 0.92)
    else:
        mask = (v >= 0.05) & (np.abs(u - 0.5) <= 0.5 * v)
    color = rng.uniform(0, 1, size=3)
    color[rng.integers(3)] = rng.uniform(0.85, 1.0)
    color[rng.integers(3)] = rng.uniform(0.0, 0.15)
    shade = 0.75 + 0.25 * (1 - v)[..., None]
    rgb = np.clip(color * shade, 0, 1).astype(np.float32)
    return ObjectSprite(rgb, mask.astype(np.float32), name)


def procedural_bases(n: int, h: int, w: int, seed: int = 0) -> list[ImagePair]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = procedural_scene(rng, h, w)
        out.append(ImagePair(img, img.copy(), f"scene{i:03d}"))
    return out


def procedural_bank(n: int, size_range: tuple[int, int] = (10, 24), seed: int = 0) -> list[ObjectSprite]:
    rng = np.random.default_rng(seed)
    return [procedural_sprite(rng, int(rng.integers(size_range[0], size_range[1] + 1)),
                              int(rng.integers(size_range[0], size_range[1] + 1)), f"obj{i:03d}")
            for i in range(n)]


def write_procedural_fixtures(root, n_bases: int = 4, size: tuple[int, int] = (64, 128),
                              n_sprites: int = 8, seed: int = 1) -> tuple[Path, Path]:
    """Write ``root/bases`` (flat scene PNGs) and ``root/bank`` (RGBA sprites)."""
    root = Path(root)
    bases_dir, bank_dir = root / "bases", root / "bank"
    bases_dir.mkdir(parents=True, exist_ok=True)
    for b in procedural_bases(n_bases, *size, seed=seed):
        write_rgb(b.before, bases_dir / f"{b.id}.png")
    save_bank(procedural_bank(n_sprites, seed=seed + 1), bank_dir)
    return bases_dir, bank_dir
