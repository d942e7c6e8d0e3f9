"""Deterministic 28x28 digit image corpus rendered from bundled vector fonts.

Each image is a single digit glyph drawn with one of the TrueType fonts that
ship with matplotlib, then passed through random affine warp, elastic
distortion, blur and noise so that the ten classes overlap like handwriting
instead of separating on crisp font outlines. Every image is generated from
its own counter-based random stream, so corpus content depends only on
(seed, split, index) and rebuilding yields byte-identical files.

The corpus is written as IDX image/label files, the interchange format the
rest of the pipeline loads digit data from.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .datasets import write_idx_images, write_idx_labels

CORPUS_FORMAT = 3

# Distortion strengths. Strong enough that the ten classes overlap like
# handwriting instead of separating on crisp font outlines; bumping any of
# these changes the rendered corpus, so CORPUS_FORMAT must move with them.
ROTATE_DEG = 12.0
SHEAR = 0.18
SCALE_RANGE = (0.85, 1.1)
SHIFT = 2.0
ELASTIC_RANGE = (2.0, 5.0)
ELASTIC_SIGMA = 4.0
BLUR_RANGE = (0.3, 0.9)
INK_RANGE = (0.7, 1.0)
NOISE_SIGMA = 0.02

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "test-images-idx3-ubyte"
TEST_LABELS = "test-labels-idx1-ubyte"

_FONT_FILES = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSans-Oblique.ttf",
    "DejaVuSans-BoldOblique.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSerif-Italic.ttf",
    "DejaVuSerif-BoldItalic.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
    "STIXGeneral.ttf",
    "STIXGeneralBol.ttf",
    "STIXGeneralItalic.ttf",
    "STIXGeneralBolIta.ttf",
    "cmb10.ttf",
    "cmr10.ttf",
    "cmss10.ttf",
    "cmtt10.ttf",
)


def _font_dir() -> Path:
    import matplotlib

    return Path(matplotlib.get_data_path()) / "fonts" / "ttf"


def _usable_fonts() -> list[Path]:
    """Bundled fonts that render every digit with actual ink."""
    found = []
    for name in _FONT_FILES:
        path = _font_dir() / name
        if not path.exists():
            continue
        try:
            font = ImageFont.truetype(str(path), 20)
        except OSError:
            continue
        img = Image.new("L", (28, 28), 0)
        draw = ImageDraw.Draw(img)
        ok = True
        for ch in "0123456789":
            draw.rectangle((0, 0, 27, 27), fill=0)
            draw.text((4, 2), ch, fill=255, font=font)
            if np.asarray(img).sum() < 500:
                ok = False
                break
        if ok:
            found.append(path)
    if len(found) < 4:
        raise RuntimeError("fewer than 4 usable digit fonts found")
    return found


_GRID = np.meshgrid(np.arange(28.0), np.arange(28.0), indexing="ij")


def render_digit(
    digit: int, rng: np.random.Generator, fonts: list[Path]
) -> np.ndarray:
    """One distorted (28, 28) uint8 glyph image."""
    font_path = fonts[rng.integers(len(fonts))]
    size = int(rng.integers(16, 24))
    font = ImageFont.truetype(str(font_path), size)
    img = Image.new("L", (28, 28), 0)
    draw = ImageDraw.Draw(img)
    ch = str(digit)
    left, top, right, bottom = draw.textbbox((0, 0), ch, font=font)
    x0 = (28 - (right - left)) / 2.0 - left
    y0 = (28 - (bottom - top)) / 2.0 - top
    draw.text((x0, y0), ch, fill=255, font=font)
    arr = np.asarray(img, dtype=np.float64) / 255.0

    theta = np.deg2rad(rng.uniform(-ROTATE_DEG, ROTATE_DEG))
    shear = rng.uniform(-SHEAR, SHEAR)
    scale = rng.uniform(*SCALE_RANGE)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # row/col convention: matrix maps output pixel coords to input coords
    lin = (
        np.array([[cos_t, -sin_t], [sin_t, cos_t]])
        @ np.array([[1.0, shear], [0.0, 1.0]])
        / scale
    )
    centre = np.array([13.5, 13.5])
    shift = rng.uniform(-SHIFT, SHIFT, size=2)
    offset = centre - lin @ (centre + shift)
    arr = ndimage.affine_transform(arr, lin, offset=offset, order=1, mode="constant")

    alpha = rng.uniform(*ELASTIC_RANGE)
    disp = ndimage.gaussian_filter(
        rng.normal(size=(2, 28, 28)), sigma=(0, ELASTIC_SIGMA, ELASTIC_SIGMA)
    )
    disp *= alpha / (np.abs(disp).max() + 1e-12)
    rows = _GRID[0] + disp[0]
    cols = _GRID[1] + disp[1]
    arr = ndimage.map_coordinates(arr, [rows, cols], order=1, mode="constant")

    arr = ndimage.gaussian_filter(arr, sigma=rng.uniform(*BLUR_RANGE))
    arr *= rng.uniform(*INK_RANGE)
    arr += rng.normal(scale=NOISE_SIGMA, size=arr.shape)
    return (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _split_rng(seed: int, split_index: int, image_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, split_index, image_index))
    )


def build_digit_corpus(
    directory,
    seed: int = 0,
    train_count: int = 60000,
    test_count: int = 10000,
) -> Path:
    """Render the corpus into `directory` and return that path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fonts = _usable_fonts()
    for split_index, (count, img_name, lbl_name) in enumerate(
        (
            (train_count, TRAIN_IMAGES, TRAIN_LABELS),
            (test_count, TEST_IMAGES, TEST_LABELS),
        )
    ):
        images = np.empty((count, 28, 28), dtype=np.uint8)
        labels = np.empty(count, dtype=np.uint8)
        for i in range(count):
            rng = _split_rng(seed, split_index, i)
            d = int(rng.integers(10))
            labels[i] = d
            images[i] = render_digit(d, rng, fonts)
        write_idx_images(directory / img_name, images)
        write_idx_labels(directory / lbl_name, labels)
    manifest = {
        "format": CORPUS_FORMAT,
        "seed": seed,
        "train_count": train_count,
        "test_count": test_count,
        "n_fonts": len(fonts),
    }
    (directory / "corpus.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return directory


def ensure_digit_corpus(
    directory,
    seed: int = 0,
    train_count: int = 60000,
    test_count: int = 10000,
) -> Path:
    """Build the corpus unless a matching one is already on disk."""
    directory = Path(directory)
    manifest_path = directory / "corpus.json"
    want = {
        "format": CORPUS_FORMAT,
        "seed": seed,
        "train_count": train_count,
        "test_count": test_count,
    }
    if manifest_path.exists():
        have = json.loads(manifest_path.read_text())
        if {k: have.get(k) for k in want} == want and all(
            (directory / n).exists()
            for n in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
        ):
            return directory
    return build_digit_corpus(directory, seed, train_count, test_count)
