"""Synthetic small-object scenes, PPM image I/O and the on-disk dataset layout.

Layout of a dataset directory::

    images/NNNNNN.ppm     binary P6
    annotations.txt       one line per image: ``id x1,y1,x2,y2,cls ...``
    train.txt, val.txt    one image id per line
    generation.log        objects skipped because they could not be placed
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detect import Box

SHAPES = ("square", "circle", "triangle")
PLACEMENT_RETRIES = 50


@dataclass
class SceneSpec:
    image_size: int = 64
    objects_per_image: tuple[int, int] = (2, 6)
    object_size: tuple[int, int] = (4, 14)
    num_classes: int = 3
    background_level: tuple[float, float] = (70.0, 150.0)
    texture_amplitude: float = 18.0
    noise_sigma: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        lo, hi = self.object_size
        if lo < 2 or hi < lo or hi > self.image_size:
            raise ValueError(f"object_size range {self.object_size} invalid (min >= 2, max <= image_size)")
        a, b = self.objects_per_image
        if a < 0 or b < a:
            raise ValueError(f"objects_per_image range {self.objects_per_image} invalid")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 1..{len(SHAPES)}")


def shape_mask(kind: str, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    c = s / 2
    if kind == "square":
        return np.ones((s, s), dtype=bool)
    if kind == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c ** 2
    if kind == "triangle":
        half = (yy + 0.5) / s * c
        return np.abs(xx - c) <= half
    raise ValueError(kind)


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    n = spec.image_size
    base = rng.uniform(*spec.background_level, size=3)
    coarse = rng.normal(0, spec.texture_amplitude, size=(n // 8 + 1, n // 8 + 1, 1))
    # cheap smooth texture: nearest-upsampled coarse grid box-blurred along both axes
    tex = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:n, :n]
    k = np.ones(5) / 5
    tex = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 0, tex)
    tex = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 1, tex)
    img = base + tex + rng.normal(0, spec.noise_sigma, size=(n, n, 3))
    return img


def generate_image(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[tuple[Box, int]], list[str]]:
    """Render image ``index`` deterministically from ``(spec.seed, index)``.

    Returns the ``[H, W, 3]`` uint8 image, exact annotations and log lines
    for objects that found no free spot.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    img = _background(rng, spec)
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    taken = np.zeros((n, n), dtype=bool)
    annots: list[tuple[Box, int]] = []
    log: list[str] = []
    for k in range(count):
        cls = int(rng.integers(spec.num_classes))
        s = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        mask = shape_mask(SHAPES[cls], s)
        for _ in range(PLACEMENT_RETRIES):
            x = int(rng.integers(0, n - s + 1))
            y = int(rng.integers(0, n - s + 1))
            y0, x0 = max(0, y - 1), max(0, x - 1)
            if not taken[y0:y + s + 1, x0:x + s + 1].any():
                break
        else:
            log.append(f"image {index}: object {k} (class {cls}, size {s}) skipped after "
                       f"{PLACEMENT_RETRIES} placement attempts")
            continue
        level = rng.uniform(190, 255) if rng.random() < 0.5 else rng.uniform(0, 45)
        color = np.clip(level + rng.uniform(-25, 25, size=3), 0, 255)
        region = img[y:y + s, x:x + s]
        region[mask] = color
        taken[y:y + s, x:x + s] = True
        rows, cols = np.nonzero(mask)
        annots.append((Box(x + int(cols.min()), y + int(rows.min()),
                           x + int(cols.max()) + 1, y + int(rows.max()) + 1), cls))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), annots, log


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def format_annotations(records: dict[int, list[tuple[Box, int]]]) -> str:
    lines = []
    for image_id in sorted(records):
        parts = [str(image_id)]
        for box, cls in records[image_id]:
            parts.append(",".join(_num(v) for v in (box.x1, box.y1, box.x2, box.y2)) + f",{cls}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def parse_annotations(text: str) -> dict[int, list[tuple[Box, int]]]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, *tuples = line.split()
        items = []
        for t in tuples:
            vals = t.split(",")
            if len(vals) != 5:
                raise ValueError(f"annotations line {lineno}: malformed box {t!r}")
            box = Box(*(float(v) for v in vals[:4]))
            if box.x2 <= box.x1 or box.y2 <= box.y1:
                raise ValueError(f"annotations line {lineno}: degenerate box {t!r}")
            items.append((box, int(vals[4])))
        out[int(head)] = items
    return out


def generate_dataset(spec: SceneSpec, root, train_count: int, val_count: int) -> Path:
    """Write ``train_count + val_count`` images plus annotations and split manifests."""
    spec.validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records, log = {}, []
    for idx in range(train_count + val_count):
        img, annots, msgs = generate_image(spec, idx)
        write_ppm(root / "images" / f"{idx:06d}.ppm", img)
        records[idx] = annots
        log.extend(msgs)
    (root / "annotations.txt").write_text(format_annotations(records))
    (root / "train.txt").write_text("".join(f"{i}\n" for i in range(train_count)))
    (root / "val.txt").write_text("".join(f"{i}\n" for i in range(train_count, train_count + val_count)))
    (root / "generation.log").write_text("".join(m + "\n" for m in log))
    return root


def read_split(root, split: str) -> list[int]:
    path = Path(root) / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"split manifest {path} not found")
    return [int(line) for line in path.read_text().split()]


def load_split(root, split: str, image_size: int | None = None):
    """Return ``(ids, images [N,3,H,W] float in [0,1], annotations by id)``."""
    root = Path(root)
    ids = read_split(root, split)
    annots = parse_annotations((root / "annotations.txt").read_text())
    imgs = [read_ppm(root / "images" / f"{i:06d}.ppm") for i in ids]
    for i, im in zip(ids, imgs):
        if i not in annots:
            raise ValueError(f"image {i} has no annotation record")
        h, w = im.shape[:2]
        for box, _ in annots[i]:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
                raise ValueError(f"image {i}: ground truth {box} lies outside the {w}x{h} image")
    if imgs:
        arr = np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    else:
        n = image_size or 0
        arr = np.zeros((0, 3, n, n), dtype=np.float32)
    return ids, arr, {i: annots[i] for i in ids}
