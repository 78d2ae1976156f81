"""Bitemporal samples: raster I/O, tiling, manifests, synthetic scenes and
error-map rendering."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# published patch counts (train, val, test)
WHU_CD_COUNTS = (4536, 504, 2760)
LEVIR_CD_COUNTS = (7120, 1024, 2048)

TP_COLOR = (255, 255, 255)
FP_COLOR = (255, 0, 0)
TN_COLOR = (0, 0, 0)
FN_COLOR = (0, 0, 255)


class ManifestError(ValueError):
    pass


class SplitCountError(ManifestError):
    pass


# ----------------------------------------------------------------------------
# raster I/O


def read_image(path) -> np.ndarray:
    """RGB raster as float32 [3, H, W] in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def read_mask(path) -> np.ndarray:
    """Single-channel mask as uint8 [H, W]; any nonzero pixel means changed."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr != 0).astype(np.uint8)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] or uint8 RGB array."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def write_gray(path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


# ----------------------------------------------------------------------------
# samples and tiling


@dataclass
class BitemporalSample:
    id: str
    t1: np.ndarray
    t2: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.t1.shape != self.t2.shape or self.t1.shape[1:] != self.mask.shape:
            raise ValueError(
                f"sample {self.id}: t1 {self.t1.shape}, t2 {self.t2.shape} and "
                f"mask {self.mask.shape} are not spatially congruent"
            )
        self.mask = (np.asarray(self.mask) != 0).astype(np.uint8)


def tile_scene(t1_scene: np.ndarray, t2_scene: np.ndarray, mask_scene: np.ndarray,
               patch: int = 256, prefix: str = "") -> list[BitemporalSample]:
    """Cut congruent [C, H, W] scenes into non-overlapping ``patch`` squares.

    Row-major order; right and bottom remainders are dropped.
    """
    h, w = mask_scene.shape[-2:]
    if t1_scene.shape != t2_scene.shape or t1_scene.shape[-2:] != (h, w):
        raise ValueError(
            f"scenes are not congruent: {t1_scene.shape}, {t2_scene.shape}, {mask_scene.shape}"
        )
    rows, cols = h // patch, w // patch
    if rows == 0 or cols == 0:
        logger.warning("scene %dx%d is smaller than patch %d; no tiles produced", h, w, patch)
        return []
    out = []
    for r in range(rows):
        for c in range(cols):
            ys, xs = slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch)
            out.append(
                BitemporalSample(
                    id=f"{prefix}r{r:03d}_c{c:03d}",
                    t1=t1_scene[:, ys, xs],
                    t2=t2_scene[:, ys, xs],
                    mask=mask_scene[ys, xs],
                )
            )
    return out


def stitch_tiles(tiles: Sequence[BitemporalSample], rows: int, cols: int) -> BitemporalSample:
    """Inverse of :func:`tile_scene` over the kept grid."""
    if len(tiles) != rows * cols:
        raise ValueError(f"expected {rows * cols} tiles, got {len(tiles)}")

    def grid(get):
        return np.concatenate(
            [np.concatenate([get(tiles[r * cols + c]) for c in range(cols)], axis=-1) for r in range(rows)],
            axis=-2,
        )

    return BitemporalSample("stitched", grid(lambda t: t.t1), grid(lambda t: t.t2), grid(lambda t: t.mask))


# ----------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    id: str
    t1: str
    t2: str
    mask: str
    split: str

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "t1": self.t1, "t2": self.t2, "mask": self.mask, "split": self.split}
        )


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def counts(self) -> dict[str, int]:
        c = {s: 0 for s in SPLITS}
        for r in self.records:
            c[r.split] += 1
        return c

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_sample(self, rec: ManifestRecord) -> BitemporalSample:
        return BitemporalSample(
            rec.id,
            read_image(self.resolve(rec.t1)),
            read_image(self.resolve(rec.t2)),
            read_mask(self.resolve(rec.mask)),
        )

    def load_split(self, name: str) -> list[BitemporalSample]:
        return [self.load_sample(r) for r in self.split(name)]

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")


def validate_counts(manifest: Manifest, expected: Sequence[int]) -> None:
    got = manifest.counts()
    got_t = tuple(got[s] for s in SPLITS)
    if tuple(int(e) for e in expected) != got_t:
        raise SplitCountError(
            "split counts train/val/test = {}/{}/{} do not match expected {}/{}/{}".format(
                *got_t, *expected
            )
        )


def parse_counts(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated counts, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def load_manifest(path, expect_counts: Sequence[int] | None = None,
                  check_files: bool = True) -> Manifest:
    """Parse a line-delimited JSON manifest.

    Relative paths resolve against the manifest's directory.  Raises
    :class:`ManifestError` naming the offending line on malformed records,
    duplicate ids, unknown splits or missing files.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    m = Manifest(root=path.parent)
    seen: dict[str, int] = {}
    exists_cache: dict[Path, bool] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = ManifestRecord(
                    str(d["id"]), str(d["t1"]), str(d["t2"]), str(d["mask"]), str(d["split"])
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ManifestError(f"{path}:{lineno}: malformed record ({e})") from None
            if rec.split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {rec.split!r}")
            if rec.id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})"
                )
            seen[rec.id] = lineno
            if check_files:
                for rel in (rec.t1, rec.t2, rec.mask):
                    p = m.resolve(rel)
                    if p not in exists_cache:
                        exists_cache[p] = p.is_file()
                    if not exists_cache[p]:
                        raise ManifestError(f"{path}:{lineno}: missing file {p}")
            m.records.append(rec)
    c = m.counts()
    logger.info("manifest %s: train=%d val=%d test=%d", path, c["train"], c["val"], c["test"])
    if expect_counts is not None:
        validate_counts(m, expect_counts)
    return m


# ----------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    seed: int = 0
    count: int = 16
    size: int = 32
    num_shapes: tuple[int, int] = (2, 5)
    change_fraction: float = 0.15
    noise_sigma: float = 0.02
    removal_prob: float = 0.1
    background_range: tuple[float, float] = (0.05, 0.5)
    object_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        if self.count < 0 or self.size < 1:
            raise ValueError("count must be >= 0 and size >= 1")
        if not 0.0 <= self.change_fraction < 1.0:
            raise ValueError(f"change_fraction must lie in [0, 1), got {self.change_fraction}")
        lo, hi = self.num_shapes
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid num_shapes range {self.num_shapes}")
        self.num_shapes = (int(lo), int(hi))
        if not 0.0 <= self.removal_prob <= 1.0:
            raise ValueError(f"removal_prob must lie in [0, 1], got {self.removal_prob}")
        self.background_range = tuple(float(v) for v in self.background_range)
        self.object_range = tuple(float(v) for v in self.object_range)


def _shape_mask(rng: np.random.Generator, size: int, area: float) -> np.ndarray:
    """Random axis-aligned rectangle or disc covering roughly ``area`` pixels."""
    yy, xx = np.mgrid[0:size, 0:size]
    area = float(np.clip(area, 4.0, 0.5 * size * size))
    if rng.random() < 0.5:
        aspect = rng.uniform(0.5, 2.0)
        h = int(np.clip(round(np.sqrt(area * aspect)), 2, size))
        w = int(np.clip(round(area / h), 2, size))
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    r = max(1.5, np.sqrt(area / np.pi))
    cy, cx = rng.uniform(r, size - r, size=2) if size > 2 * r else (size / 2, size / 2)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def synth_pair(spec: SynthSpec, index: int) -> BitemporalSample:
    """One seeded scene pair; T2 = T1 with shapes inserted or removed.

    Scenes are dark smooth backgrounds carrying bright objects, loosely
    mimicking building change.  The mask is exactly the set of edited pixels.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    base = rng.uniform(*spec.background_range, size=3)
    grad = rng.uniform(-0.1, 0.1, size=(3, 2))
    background = base[:, None, None] + grad[:, 0, None, None] * yy + grad[:, 1, None, None] * xx
    t1 = background.copy()
    shapes = []
    for _ in range(int(rng.integers(spec.num_shapes[0], spec.num_shapes[1] + 1))):
        m = _shape_mask(rng, n, rng.uniform(0.01, 0.06) * n * n)
        t1[:, m] = rng.uniform(*spec.object_range, size=3)[:, None]
        shapes.append(m)
    t2 = t1.copy()
    changed = np.zeros((n, n), dtype=bool)
    target = spec.change_fraction * n * n
    while target > 0 and changed.sum() < target:
        remaining = target - changed.sum()
        if shapes and rng.random() < spec.removal_prob:
            m = shapes.pop(int(rng.integers(len(shapes)))) & ~changed
            t2[:, m] = background[:, m]
        else:
            m = _shape_mask(rng, n, rng.uniform(0.5, 1.0) * min(remaining, 0.2 * n * n)) & ~changed
            t2[:, m] = rng.uniform(*spec.object_range, size=3)[:, None]
        changed |= m
    t1 = t1 + rng.normal(0.0, spec.noise_sigma, size=t1.shape)
    t2 = t2 + rng.normal(0.0, spec.noise_sigma, size=t2.shape)
    return BitemporalSample(
        f"synth_{index:05d}",
        np.clip(t1, 0.0, 1.0).astype(np.float32),
        np.clip(t2, 0.0, 1.0).astype(np.float32),
        changed.astype(np.uint8),
    )


def assign_splits(ids: Sequence[str], fractions=(0.7, 0.1, 0.2)) -> dict[str, str]:
    """Deterministic split by ranking ids on their SHA-256 digest."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode("utf-8")).hexdigest())
    n = len(ranked)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    out = {}
    for k, i in enumerate(ranked):
        out[i] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return out


def synth_generate(spec: SynthSpec, out_dir) -> Manifest:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out_dir} is not writable: {e}") from e
    ids = [f"synth_{i:05d}" for i in range(spec.count)]
    splits = assign_splits(ids)
    m = Manifest(root=out_dir)
    for i, sid in enumerate(ids):
        s = synth_pair(spec, i)
        names = (f"{sid}_t1.png", f"{sid}_t2.png", f"{sid}_mask.png")
        write_image(out_dir / names[0], s.t1)
        write_image(out_dir / names[1], s.t2)
        write_mask(out_dir / names[2], s.mask)
        m.records.append(ManifestRecord(sid, *names, splits[sid]))
    m.write(out_dir / "manifest.jsonl")
    return m


def write_tiles(samples: Iterable[BitemporalSample], out_dir, split: str = "train") -> Manifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = Manifest(root=out_dir)
    for s in samples:
        names = (f"{s.id}_t1.png", f"{s.id}_t2.png", f"{s.id}_mask.png")
        write_image(out_dir / names[0], s.t1)
        write_image(out_dir / names[1], s.t2)
        write_mask(out_dir / names[2], s.mask)
        m.records.append(ManifestRecord(s.id, *names, split))
    m.write(out_dir / "manifest.jsonl")
    return m


# ----------------------------------------------------------------------------
# rendering


def render_error_map(pred_mask, gt_mask) -> np.ndarray:
    """uint8 [3, H, W]: TP white, FP red, TN black, FN blue."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"pred mask {pred.shape} and ground truth {gt.shape} differ")
    for arr, what in ((pred, "pred_mask"), (gt, "gt_mask")):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{what} must be binary (0/1)")
    # index = 2*pred + gt -> TN, FN, FP, TP
    palette = np.array([TN_COLOR, FN_COLOR, FP_COLOR, TP_COLOR], dtype=np.uint8)
    idx = 2 * pred.astype(np.intp) + gt.astype(np.intp)
    return np.ascontiguousarray(palette[idx].transpose(2, 0, 1))

