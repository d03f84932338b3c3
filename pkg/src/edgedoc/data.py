"""Network inputs, noise residuals, manifests and the synthetic ID-card corpus."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fileio import encode_pgm, encode_ppm, load_btf, load_image, write_atomic, write_text_atomic

BONAFIDE, ATTACK = 0, 1
ATTACK_KINDS = ("splice", "renoise", "blur")
MANIFEST_HEADER = "id\timage\tmask\tlabel"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# SplitMix64

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64 stream.  Being counter-based, blocks of outputs vectorize."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = _mix(np.uint64(self.state) + k * _GAMMA)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return z

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1) from the top 53 bits."""
        u = (self.u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi]."""
        return lo + int(self.uniform() * (hi - lo + 1))

    def normal(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def spawn(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


# ---------------------------------------------------------------------------
# samples and residuals


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 in {0, 255}
    label: int
    residual: np.ndarray | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise DataError(f"{self.id}: image must be HxWx3 uint8")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}")
        if self.label not in (BONAFIDE, ATTACK):
            raise DataError(f"{self.id}: label must be 0 or 1, got {self.label}")
        if not np.isin(self.mask, (0, 255)).all():
            raise DataError(f"{self.id}: mask values must be 0 or 255")
        forged = bool(self.mask.any())
        if self.label == BONAFIDE and forged:
            raise DataError(f"{self.id}: bonafide sample with non-empty mask")
        if self.label == ATTACK and not forged:
            raise DataError(f"{self.id}: attack sample with empty mask")


def green_channel(image: np.ndarray) -> np.ndarray:
    return image[..., 1].astype(np.float32) / np.float32(255.0)


LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64) / 4.0


def standardize(r: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return ((r - r.mean()) / max(r.std(), floor)).astype(np.float32)


def highpass_residual(image: np.ndarray) -> np.ndarray:
    """Laplacian response of the mean-gray image, standardized per image.

    Borders replicate the edge pixel so a flat field gives an all-zero response.
    """
    gray = image.astype(np.float64).sum(axis=2) / (3 * 255.0)
    g = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    r = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            if LAPLACIAN[i, j]:
                r += LAPLACIAN[i, j] * g[i : i + h, j : j + w]
    return standardize(r)


class ResidualKind(enum.Enum):
    HIGHPASS = "highpass"
    FROM_FILE = "file"


@dataclass(frozen=True)
class ResidualExtractor:
    """Seam for the noise-fingerprint channel: built-in high-pass or precomputed BTF maps."""

    kind: ResidualKind = ResidualKind.HIGHPASS
    directory: Path | None = None

    @classmethod
    def parse(cls, text: str) -> "ResidualExtractor":
        if text == "highpass":
            return cls()
        if text.startswith("file:"):
            return cls(ResidualKind.FROM_FILE, Path(text[5:]))
        raise DataError(f"unknown residual source {text!r}; use 'highpass' or 'file:DIR'")

    def describe(self) -> str:
        return "highpass" if self.kind is ResidualKind.HIGHPASS else f"file:{self.directory}"

    def __call__(self, sample: Sample) -> np.ndarray:
        if sample.residual is not None:
            r = sample.residual
        elif self.kind is ResidualKind.HIGHPASS:
            return highpass_residual(sample.image)
        else:
            path = self.directory / f"{sample.id}.btf"
            if not path.is_file():
                raise DataError(f"no residual map for {sample.id!r} at {path}")
            r = load_btf(path)
            if r.ndim == 3 and r.shape[0] == 1:
                r = r[0]
        if r.shape != sample.image.shape[:2]:
            raise DataError(f"{sample.id}: residual {r.shape} does not match image {sample.image.shape[:2]}")
        return standardize(r)


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic interpolation matrix, half-pixel centers (corners not aligned)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = a.shape
    if (h, w) == tuple(size):
        return a.astype(np.float32, copy=True)
    rh = _bilinear_matrix(size[0], h)
    rw = _bilinear_matrix(size[1], w)
    return (rh @ a.astype(np.float64) @ rw.T).astype(np.float32)


def resize_nearest(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = a.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return a[rows][:, cols]


def assemble_input(sample: Sample, extractor: ResidualExtractor = ResidualExtractor(),
                   size: tuple[int, int] = (256, 256)) -> tuple[np.ndarray, np.ndarray]:
    """Return (x: 2xHxW float32, target mask: 1xHxW float32 in {0,1})."""
    g = resize_bilinear(green_channel(sample.image), size)
    r = resize_bilinear(extractor(sample), size)
    x = np.stack([g, r]).astype(np.float32)
    m = resize_nearest(sample.mask, size)
    y = (m.astype(np.float32) / 255.0 >= 0.5).astype(np.float32)[None]
    return x, y


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image: str
    mask: str  # relative path or "-"
    label: int


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow]
    split: str = "train"
    path: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise DataError(f"split must be train, val or test, got {self.split!r}")
        seen = set()
        for r in self.rows:
            if r.id in seen:
                raise DataError(f"duplicate id {r.id!r} in {self.split} manifest")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    def row(self, sample_id: str) -> ManifestRow:
        for r in self.rows:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)

    def to_text(self) -> str:
        lines = [f"# split={self.split}", MANIFEST_HEADER]
        for r in self.rows:
            for f in (r.id, r.image, r.mask):
                if "\t" in f or "\n" in f:
                    raise DataError(f"field {f!r} contains a tab or newline")
            lines.append(f"{r.id}\t{r.image}\t{r.mask}\t{r.label}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        write_text_atomic(path, self.to_text())
        self.path = path
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    split = "train"
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "split":
                split = val.strip()
            continue
        if line == MANIFEST_HEADER:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        sid, img, mask, label = parts
        if label not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        rows.append(ManifestRow(sid, img, mask, int(label)))
    return DatasetManifest(path.parent, rows, split, path)


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    row = manifest.row(sample_id)
    img_path = manifest.root / row.image
    try:
        image = load_image(img_path)
    except OSError as exc:
        raise DataError(f"{sample_id}: cannot read image {img_path}: {exc}") from exc
    if image.ndim != 3:
        raise DataError(f"{sample_id}: {img_path} is not an RGB image")
    if row.mask == "-":
        mask = np.zeros(image.shape[:2], np.uint8)
    else:
        try:
            mask = load_image(manifest.root / row.mask)
        except OSError as exc:
            raise DataError(f"{sample_id}: cannot read mask: {exc}") from exc
        if mask.ndim != 2:
            raise DataError(f"{sample_id}: mask must be a single-channel PGM")
    return Sample(row.id, image, mask, row.label)


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    return [load_sample(manifest, sid) for sid in manifest.ids]


def attack_kind(sample_id: str) -> str | None:
    """Manipulation type encoded in synthetic ids (``attack_0003_renoise``)."""
    tail = sample_id.rsplit("_", 1)[-1]
    return tail if tail in ATTACK_KINDS else None


# ---------------------------------------------------------------------------
# synthetic fantasy-card corpus

CARD_H, CARD_W = 320, 480


@dataclass
class _Card:
    image: np.ndarray
    regions: list[tuple[int, int, int, int]]  # (y0, x0, y1, x1) of stripes and portrait


def _render_card(rng: SplitMix64) -> _Card:
    h, w = CARD_H, CARD_W
    base = np.array([rng.randint(150, 235) for _ in range(3)], dtype=np.float64)
    img = base + 4.0 * rng.normal((h, w, 3))
    regions = []

    # portrait: ellipse with a vertical shading gradient
    cy, cx = rng.randint(140, 180), rng.randint(85, 115)
    ay, ax = rng.randint(80, 100), rng.randint(55, 70)
    tone = np.array([rng.randint(60, 200) for _ in range(3)], dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    inside = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    shade = 1.0 + 0.25 * (yy - cy) / ay
    img[inside] = (tone[None, :] * shade[inside][:, None]) + 4.0 * rng.normal((int(inside.sum()), 3))
    regions.append((cy - ay, cx - ax, cy + ay + 1, cx + ax + 1))

    # text-like stripes: rows of dark word blocks
    n_lines = rng.randint(4, 6)
    y = rng.randint(40, 60)
    ink = float(rng.randint(20, 70))
    for _ in range(n_lines):
        lh = rng.randint(8, 14)
        x = rng.randint(200, 230)
        x_end = min(w - 20, x + rng.randint(120, 240))
        line_x0 = x
        while x < x_end:
            ww = rng.randint(12, 40)
            x1 = min(x + ww, x_end)
            img[y : y + lh, x:x1] = ink + 3.0 * rng.normal((lh, x1 - x, 3))
            x = x1 + rng.randint(5, 10)
        regions.append((y, line_x0, y + lh, x_end))
        y += lh + rng.randint(22, 40)
        if y > h - 30:
            break
    return _Card(img, regions)


def _sensor(img: np.ndarray, rng: SplitMix64) -> np.ndarray:
    return img + 2.0 * rng.normal(img.shape)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _attack_rect(card: _Card, rng: SplitMix64) -> tuple[int, int, int, int]:
    """Rectangle with area in [0.08, 0.15] of the card, overlapping a stripe block or the portrait."""
    h, w = CARD_H, CARD_W
    total = h * w
    while True:
        area = int(round(total * (0.08 + 0.07 * rng.uniform())))
        rw = rng.randint(int(math.sqrt(area * 0.6)), min(w - 1, int(math.sqrt(area * 2.5))))
        rh = int(round(area / rw))
        if rh >= h or not 0.08 <= rh * rw / total <= 0.15:
            continue
        ty0, tx0, ty1, tx1 = card.regions[rng.randint(0, len(card.regions) - 1)]
        py = rng.randint(max(0, ty0), min(h - 1, ty1 - 1))
        px = rng.randint(max(0, tx0), min(w - 1, tx1 - 1))
        y0 = min(max(0, py - rh // 2), h - rh)
        x0 = min(max(0, px - rw // 2), w - rw)
        return y0, x0, y0 + rh, x0 + rw


def _box_blur3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    return sum(p[i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def _make_attack(rng: SplitMix64, kind: str) -> tuple[np.ndarray, np.ndarray]:
    card = _render_card(rng.spawn())
    img = _sensor(card.image, rng)
    y0, x0, y1, x1 = _attack_rect(card, rng)
    if kind == "splice":
        donor = _render_card(rng.spawn())
        donor_img = _sensor(donor.image, rng)
        rh, rw = y1 - y0, x1 - x0
        dy = rng.randint(0, CARD_H - rh)
        dx = rng.randint(0, CARD_W - rw)
        img[y0:y1, x0:x1] = donor_img[dy : dy + rh, dx : dx + rw]
    elif kind == "renoise":
        img[y0:y1, x0:x1] += 8.0 * rng.normal((y1 - y0, x1 - x0, 3))
    elif kind == "blur":
        img[y0:y1, x0:x1] = _box_blur3(img)[y0:y1, x0:x1]
    else:
        raise DataError(f"unknown attack kind {kind!r}")
    mask = np.zeros((CARD_H, CARD_W), np.uint8)
    mask[y0:y1, x0:x1] = 255
    return _to_u8(img), mask


def synth_generate(n_bonafide: int, n_attack: int, seed: int, out_dir, split: str = "train") -> DatasetManifest:
    """Write a deterministic corpus of PPM cards and PGM masks plus ``manifest.tsv``.

    Attack ids end with the manipulation type; types cycle splice, renoise, blur.
    """
    if n_bonafide < 1 or n_attack < 1:
        raise DataError("need at least one bonafide and one attack sample")
    out = Path(out_dir)
    master = SplitMix64(seed)
    rows = []
    for i in range(n_bonafide):
        rng = master.spawn()
        card = _render_card(rng.spawn())
        img = _to_u8(_sensor(card.image, rng))
        sid = f"bonafide_{i:04d}"
        write_atomic(out / "images" / f"{sid}.ppm", encode_ppm(img))
        rows.append(ManifestRow(sid, f"images/{sid}.ppm", "-", BONAFIDE))
    for i in range(n_attack):
        rng = master.spawn()
        kind = ATTACK_KINDS[i % len(ATTACK_KINDS)]
        img, mask = _make_attack(rng, kind)
        sid = f"attack_{i:04d}_{kind}"
        write_atomic(out / "images" / f"{sid}.ppm", encode_ppm(img))
        write_atomic(out / "masks" / f"{sid}.pgm", encode_pgm(mask))
        rows.append(ManifestRow(sid, f"images/{sid}.ppm", f"masks/{sid}.pgm", ATTACK))
    manifest = DatasetManifest(out, rows, split)
    manifest.save(out / "manifest.tsv")
    return manifest


def corpus_stats(manifest: DatasetManifest) -> dict[str, float]:
    labels = [r.label for r in manifest.rows]
    kinds = [attack_kind(r.id) for r in manifest.rows if r.label == ATTACK]
    stats = {"samples": len(labels), "bonafide": labels.count(BONAFIDE), "attack": labels.count(ATTACK)}
    for k in ATTACK_KINDS:
        stats[k] = kinds.count(k)
    return stats


def prepare(samples: Sequence[Sample], extractor: ResidualExtractor = ResidualExtractor(),
            size: tuple[int, int] = (256, 256)) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Assemble ``(x, y_mask, label)`` training triples."""
    out = []
    for s in samples:
        x, y = assemble_input(s, extractor, size)
        out.append((x, y, s.label))
    return out
