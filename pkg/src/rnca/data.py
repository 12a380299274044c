"""Synthetic shapes (blob / ring / branching tubes), dataset splits and PGM/PNG file I/O."""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .grid import DTYPE
from .metrics import betti_numbers, skeletonize
from .morph import CorruptionSpec, HoleParams, corrupt

KINDS = ("blob", "ring", "branching_tubes")

FOREGROUND = 0.75
BACKGROUND = 0.25
NOISE_SIGMA = 0.08
BIAS_AMPLITUDE = 0.15


@dataclass(frozen=True)
class ShapeSpec:
    kind: str = "ring"
    size: int = 64
    margin: int = 2
    seed: int = 0
    # blob
    blob_radius: tuple = (0.25, 0.36)
    blob_amplitude: float = 0.25
    # ring: mid-line radius and thickness as fractions of size / radius
    ring_radius: tuple = (0.25, 0.40)
    ring_thickness: tuple = (0.08, 0.20)
    ring_min_thickness: float = 3.0
    ring_squash: tuple = (0.75, 1.0)
    ring_thickness_wobble: float = 0.3
    # branching tubes
    branches: int = 5
    tube_width: tuple = (1.6, 2.6)  # branch diameters in pixels
    trunk_width: float = 4.0
    tortuosity: float = 0.25

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown shape kind {self.kind!r}")
        if self.size < 16:
            raise ContractError("shape size must be >= 16")
        if self.margin < 2:
            raise ContractError("margin must be >= 2")


def render_image(gt, rng):
    """Foreground/background intensities, multiplicative low-frequency bias and Gaussian noise."""
    h, w = gt.shape
    yy, xx = np.mgrid[:h, :w] / max(h, w)
    a, b = rng.uniform(-1, 1, 2)
    f = rng.uniform(0.5, 1.5)
    ph = rng.uniform(0, 2 * np.pi)
    field_ = a * (xx - 0.5) + b * (yy - 0.5) + 0.5 * np.cos(2 * np.pi * f * (xx + yy) / 2 + ph)
    field_ /= max(np.abs(field_).max(), 1e-9)
    bias = 1 + BIAS_AMPLITUDE * field_
    img = np.where(gt, FOREGROUND, BACKGROUND) * bias + rng.normal(0, NOISE_SIGMA, gt.shape)
    return np.clip(img, 0, 1).astype(DTYPE)[..., None]


def _blob(spec, rng):
    n = spec.size
    r0 = rng.uniform(*spec.blob_radius) * n
    ks = np.arange(2, 6)
    amps = rng.uniform(0, spec.blob_amplitude, ks.size) / ks
    phases = rng.uniform(0, 2 * np.pi, ks.size)
    c = (n - 1) / 2 + rng.uniform(-0.05, 0.05, 2) * n
    yy, xx = np.mgrid[:n, :n]
    dy, dx = yy - c[0], xx - c[1]
    theta = np.arctan2(dy, dx)
    r = r0 * (1 + (amps[:, None, None] * np.cos(ks[:, None, None] * theta + phases[:, None, None])).sum(0))
    return np.hypot(dy, dx) <= r


def _ring(spec, rng):
    n = spec.size
    rad = rng.uniform(*spec.ring_radius) * n
    thick = max(spec.ring_min_thickness, rng.uniform(*spec.ring_thickness) * rad)
    squash = rng.uniform(*spec.ring_squash)
    angle = rng.uniform(0, np.pi)
    wob_phase = rng.uniform(0, 2 * np.pi)
    room = (n - 1) / 2 - spec.margin - rad - thick * (1 + spec.ring_thickness_wobble) / 2
    c = (n - 1) / 2 + rng.uniform(-1, 1, 2) * max(room, 0) * 0.5
    yy, xx = np.mgrid[:n, :n]
    dy, dx = yy - c[0], xx - c[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    v = v / squash
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    t = thick * (1 + spec.ring_thickness_wobble * np.sin(theta + wob_phase))
    return np.abs(rho - rad) <= t / 2


def _segment_distance(yy, xx, p, q):
    d = q - p
    L2 = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / L2, 0, 1)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _tubes(spec, rng):
    n = spec.size
    lo, hi = spec.margin + 2, n - 1 - spec.margin - 2
    yy, xx = np.mgrid[:n, :n].astype(float)
    dist = np.full((n, n), np.inf)
    width = np.zeros((n, n))
    paths = []

    def walk(start, heading, length, w):
        pts = [np.array(start, dtype=float)]
        step = 2.0
        for _ in range(int(length / step)):
            heading += rng.normal(0, spec.tortuosity)
            nxt = pts[-1] + step * np.array([np.sin(heading), np.cos(heading)])
            if not (lo <= nxt[0] <= hi and lo <= nxt[1] <= hi):
                break
            pts.append(nxt)
        return pts

    # trunk enters from a random side and heads roughly through the centre
    side = rng.integers(4)
    t = rng.uniform(0.3, 0.7) * n
    start = [(lo, t), (hi, t), (t, lo), (t, hi)][side]
    centre = np.array([(n - 1) / 2, (n - 1) / 2])
    heading = math.atan2(centre[0] - start[0], centre[1] - start[1])
    trunk_w = spec.trunk_width
    paths.append((walk(start, heading, n * 0.9, trunk_w), trunk_w, heading))
    for _ in range(spec.branches - 1):
        pts, _, h0 = paths[int(rng.integers(len(paths)))]
        if len(pts) < 4:
            continue
        k = int(rng.integers(1, len(pts) - 2))
        seg = pts[k + 1] - pts[k]
        base = math.atan2(seg[0], seg[1])
        turn = rng.uniform(0.5, 1.2) * rng.choice([-1, 1])
        w = rng.uniform(*spec.tube_width)
        paths.append((walk(pts[k], base + turn, rng.uniform(0.3, 0.6) * n, w), w, base + turn))
    for pts, w, _ in paths:
        for p, q in zip(pts[:-1], pts[1:]):
            d = _segment_distance(yy, xx, p, q)
            better = d < dist
            dist = np.where(better, d, dist)
            width = np.where(better, w, width)
    return dist <= width / 2


def junction_count(skeleton):
    """Skeleton pixels with at least three skeleton 8-neighbours."""
    s = np.asarray(skeleton, dtype=bool)
    p = np.pad(s, 1).astype(np.int8)
    h, w = s.shape
    nb = sum(p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
             for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx)
    return int((s & (nb >= 3)).sum())


_EXPECTED_BETTI = {"blob": (1, 0), "ring": (1, 1), "branching_tubes": (1, 0)}


def _valid(gt, spec):
    m = spec.margin
    if gt[:m].any() or gt[-m:].any() or gt[:, :m].any() or gt[:, -m:].any():
        return False
    if betti_numbers(gt) != _EXPECTED_BETTI[spec.kind]:
        return False
    if spec.kind == "branching_tubes" and spec.branches >= 3:
        return junction_count(skeletonize(gt)) >= 3
    return True


def gen_shape(spec, rng=None, max_tries=200):
    """Draw (image, gt) for one shape.  Draws that miss the kind's guarantees are redrawn."""
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    make = {"blob": _blob, "ring": _ring, "branching_tubes": _tubes}[spec.kind]
    for _ in range(max_tries):
        gt = make(spec, rng)
        if _valid(gt, spec):
            return render_image(gt, rng), gt
    raise RuntimeError(f"could not generate a valid {spec.kind} after {max_tries} tries")


# ---------------------------------------------------------------------------
# default corruptions per shape kind

# hole sizes tuned so corrupted blobs start near Dice 0.80
BLOB_HOLES = HoleParams(count=(2, 4), rect_side=(0.20, 0.45), disc_radius=(0.10, 0.22))


def default_corruption(kind):
    """The corruption each shape kind is trained against."""
    if kind == "blob":
        return CorruptionSpec.single("punch_holes", holes=BLOB_HOLES)
    if kind == "ring":
        return CorruptionSpec(weights={"ring_break": 1.0}, identity_fraction=0.2)
    if kind == "branching_tubes":
        return CorruptionSpec.single("erode_fragments")
    raise ContractError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SamplePair:
    id: str
    image: np.ndarray
    gt: np.ndarray
    corrupted: np.ndarray

    def __post_init__(self):
        if not (self.image.shape[:2] == self.gt.shape == self.corrupted.shape):
            raise ContractError(f"sample {self.id}: image, gt and corrupted sizes differ")

    def triple(self):
        return self.image, self.gt, self.corrupted


@dataclass
class Dataset:
    pairs: list
    splits: dict = field(default_factory=dict)  # id -> "train" | "val" | "test"

    def subset(self, split):
        return [p for p in self.pairs if self.splits.get(p.id) == split]


def split_counts(n, fractions=(0.7, 0.15, 0.15)):
    """Largest-remainder split; ties go to train, then val, then test."""
    if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1):
        raise ContractError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    exact = [n * f for f in fractions]
    counts = [int(math.floor(e + 1e-9)) for e in exact]
    rem = n - sum(counts)
    order = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:rem]:
        counts[k] += 1
    return tuple(counts)


def make_dataset(n, shape_spec, corruption_spec, rng, fractions=(0.7, 0.15, 0.15), id_prefix=""):
    if n < 3:
        raise ContractError("a dataset needs at least 3 samples")
    rng = np.random.default_rng(rng)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    width = max(3, len(str(n - 1)))
    pairs = []
    for k, seed in enumerate(seeds):
        srng = np.random.default_rng(int(seed))
        image, gt = gen_shape(replace(shape_spec, seed=int(seed)), srng)
        bad = corrupt(gt, corruption_spec, srng)
        pairs.append(SamplePair(f"{id_prefix}{k:0{width}d}", image, gt, bad))
    counts = split_counts(n, fractions)
    order = rng.permutation(n)
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    splits = {pairs[i].id: names[r] for r, i in enumerate(order)}
    return Dataset(pairs, splits)


# ---------------------------------------------------------------------------
# file I/O

MAX_PIXELS = 1 << 28


def _read_pgm(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header {tokens!r}")
    if w <= 0 or h <= 0 or w * h > MAX_PIXELS:
        raise FormatError(f"{path}: unsupported PGM dimensions {w}x{h}")
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM maxval {maxval}")
    depth = 1 if maxval < 256 else 2
    need = w * h * depth
    if len(data) - pos < need:
        raise FormatError(f"{path}: PGM raster truncated ({len(data) - pos} of {need} bytes)")
    raster = np.frombuffer(data, dtype=np.uint8 if depth == 1 else ">u2", count=w * h, offset=pos)
    return raster.reshape(h, w), maxval


def _write_pgm(path, arr, maxval=255):
    path = Path(path)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def _read_png(path):
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise FormatError(f"{path}: PNG support needs Pillow")
    with Image.open(path) as im:
        return np.asarray(im.convert("L")), 255


def _read_raster(path):
    if Path(path).suffix.lower() == ".png":
        return _read_png(path)
    return _read_pgm(path)


def save_mask(path, mask):
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ContractError(f"masks must be 2D, got shape {m.shape}")
    return _write_pgm(path, m.astype(np.uint8) * 255)


def load_mask(path):
    raster, maxval = _read_raster(path)
    if maxval != 255:
        raise FormatError(f"{path}: mask files must have maxval 255, got {maxval}")
    return raster >= 128


def save_image(path, image):
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ContractError("only single-channel images can be written as PGM")
        a = a[..., 0]
    return _write_pgm(path, np.round(np.clip(a, 0, 1) * 255).astype(np.uint8))


def load_image(path):
    raster, maxval = _read_raster(path)
    return (raster.astype(np.float64) / maxval).astype(DTYPE)[..., None]


MANIFEST_COLUMNS = ["id", "split", "image_path", "gt_path", "corrupted_path"]


def write_dataset(dataset, out_dir):
    """Write PGM triples plus ``manifest.csv`` (paths relative to ``out_dir``)."""
    out = Path(out_dir)
    rows = []
    for p in sorted(dataset.pairs, key=lambda p: p.id):
        names = (f"images/{p.id}.pgm", f"gt/{p.id}.pgm", f"corrupted/{p.id}.pgm")
        save_image(out / names[0], p.image)
        save_mask(out / names[1], p.gt)
        save_mask(out / names[2], p.corrupted)
        rows.append([p.id, dataset.splits.get(p.id, "train"), *names])
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return manifest


def read_manifest(path):
    """Load a dataset written by ``write_dataset``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    pairs, splits = [], {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise FormatError(f"{path}: expected columns {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            pairs.append(SamplePair(
                row["id"],
                load_image(base / row["image_path"]),
                load_mask(base / row["gt_path"]),
                load_mask(base / row["corrupted_path"]),
            ))
            splits[row["id"]] = row["split"]
    return Dataset(pairs, splits)
