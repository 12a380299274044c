"""Binary morphology, hole filling and the corruption generators used to build training pairs."""

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import ContractError

SHAPES = ("square", "disk", "cross")


@dataclass(frozen=True)
class StructuringElement:
    radius: int = 1
    shape: str = "square"

    def __post_init__(self):
        if self.radius < 1:
            raise ContractError("structuring element radius must be >= 1")
        if self.shape not in SHAPES:
            raise ContractError(f"unknown structuring element shape {self.shape!r}")

    def footprint(self):
        r = self.radius
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        if self.shape == "square":
            return np.ones_like(yy, dtype=bool)
        if self.shape == "disk":
            return yy * yy + xx * xx <= r * r
        return (yy == 0) | (xx == 0)

    def offsets(self):
        fp = self.footprint()
        ys, xs = np.nonzero(fp)
        return np.stack([ys - self.radius, xs - self.radius], axis=1).astype(np.int64)


SQUARE1 = StructuringElement(1, "square")


def _mask(m):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ContractError(f"masks must be 2D, got shape {m.shape}")
    return m.astype(bool, copy=False)


def erode(mask, se=SQUARE1):
    """True where the whole footprint fits inside the mask; outside the image counts as background."""
    return _accel.erode(_mask(mask), se.offsets())


def dilate(mask, se=SQUARE1):
    return _accel.dilate(_mask(mask), se.offsets())


def opening(mask, se=SQUARE1):
    return dilate(erode(mask, se), se)


def closing(mask, se=SQUARE1):
    """Closing of the mask embedded in an infinite background, so it never loses border pixels."""
    m = _mask(mask)
    r = se.radius
    p = np.pad(m, r)
    return erode(dilate(p, se), se)[r:r + m.shape[0], r:r + m.shape[1]]


def fill_holes(mask):
    """Add every 4-connected background component that does not touch the border."""
    m = _mask(mask)
    lab, n = _accel.label(~m, 4)
    if n == 0:
        return m.copy()
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    enclosed = np.ones(n + 1, dtype=bool)
    enclosed[border] = False
    enclosed[0] = False
    return m | enclosed[lab]


def boundary(mask):
    """Foreground pixels with a background 4-neighbour (the image edge counts as background)."""
    m = _mask(mask)
    return m & ~erode(m, StructuringElement(1, "cross"))


def _disc(shape, cy, cx, r):
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


# ---------------------------------------------------------------------------
# corruptions

KINDS = ("punch_holes", "erode_fragments", "ring_break", "thin", "thicken", "identity")


@dataclass(frozen=True)
class HoleParams:
    count: tuple = (1, 4)
    rect_side: tuple = (0.10, 0.40)  # fraction of the mask bounding-box size
    disc_radius: tuple = (0.05, 0.20)
    rect_probability: float = 0.5


@dataclass(frozen=True)
class CorruptionSpec:
    """Mixture of corruption kinds.  ``identity_fraction`` passes masks through untouched."""

    weights: dict = field(default_factory=lambda: {"punch_holes": 1.0})
    identity_fraction: float = 0.0
    holes: HoleParams = HoleParams()
    erosion_fraction: float = 0.75
    fragment_radius: int = 2
    ring_radius: int = None  # None: grow the opening until the ring breaks
    ring_max_radius: int = 4
    thin_radius: int = 1
    thicken_radius: int = 1

    def __post_init__(self):
        bad = set(self.weights) - set(KINDS)
        if bad:
            raise ContractError(f"unknown corruption kinds {sorted(bad)}")
        w = np.array(list(self.weights.values()), dtype=float)
        if w.size == 0 or (w < 0).any() or not np.isclose(w.sum(), 1.0):
            raise ContractError(f"corruption weights must be non-negative and sum to 1, got {self.weights}")
        if not 0 <= self.identity_fraction <= 1:
            raise ContractError("identity_fraction must lie in [0, 1]")
        if not 0 < self.erosion_fraction <= 1:
            raise ContractError("erosion_fraction must lie in (0, 1]")

    @classmethod
    def single(cls, kind, **kw):
        return cls(weights={kind: 1.0}, **kw)


def punch_holes(mask, rng, params=HoleParams()):
    """Remove 1-4 overlapping rectangles/discs centred on random foreground pixels."""
    m = _mask(mask).copy()
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return m
    size = max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1)
    n = int(rng.integers(params.count[0], params.count[1] + 1))
    yy, xx = np.ogrid[:m.shape[0], :m.shape[1]]
    for _ in range(n):
        k = int(rng.integers(ys.size))
        cy, cx = ys[k], xs[k]
        if rng.random() < params.rect_probability:
            hh = max(1.0, rng.uniform(*params.rect_side) * size) / 2
            ww = max(1.0, rng.uniform(*params.rect_side) * size) / 2
            hole = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
        else:
            r = max(1.0, rng.uniform(*params.disc_radius) * size)
            hole = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        m &= ~hole
    return m


def thin_pixels(mask):
    """Everything outside the main body.

    The body is the largest 8-connected part that survives a radius-1 square
    erosion, grown back by one dilation.  Parts narrower than three pixels and
    thick parts cut off from the body both count as thin.
    """
    m = _mask(mask)
    lab, n = _accel.label(erode(m, SQUARE1), 8)
    if n == 0:
        return m.copy()
    sizes = np.bincount(lab.ravel())[1:]
    body = dilate(lab == int(np.argmax(sizes)) + 1, SQUARE1) & m
    return m & ~body


def erode_fragments(mask, rng, fraction=0.75, chunk_radius=2):
    """Delete ``fraction`` of the thin structure in random chunks; thick bodies are untouched."""
    m = _mask(mask).copy()
    thin = thin_pixels(m)
    if not thin.any():
        thin = m.copy()
    total = int(thin.sum())
    if total == 0:
        return m
    target = fraction * total
    removed = 0
    remaining = thin.copy()
    while removed < target:
        ys, xs = np.nonzero(remaining)
        if ys.size == 0:
            break
        k = int(rng.integers(ys.size))
        chunk = remaining & _disc(m.shape, ys[k], xs[k], chunk_radius)
        removed += int(chunk.sum())
        remaining &= ~chunk
        m &= ~chunk
    return m


def _topology(mask):
    from .metrics import betti_numbers

    return betti_numbers(mask)


def ring_break(mask, rng, radius=None, max_radius=4):
    """Open the mask inside a disc window (3x the SE radius) around a random boundary pixel.

    With ``radius=None`` the SE grows from 1 until the topology changes or
    ``max_radius`` is reached.
    """
    m = _mask(mask)
    edge = boundary(m)
    ys, xs = np.nonzero(edge)
    if ys.size == 0:
        return m.copy()
    k = int(rng.integers(ys.size))
    cy, cx = ys[k], xs[k]
    radii = [radius] if radius is not None else range(1, max_radius + 1)
    before = _topology(m) if radius is None else None
    out = m.copy()
    for r in radii:
        window = _disc(m.shape, cy, cx, 3 * r)
        out = np.where(window, opening(m, StructuringElement(r, "disk")), m)
        if radius is not None or _topology(out) != before:
            break
    return out


def corrupt(mask, spec, rng):
    """Apply one corruption kind drawn from ``spec.weights`` (or pass through)."""
    m = _mask(mask)
    if spec.identity_fraction and rng.random() < spec.identity_fraction:
        return m.copy()
    kinds = list(spec.weights)
    p = np.array([spec.weights[k] for k in kinds], dtype=float)
    kind = kinds[int(rng.choice(len(kinds), p=p / p.sum()))]
    return apply_kind(m, kind, spec, rng)


def apply_kind(mask, kind, spec, rng):
    m = _mask(mask)
    if kind == "identity" or not m.any():
        return m.copy()
    for _ in range(10):
        if kind == "punch_holes":
            out = punch_holes(m, rng, spec.holes)
        elif kind == "erode_fragments":
            out = erode_fragments(m, rng, spec.erosion_fraction, spec.fragment_radius)
        elif kind == "ring_break":
            out = ring_break(m, rng, spec.ring_radius, spec.ring_max_radius)
        elif kind == "thin":
            out = erode(m, StructuringElement(spec.thin_radius, "disk"))
        elif kind == "thicken":
            out = dilate(m, StructuringElement(spec.thicken_radius, "disk"))
        else:
            raise ContractError(f"unknown corruption kind {kind!r}")
        if not np.array_equal(out, m):
            return out
    return out
