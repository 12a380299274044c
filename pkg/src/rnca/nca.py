"""The refinement NCA: parameters, perception, the masked residual update and rollouts.

The update engine works on batches ``S`` of shape (B, H, W, K).  Only pixels
that are alive before the update and not skipped are pushed through the MLP;
every other pixel keeps its previous state until alive masking zeroes it.
The image branch does not change during a rollout, so its contribution to the
first MLP layer is computed once per rollout (``ImageContext``).
"""

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _accel
from .errors import ContractError, FormatError, NumericInstabilityError
from .grid import DTYPE, Kernel3x3, as_grid, concat_channels, conv3x3, im2col

FILTERS_PER_CHANNEL = 4

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8
_LAPLACIAN = np.array([[1, 2, 1], [2, -12, 2], [1, 2, 1]], dtype=np.float64) / 16


def base_filters(fourth="laplacian"):
    """Identity, Sobel-x, Sobel-y and a fourth filter (Laplacian or zeros)."""
    ident = np.zeros((3, 3))
    ident[1, 1] = 1
    if fourth == "laplacian":
        last = _LAPLACIAN
    elif fourth == "zero":
        last = np.zeros((3, 3))
    else:
        raise ContractError(f"fourth filter must be 'laplacian' or 'zero', got {fourth!r}")
    return np.stack([ident, _SOBEL_X, _SOBEL_X.T, last])


@dataclass(frozen=True)
class ModelConfig:
    state_channels: int = 16
    perception_features: int = None
    hidden_width: int = 128
    image_channels: int = 1
    alive_threshold: float = 0.1
    skip_probability: float = 0.5
    static_perception: bool = False
    fourth_filter: str = "laplacian"

    def __post_init__(self):
        k = self.state_channels
        if k < 1:
            raise ContractError("state_channels must be >= 1")
        if self.perception_features is None:
            object.__setattr__(self, "perception_features", FILTERS_PER_CHANNEL * k)
        if self.perception_features != FILTERS_PER_CHANNEL * k:
            raise ContractError(
                f"perception_features must equal {FILTERS_PER_CHANNEL} x state_channels "
                f"({FILTERS_PER_CHANNEL * k}), got {self.perception_features}"
            )
        if self.hidden_width < 1 or self.image_channels < 1:
            raise ContractError("hidden_width and image_channels must be >= 1")
        if not 0 < self.alive_threshold < 1:
            raise ContractError("alive_threshold must lie in (0, 1)")
        if not 0 <= self.skip_probability < 1:
            raise ContractError("skip_probability must lie in [0, 1)")
        if self.fourth_filter not in ("laplacian", "zero"):
            raise ContractError(f"unknown fourth_filter {self.fourth_filter!r}")

    @property
    def image_features(self):
        if self.static_perception:
            return FILTERS_PER_CHANNEL * self.image_channels
        return self.perception_features


PARAM_NAMES = ("state_perception", "image_perception", "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b")


@dataclass
class ModelParams:
    """Perception kernels and the two dense layers.  Dense weights are (in, out)."""

    config: ModelConfig
    state_perception: Kernel3x3
    image_perception: Kernel3x3
    mlp1_w: np.ndarray
    mlp1_b: np.ndarray
    mlp2_w: np.ndarray
    mlp2_b: np.ndarray

    def __post_init__(self):
        c = self.config
        n_in = c.perception_features + c.image_features
        expected = {
            "state_perception": (c.perception_features, c.state_channels, 3, 3),
            "image_perception": (c.image_features, c.image_channels, 3, 3),
            "mlp1_w": (n_in, c.hidden_width),
            "mlp1_b": (c.hidden_width,),
            "mlp2_w": (c.hidden_width, c.state_channels),
            "mlp2_b": (c.state_channels,),
        }
        for name, shape in expected.items():
            got = self.array(name).shape
            if got != shape:
                raise ContractError(f"{name} has shape {got}, expected {shape}")

    def array(self, name):
        v = getattr(self, name)
        return v.weights if isinstance(v, Kernel3x3) else v

    def tensors(self):
        """Every parameter tensor in checkpoint order, conv biases after their weights."""
        out = {}
        for name in PARAM_NAMES:
            v = getattr(self, name)
            if isinstance(v, Kernel3x3):
                out[name + "_w"] = v.weights
                out[name + "_b"] = v.bias
            else:
                out[name] = v
        return out

    def learnable(self):
        t = self.tensors()
        if self.config.static_perception:
            for k in ("state_perception_w", "state_perception_b", "image_perception_w", "image_perception_b"):
                t.pop(k)
        return t

    def count(self):
        """Number of learnable scalars."""
        return int(sum(a.size for a in self.learnable().values()))

    def copy(self):
        return ModelParams.from_tensors(self.config, {k: v.copy() for k, v in self.tensors().items()})

    def astype(self, dtype):
        return ModelParams.from_tensors(
            self.config, {k: v.astype(dtype) for k, v in self.tensors().items()}
        )

    @property
    def dtype(self):
        return self.mlp1_w.dtype

    @classmethod
    def from_tensors(cls, config, t):
        return cls(
            config,
            Kernel3x3(t["state_perception_w"], t["state_perception_b"]),
            Kernel3x3(t["image_perception_w"], t["image_perception_b"]),
            t["mlp1_w"],
            t["mlp1_b"],
            t["mlp2_w"],
            t["mlp2_b"],
        )


def _depthwise_filters(channels, fourth, dtype):
    f = base_filters(fourth)
    w = np.zeros((FILTERS_PER_CHANNEL * channels, channels, 3, 3), dtype=dtype)
    for c in range(channels):
        for k in range(FILTERS_PER_CHANNEL):
            w[c * FILTERS_PER_CHANNEL + k, c] = f[k]
    return w


def init_params(config, rng, dtype=DTYPE):
    """Fresh parameters.  The final layer is zero so the first update is the identity."""
    rng = np.random.default_rng(rng)
    k, n, h, cx = (config.state_channels, config.perception_features,
                   config.hidden_width, config.image_channels)
    nx = config.image_features

    ws = _depthwise_filters(k, config.fourth_filter, dtype)
    bs = np.zeros(n, dtype=dtype)
    if config.static_perception:
        wx = _depthwise_filters(cx, config.fourth_filter, dtype)
        bx = np.zeros(nx, dtype=dtype)
    else:
        lim = 1 / np.sqrt(9 * cx)
        wx = rng.uniform(-lim, lim, (nx, cx, 3, 3)).astype(dtype)
        bx = rng.uniform(-lim, lim, nx).astype(dtype)
    lim = 1 / np.sqrt(n + nx)
    w1 = rng.uniform(-lim, lim, (n + nx, h)).astype(dtype)
    b1 = rng.uniform(-lim, lim, h).astype(dtype)
    w2 = np.zeros((h, k), dtype=dtype)
    b2 = np.zeros(k, dtype=dtype)
    return ModelParams(config, Kernel3x3(ws, bs), Kernel3x3(wx, bx), w1, b1, w2, b2)


@dataclass
class CellState:
    """One (H, W, K) state grid; channel 0 is the visible soft mask."""

    grid: np.ndarray
    step_index: int = 0

    @property
    def visible(self):
        return self.grid[..., 0]

    @classmethod
    def from_mask(cls, mask, channels, dtype=DTYPE):
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ContractError(f"initial mask must be 2D, got shape {mask.shape}")
        if mask.dtype != bool and mask.size and (mask.min() < 0 or mask.max() > 1):
            raise ContractError("soft initial masks must take values in [0, 1]")
        g = np.zeros(mask.shape + (channels,), dtype=dtype)
        g[..., 0] = mask
        return cls(g, 0)


def perceive(state, image, params):
    """Concatenated state and image perception, (H, W, 2N)."""
    s = state.grid if isinstance(state, CellState) else np.asarray(state)
    x = as_grid(image, dtype=s.dtype)
    c = params.config
    if s.shape[-1] != c.state_channels:
        raise ContractError(f"state has {s.shape[-1]} channels, model expects {c.state_channels}")
    if x.shape[-1] != c.image_channels:
        raise ContractError(f"image has {x.shape[-1]} channels, model expects {c.image_channels}")
    if x.shape[:-1] != s.shape[:-1]:
        raise ContractError(f"image {x.shape[:-1]} and state {s.shape[:-1]} differ in size")
    return concat_channels(conv3x3(s, params.state_perception), conv3x3(x, params.image_perception))


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class ImageContext:
    """Per-rollout image features: im2col rows, perception output and its MLP projection."""

    cols: np.ndarray  # (B, H, W, 9 Cx)
    feats: np.ndarray  # (B, H, W, Nx)
    hidden: np.ndarray  # (B, H, W, hidden), image share of the first layer

    @classmethod
    def build(cls, images, params):
        images = np.asarray(images, dtype=params.dtype)
        n = params.config.perception_features
        cols = im2col(images)
        feats = cols @ params.image_perception.matrix() + params.image_perception.bias
        hidden = feats @ params.mlp1_w[n:]
        return cls(cols, feats, hidden)


@dataclass
class StepRecord:
    """Intermediates of one batched step, enough to run it backwards."""

    state: np.ndarray  # S_t
    skip: np.ndarray  # (B, H, W) bool, None when deterministic
    rows: np.ndarray  # flat indices of updated pixels
    state_feats: np.ndarray  # (n, N) state perception on those rows
    pre_act: np.ndarray  # (n, hidden)
    keep: np.ndarray  # (B, H, W) alive before and after


def _check_batch(S, ctx, params):
    c = params.config
    if S.ndim != 4 or S.shape[-1] != c.state_channels:
        raise ContractError(f"state batch must be (B, H, W, {c.state_channels}), got {S.shape}")
    if ctx.cols.shape[:3] != S.shape[:3]:
        raise ContractError(f"image batch {ctx.cols.shape[:3]} does not match state {S.shape[:3]}")


def draw_skip(rng, shape, tau):
    if tau <= 0:
        return None
    return rng.random(shape) < tau


def forward_step(S, ctx, params, skip=None, record=False, step_index=0):
    """One synchronous update of a state batch.  Returns ``(S_next, record_or_None)``."""
    c = params.config
    alpha = c.alive_threshold
    pre_alive = _accel.nbmax3(np.ascontiguousarray(S[..., 0])) >= alpha
    update = pre_alive if skip is None else pre_alive & ~skip
    flat = np.flatnonzero(update)
    ps = h_pre = None
    if flat.size:
        patches = _accel.gather_patches(S, flat)
        ws = params.state_perception
        ps = patches @ ws.matrix() + ws.bias
        n = c.perception_features
        h_pre = ps @ params.mlp1_w[:n]
        h_pre += np.take(ctx.hidden.reshape(-1, c.hidden_width), flat, axis=0)
        h_pre += params.mlp1_b
        delta = np.maximum(h_pre, 0) @ params.mlp2_w + params.mlp2_b
        if not np.isfinite(delta).all():
            raise NumericInstabilityError(f"non-finite update at step {step_index}", step=step_index)
    else:
        delta = np.zeros((0, c.state_channels), dtype=S.dtype)
    S_next, keep = _accel.apply_update(S, flat, delta, pre_alive, alpha)
    rec = StepRecord(S, skip, flat, ps, h_pre, keep) if record else None
    return S_next, rec


def init_batch(masks, channels, dtype=DTYPE):
    masks = np.asarray(masks)
    S = np.zeros(masks.shape + (channels,), dtype=dtype)
    S[..., 0] = masks
    return S


def run_batch(S0, images, params, steps, rng=None, deterministic=False, record=False,
              snapshots=False, ctx=None):
    """Roll a batch forward ``steps`` times.

    Returns ``(S_final, records, snaps)`` where ``records`` is the list of
    ``StepRecord`` (empty unless ``record``) and ``snaps`` the visible channel
    after every step (empty unless ``snapshots``).
    """
    if steps < 1:
        raise ContractError("a rollout needs at least one step")
    S = np.asarray(S0, dtype=params.dtype)
    if ctx is None:
        ctx = ImageContext.build(images, params)
    _check_batch(S, ctx, params)
    tau = 0.0 if deterministic else params.config.skip_probability
    if tau > 0 and rng is None:
        raise ContractError("stochastic rollouts need a random generator")
    if tau > 0 and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    records, snaps = [], []
    for t in range(steps):
        skip = draw_skip(rng, S.shape[:3], tau)
        S, rec = forward_step(S, ctx, params, skip, record, t)
        if record:
            records.append(rec)
        if snapshots:
            snaps.append(S.copy())
    return S, records, snaps


# ---------------------------------------------------------------------------
# single-state API


def step(state, image, params, rng=None, deterministic=False):
    """Advance one ``CellState`` by a single update."""
    x = as_grid(image, dtype=params.dtype)
    if x.shape[:2] != state.grid.shape[:2]:
        raise ContractError(f"image {x.shape[:2]} and state {state.grid.shape[:2]} differ in size")
    ctx = ImageContext.build(x[None], params)
    S = np.asarray(state.grid, dtype=params.dtype)[None]
    _check_batch(S, ctx, params)
    tau = 0.0 if deterministic else params.config.skip_probability
    if tau > 0 and rng is None:
        raise ContractError("stochastic steps need a random generator")
    skip = draw_skip(rng, S.shape[:3], tau)
    S, _ = forward_step(S, ctx, params, skip, step_index=state.step_index)
    return CellState(S[0], state.step_index + 1)


@dataclass
class Trajectory:
    final: CellState
    snapshots: list = field(default_factory=list)


def rollout(initial_mask, image, params, steps, rng=None, deterministic=False, snapshots=False):
    """Refine one mask: seed channel 0 from it, zero latents, apply ``steps`` updates."""
    if steps < 1:
        raise ContractError("a rollout needs at least one step")
    x = as_grid(image, dtype=params.dtype)
    s0 = CellState.from_mask(initial_mask, params.config.state_channels, params.dtype)
    if x.shape[:2] != s0.grid.shape[:2]:
        raise ContractError(f"image {x.shape[:2]} and mask {s0.grid.shape[:2]} differ in size")
    S, _, snaps = run_batch(s0.grid[None], x[None], params, steps, rng, deterministic,
                            snapshots=snapshots)
    return Trajectory(
        CellState(S[0], steps),
        [CellState(s[0], t + 1) for t, s in enumerate(snaps)],
    )


def binarize(state, threshold=0.5):
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    g = state.grid if isinstance(state, CellState) else np.asarray(state)
    return g[..., 0] > threshold


def refine(mask, image, params, steps=64, threshold=0.5, rng=None, deterministic=False):
    """Rollout followed by binarisation."""
    traj = rollout(mask, image, params, steps, rng, deterministic)
    return binarize(traj.final, threshold)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"RNCA"
FORMAT_VERSION = 1
_TENSOR_ORDER = (
    "state_perception_w", "state_perception_b",
    "image_perception_w", "image_perception_b",
    "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b",
)


def save_checkpoint(path, params):
    """Little-endian: magic, version, K, N, hidden, C_x, then u32-length-prefixed f32 tensors."""
    c = params.config
    t = params.tensors()
    parts = [MAGIC, struct.pack("<5I", FORMAT_VERSION, c.state_channels, c.perception_features,
                                c.hidden_width, c.image_channels)]
    for name in _TENSOR_ORDER:
        a = np.ascontiguousarray(t[name], dtype="<f4").ravel()
        parts.append(struct.pack("<I", a.size))
        parts.append(a.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(b"".join(parts))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path, **config_overrides):
    """Read a checkpoint.  Runtime knobs (alpha, tau, static mode) come from ``config_overrides``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an rNCA checkpoint (bad magic)")
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header")
    version, k, n, hidden, cx = struct.unpack_from("<5I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads version {FORMAT_VERSION}")
    off = 24
    arrays = {}
    for name in _TENSOR_ORDER:
        if off + 4 > len(data):
            raise FormatError(f"{path}: truncated before tensor {name}")
        (size,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + 4 * size > len(data):
            raise FormatError(f"{path}: truncated inside tensor {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).astype(DTYPE)
        off += 4 * size
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    nx = arrays["image_perception_b"].size
    cfg_fields = {f.name for f in fields(ModelConfig)}
    bad = set(config_overrides) - cfg_fields
    if bad:
        raise ContractError(f"unknown config overrides: {sorted(bad)}")
    config = ModelConfig(state_channels=k, perception_features=n, hidden_width=hidden,
                         image_channels=cx, **config_overrides)
    if config.image_features != nx:
        if nx == FILTERS_PER_CHANNEL * cx and not config.static_perception:
            config = replace(config, static_perception=True)
        else:
            raise FormatError(f"{path}: image perception width {nx} does not match the header")
    shapes = {
        "state_perception_w": (n, k, 3, 3), "state_perception_b": (n,),
        "image_perception_w": (nx, cx, 3, 3), "image_perception_b": (nx,),
        "mlp1_w": (n + nx, hidden), "mlp1_b": (hidden,),
        "mlp2_w": (hidden, k), "mlp2_b": (k,),
    }
    t = {}
    for name, shape in shapes.items():
        a = arrays[name]
        if a.size != int(np.prod(shape)):
            raise FormatError(f"{path}: tensor {name} has {a.size} values, expected shape {shape}")
        t[name] = a.reshape(shape).copy()
    return ModelParams.from_tensors(config, t)
