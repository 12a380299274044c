"""Backpropagation through unrolled rollouts, AdamW and the sample-pool training loop."""

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _accel
from .errors import ContractError, FormatError, NumericInstabilityError
from .grid import DTYPE
from .nca import ImageContext, ModelConfig, forward_step, init_batch, init_params, run_batch, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 64
    batch_size: int = 32
    pool_capacity: int = 256
    replace_count: int = 2
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    iterations: int = 1000
    seed: int = 0
    normalize_gradients: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.replace_count <= self.batch_size <= self.pool_capacity:
            raise ContractError("need 0 <= replace_count <= batch_size <= pool_capacity")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.total_steps < 2:
            raise ContractError("total_steps must be >= 2")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")

    @property
    def t_star_range(self):
        return math.ceil(self.total_steps / 2), self.total_steps


# ---------------------------------------------------------------------------
# config files


def _coerce(raw, typ, key):
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise FormatError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}")


def config_keys():
    """Known config keys mapped to (section, type)."""
    keys = {}
    for cls, section in ((ModelConfig, "model"), (TrainConfig, "train")):
        for f in fields(cls):
            keys[f.name] = (section, f.type)
    keys["perception_features"] = ("model", int)
    return keys


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into (model_kwargs, train_kwargs)."""
    known = config_keys()
    model, train = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise FormatError(f"{source}:{lineno}: unknown config key {key!r}")
        section, typ = known[key]
        (model if section == "model" else train)[key] = _coerce(raw, typ, key)
    return model, train


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------------------
# loss and gradients


def loss_mse(prediction, target):
    """Mean squared error between the visible channel and a binary target."""
    p = np.asarray(prediction)
    y = np.asarray(target)
    if p.shape != y.shape:
        raise ContractError(f"prediction {p.shape} and target {y.shape} differ")
    d = p.astype(np.float64) - y
    return float(np.mean(d * d))


def loss_seed(S, targets):
    """dL/dS for the batch-and-pixel mean MSE on channel 0."""
    g = np.zeros_like(S)
    g[..., 0] = 2.0 * (S[..., 0] - targets) / S[..., 0].size
    return g


@dataclass
class Tape:
    """Forward record of a batched rollout."""

    initial: np.ndarray
    images: np.ndarray
    ctx: ImageContext
    records: list

    @property
    def depth(self):
        return len(self.records)


def record_rollout(S0, images, params, steps, rng=None, deterministic=False):
    """Run forward while recording a tape.  Returns ``(S_final, tape)``."""
    images = np.asarray(images, dtype=params.dtype)
    ctx = ImageContext.build(images, params)
    S, records, _ = run_batch(S0, images, params, steps, rng, deterministic, record=True, ctx=ctx)
    return S, Tape(np.asarray(S0, dtype=params.dtype), images, ctx, records)


def replay(tape, params):
    """Re-run a tape forward with its recorded skip masks."""
    ctx = ImageContext.build(tape.images, params)
    S = tape.initial
    for t, rec in enumerate(tape.records):
        S, _ = forward_step(S, ctx, params, rec.skip, step_index=t)
    return S


def backward_rollout(tape, params, seed):
    """Reverse pass.  Returns ``(grads, dS0)`` with grads keyed like ``params.tensors()``.

    Skip and alive masks are constants of the forward pass; blocked paths get
    zero gradient.
    """
    c = params.config
    if tape.initial.shape[-1] != c.state_channels or tape.ctx.hidden.shape[-1] != c.hidden_width:
        raise ContractError("tape was recorded with a different model shape")
    n = c.perception_features
    dt = params.dtype
    ws_mat = params.state_perception.matrix()
    w1s = params.mlp1_w[:n]
    w2 = params.mlp2_w

    d_ws = np.zeros_like(ws_mat)
    d_bs = np.zeros(n, dtype=dt)
    d_w1s = np.zeros_like(w1s)
    d_b1 = np.zeros_like(params.mlp1_b)
    d_w2 = np.zeros_like(w2)
    d_b2 = np.zeros_like(params.mlp2_b)
    d_img_hidden = np.zeros_like(tape.ctx.hidden)

    G = np.asarray(seed, dtype=dt)
    k = c.state_channels
    hid_flat = d_img_hidden.reshape(-1, c.hidden_width)
    for rec in reversed(tape.records):
        dS = G * rec.keep[..., None]
        flat = rec.rows
        if flat.size:
            dd = np.take(dS.reshape(-1, k), flat, axis=0)
            pre = rec.pre_act
            h = np.maximum(pre, 0)
            d_w2 += h.T @ dd
            d_b2 += dd.sum(0)
            dh = dd @ w2.T
            dh *= pre > 0
            d_w1s += rec.state_feats.T @ dh
            d_b1 += dh.sum(0)
            hid_flat[flat] += dh
            dps = dh @ w1s.T
            patches = _accel.gather_patches(rec.state, flat)
            d_ws += patches.T @ dps
            d_bs += dps.sum(0)
            _accel.scatter_patches(dps @ ws_mat.T, flat, dS)
        G = dS

    ctx = tape.ctx
    hid = d_img_hidden.reshape(-1, c.hidden_width)
    feats = ctx.feats.reshape(-1, ctx.feats.shape[-1])
    d_w1x = feats.T @ hid
    d_feats = hid @ params.mlp1_w[n:].T
    d_wx = ctx.cols.reshape(-1, ctx.cols.shape[-1]).T @ d_feats
    d_bx = d_feats.sum(0)

    nx = c.image_features
    grads = {
        "state_perception_w": d_ws.reshape(3, 3, c.state_channels, n).transpose(3, 2, 0, 1),
        "state_perception_b": d_bs,
        "image_perception_w": d_wx.reshape(3, 3, c.image_channels, nx).transpose(3, 2, 0, 1),
        "image_perception_b": d_bx,
        "mlp1_w": np.concatenate([d_w1s, d_w1x], axis=0),
        "mlp1_b": d_b1,
        "mlp2_w": d_w2,
        "mlp2_b": d_b2,
    }
    grads = {k: np.ascontiguousarray(v, dtype=dt) for k, v in grads.items()}
    for k, v in grads.items():
        if not np.isfinite(v).all():
            raise NumericInstabilityError(f"non-finite gradient for {k}")
    return grads, G


def loss_and_grads(S0, images, targets, params, steps, rng=None, deterministic=False):
    """Convenience wrapper: forward with tape, batch-mean MSE, backward."""
    S, tape = record_rollout(S0, images, params, steps, rng, deterministic)
    loss = loss_mse(S[..., 0], targets)
    grads, dS0 = backward_rollout(tape, params, loss_seed(S, targets))
    return loss, grads, S, tape


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        t = params.learnable()
        return cls({k: np.zeros_like(a) for k, a in t.items()},
                   {k: np.zeros_like(a) for k, a in t.items()}, 0)


def adamw_update(params, grads, opt, config):
    """One AdamW step with bias correction and decoupled weight decay, in place."""
    opt.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, wd, eps = config.learning_rate, config.weight_decay, config.adam_eps
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    current = params.learnable()
    for name, p in current.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if config.normalize_gradients:
            g = g / (np.linalg.norm(g) + 1e-8)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if wd:
            p *= 1 - lr * wd
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, opt


# ---------------------------------------------------------------------------
# sample pool


@dataclass
class SamplePool:
    images: np.ndarray  # (P, H, W, Cx)
    targets: np.ndarray  # (P, H, W) bool
    states: np.ndarray  # (P, H, W, K)

    @property
    def capacity(self):
        return len(self.states)

    def reset(self, slot, image, target, mask):
        self.images[slot] = np.asarray(image).reshape(self.images.shape[1:])
        self.targets[slot] = target
        self.states[slot] = 0
        self.states[slot, ..., 0] = mask


def _as_image(image):
    a = np.asarray(image, dtype=DTYPE)
    return a[..., None] if a.ndim == 2 else a


def seed_pool(source, capacity, channels, rng):
    """Fill a pool with fresh corrupted samples drawn from ``source(rng)``."""
    first = [source(rng) for _ in range(capacity)]
    img0 = _as_image(first[0][0])
    h, w = img0.shape[:2]
    pool = SamplePool(
        np.zeros((capacity, h, w, img0.shape[2]), dtype=DTYPE),
        np.zeros((capacity, h, w), dtype=bool),
        np.zeros((capacity, h, w, channels), dtype=DTYPE),
    )
    for slot, (image, target, mask) in enumerate(first):
        if np.asarray(target).shape != (h, w):
            raise ContractError("all training samples must share one size")
        pool.reset(slot, _as_image(image), target, mask)
    return pool


def pool_sample_replace(pool, batch_size, replace_count, source, rng):
    """Draw slot indices (sorted) without replacement and refresh ``replace_count`` of them."""
    if batch_size > pool.capacity:
        raise ContractError(f"batch of {batch_size} exceeds pool size {pool.capacity}")
    if not 0 <= replace_count <= batch_size:
        raise ContractError("replace_count must lie in [0, batch_size]")
    idx = np.sort(rng.choice(pool.capacity, batch_size, replace=False))
    if replace_count:
        for slot in np.sort(rng.choice(idx, replace_count, replace=False)):
            image, target, mask = source(rng)
            pool.reset(slot, _as_image(image), target, mask)
    return idx


def dataset_source(samples, corrupt=None):
    """Source of fresh (image, target, initial_mask) triples.

    ``samples`` holds (image, gt, corrupted) triples; if ``corrupt`` is given
    each draw re-corrupts the ground truth with ``corrupt(gt, rng)`` instead
    of reusing the stored corrupted mask.
    """
    samples = list(samples)
    if not samples:
        raise ContractError("empty training set")

    def draw(rng):
        image, gt, corrupted = samples[int(rng.integers(len(samples)))]
        if corrupt is not None:
            corrupted = corrupt(gt, rng)
        return image, gt, corrupted

    return draw


@dataclass
class IterationResult:
    loss: float
    t_star: int
    slots: np.ndarray
    tape_depth: int


def train_iteration(pool, params, opt, train_config, rng, source):
    """Sample, roll out to a random late step, backprop, step AdamW, write states back."""
    idx = pool_sample_replace(pool, train_config.batch_size, train_config.replace_count, source, rng)
    lo, hi = train_config.t_star_range
    t_star = int(rng.integers(lo, hi + 1))
    S0 = pool.states[idx].copy()
    S, tape = record_rollout(S0, pool.images[idx], params, t_star, rng)
    targets = pool.targets[idx]
    loss = loss_mse(S[..., 0], targets)
    grads, _ = backward_rollout(tape, params, loss_seed(S, targets))
    adamw_update(params, grads, opt, train_config)
    pool.states[idx] = S
    return IterationResult(loss, t_star, idx, tape.depth)


@dataclass
class TrainResult:
    params: object
    history: list = field(default_factory=list)  # (iteration, loss, t_star)

    @property
    def losses(self):
        return [h[1] for h in self.history]


def write_loss_log(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "t_star"])
            for it, loss, t in history:
                w.writerow([it, repr(float(loss)), t])
    except OSError as e:
        raise OSError(f"cannot write loss log {path}: {e}") from e


def train_loop(source, model_config, train_config, checkpoint_path=None, log_path=None,
               params=None, progress=None):
    """Pool training.  ``source(rng)`` yields fresh (image, target, initial_mask) triples.

    A plain list of (image, gt, corrupted) triples is also accepted.
    """
    if not callable(source):
        source = dataset_source(source)
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_params(model_config, rng)
    result = TrainResult(params)
    if train_config.iterations == 0:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params)
        if log_path is not None:
            write_loss_log(log_path, [])
        return result
    pool = seed_pool(source, train_config.pool_capacity, model_config.state_channels, rng)
    opt = OptimizerState.zeros_like(params)
    for it in range(train_config.iterations):
        r = train_iteration(pool, params, opt, train_config, rng, source)
        result.history.append((it, r.loss, r.t_star))
        if progress is not None:
            progress(it, r)
        if it % 100 == 0:
            log.info("iteration %d loss %.5f t*=%d", it, r.loss, r.t_star)
        every = train_config.checkpoint_every
        if checkpoint_path is not None and every and (it + 1) % every == 0:
            save_checkpoint(checkpoint_path, params)
            if log_path is not None:
                write_loss_log(log_path, result.history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    if log_path is not None:
        write_loss_log(log_path, result.history)
    result.pool = pool
    return result
