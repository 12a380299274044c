"""Central finite-difference check of the rollout gradient.

The loss is only piecewise smooth: ReLU kinks and the alive threshold switch
discrete decisions.  A sampled coordinate counts only when the rollouts at
theta+h and theta-h take exactly the same decisions as at theta; otherwise
the stencil straddles a kink and another (problem, coordinate) pair is drawn.
"""

import hashlib

import numpy as np

from rnca.nca import ModelConfig, init_batch, init_params
from rnca.train import loss_and_grads

K, SIZE, STEPS = 4, 8, 4


def signature(tape):
    """Hash of update rows, alive masks and ReLU patterns of every step."""
    h = hashlib.sha256()
    for rec in tape.records:
        h.update(rec.rows.tobytes())
        h.update(rec.keep.tobytes())
        if rec.pre_act is not None:
            h.update((rec.pre_act > 0).tobytes())
    return h.digest()


def make_problem(seed=0, hidden=8, batch=1, scale=0.3, density=0.2):
    cfg = ModelConfig(state_channels=K, hidden_width=hidden)
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng, dtype=np.float64)
    # a nonzero last layer so every tensor carries gradient
    p.mlp2_w[:] = rng.normal(0, scale, p.mlp2_w.shape)
    p.mlp2_b[:] = rng.normal(0, scale / 3, p.mlp2_b.shape)
    masks = (rng.random((batch, SIZE, SIZE)) < density).astype(np.float64)
    S0 = init_batch(masks, K, np.float64)
    images = rng.random((batch, SIZE, SIZE, 1))
    targets = rng.random((batch, SIZE, SIZE)) < 0.5
    return p, S0, images, targets


class _Problem:
    def __init__(self, seed):
        self.p, self.S0, self.images, self.targets = make_problem(seed)
        _, self.grads, _, tape = self.run()
        self.sig = signature(tape)

    def run(self):
        return loss_and_grads(self.S0, self.images, self.targets, self.p, STEPS, deterministic=True)


def check(seed=0, h=1e-3, per_tensor=20, problems=8, max_tries=2000, floor=1e-8):
    """Return ({tensor: [relative errors]}, rejected_count)."""
    pool = [_Problem(seed * 1000 + i) for i in range(problems)]
    rng = np.random.default_rng(seed)
    errors, rejected = {}, 0
    for name in pool[0].p.tensors():
        errs, tries = [], 0
        while len(errs) < per_tensor and tries < max_tries:
            prob = pool[tries % problems]
            tries += 1
            a = prob.p.tensors()[name]
            ix = tuple(int(rng.integers(s)) for s in a.shape)
            old = a[ix]
            a[ix] = old + h
            lp, _, _, tp = prob.run()
            a[ix] = old - h
            lm, _, _, tm = prob.run()
            a[ix] = old
            if signature(tp) != prob.sig or signature(tm) != prob.sig:
                rejected += 1
                continue
            fd = (lp - lm) / (2 * h)
            g = prob.grads[name][ix]
            errs.append(abs(fd - g) / max(abs(fd), abs(g), floor))
        errors[name] = errs
    return errors, rejected
