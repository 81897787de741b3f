"""Trainable feature transform and classifier with manual backprop.

The feature transform is two affine maps with a rectifier between them;
the classifier is one affine map followed by a softmax over K+1 outputs.
Everything runs in double precision so analytic gradients can be checked
against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("w1", "b1", "w2", "b2", "wh", "bh")
CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class ModelDims:
    d_in: int
    g_hidden: int
    g_out: int
    n_out: int  # |Y_s| + 1 logits

    def __post_init__(self):
        for name in ("d_in", "g_hidden", "g_out", "n_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")


class AdaptModel:
    """Parameter container for the feature transform g and classifier h."""

    def __init__(self, dims: ModelDims, seed: int, params: dict | None = None):
        self.dims = dims
        self.seed = seed
        if params is not None:
            for name in PARAM_NAMES:
                setattr(self, name, np.array(params[name], dtype=np.float64))
        else:
            rng = np.random.default_rng(seed)
            self.w1 = _fan_in_uniform(rng, (dims.d_in, dims.g_hidden))
            self.b1 = _fan_in_uniform(rng, (dims.g_hidden,), fan_in=dims.d_in)
            self.w2 = _fan_in_uniform(rng, (dims.g_hidden, dims.g_out))
            self.b2 = _fan_in_uniform(rng, (dims.g_out,), fan_in=dims.g_hidden)
            self.wh = _fan_in_uniform(rng, (dims.g_out, dims.n_out))
            self.bh = _fan_in_uniform(rng, (dims.n_out,), fan_in=dims.g_out)
        self._check_shapes()

    def _check_shapes(self):
        for name, shape in param_shapes(self.dims).items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"parameter {name} has shape "
                                 f"{getattr(self, name).shape}, expected {shape}")

    def parameters(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def copy(self) -> "AdaptModel":
        return AdaptModel(
            self.dims, self.seed,
            params={name: getattr(self, name).copy() for name in PARAM_NAMES},
        )


def param_shapes(dims: ModelDims) -> dict:
    return {
        "w1": (dims.d_in, dims.g_hidden),
        "b1": (dims.g_hidden,),
        "w2": (dims.g_hidden, dims.g_out),
        "b2": (dims.g_out,),
        "wh": (dims.g_out, dims.n_out),
        "bh": (dims.n_out,),
    }


def _fan_in_uniform(rng, shape, fan_in=None):
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward_features(model: AdaptModel, x: np.ndarray, return_cache: bool = False):
    """z = g(x) for a batch of input rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims.d_in:
        raise ValueError(
            f"input has shape {x.shape}, expected (batch, {model.dims.d_in})"
        )
    pre = x @ model.w1 + model.b1
    hidden = np.maximum(pre, 0.0)
    z = hidden @ model.w2 + model.b2
    if return_cache:
        return z, {"x": x, "pre": pre, "hidden": hidden}
    return z


def forward_classify(model: AdaptModel, z: np.ndarray, return_cache: bool = False):
    """Class probabilities h(z); rows sum to one."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.dims.g_out:
        raise ValueError(
            f"features have shape {z.shape}, expected (batch, {model.dims.g_out})"
        )
    logits = z @ model.wh + model.bh
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    if return_cache:
        return probs, {"z": z}
    return probs


def predict_labels(model: AdaptModel, x: np.ndarray) -> np.ndarray:
    """1-based argmax labels (lowest index wins ties)."""
    probs = forward_classify(model, forward_features(model, x))
    return np.argmax(probs, axis=1) + 1


class GradientBuffer:
    """Per-parameter accumulators matching an AdaptModel's shapes."""

    def __init__(self, model: AdaptModel):
        for name, p in model.parameters():
            setattr(self, name, np.zeros_like(p))

    def arrays(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def add_scaled(self, other: "GradientBuffer", factor: float = 1.0):
        for name, arr in self.arrays():
            arr += factor * getattr(other, name)
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum((a * a).sum() for _, a in self.arrays())))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for _, a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.arrays()])


def backward_features(model, cache, d_z, buf: GradientBuffer):
    """Accumulate g-parameter gradients for upstream feature gradients d_z."""
    if cache is None:
        raise ValueError("missing forward cache for the feature transform")
    d_z = np.asarray(d_z, dtype=np.float64)
    buf.w2 += cache["hidden"].T @ d_z
    buf.b2 += d_z.sum(axis=0)
    d_hidden = d_z @ model.w2.T
    d_pre = d_hidden * (cache["pre"] > 0.0)
    buf.w1 += cache["x"].T @ d_pre
    buf.b1 += d_pre.sum(axis=0)


def backward_classify(model, cache, d_logits, buf: GradientBuffer):
    """Accumulate h-parameter gradients; returns the gradient w.r.t. z."""
    if cache is None:
        raise ValueError("missing forward cache for the classifier")
    d_logits = np.asarray(d_logits, dtype=np.float64)
    buf.wh += cache["z"].T @ d_logits
    buf.bh += d_logits.sum(axis=0)
    return d_logits @ model.wh.T


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class SgdMomentum:
    """Gradient descent with classical momentum and global-norm clipping."""

    def __init__(self, lr: float, momentum: float = 0.9, grad_clip: float = 5.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity: dict[str, np.ndarray] | None = None

    def step(self, model: AdaptModel, grads: GradientBuffer):
        if not grads.all_finite():
            bad = [n for n, a in grads.arrays() if not np.isfinite(a).all()]
            raise ValueError(f"non-finite gradient in {bad}; refusing to step")
        norm = grads.global_norm()
        factor = self.grad_clip / norm if norm > self.grad_clip else 1.0
        if self.velocity is None:
            self.velocity = {n: np.zeros_like(a) for n, a in grads.arrays()}
        for name, g in grads.arrays():
            v = self.velocity[name]
            v *= self.momentum
            v += factor * g
            getattr(model, name)[...] -= self.lr * v

    def state(self) -> dict:
        if self.velocity is None:
            return {"velocity": None}
        return {"velocity": {n: v.tolist() for n, v in self.velocity.items()}}

    def load_state(self, state: dict):
        vel = state.get("velocity")
        if vel is None:
            self.velocity = None
        else:
            self.velocity = {n: np.array(v, dtype=np.float64) for n, v in vel.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: AdaptModel, path, extra: dict | None = None) -> None:
    """JSON checkpoint with flat parameter arrays; reload is bit-exact.

    Shapes are recovered from the stored dims, and JSON floats use the
    shortest round-trip representation, so load(save(m)) reproduces the
    parameters exactly.
    """
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "dims": {
            "d_in": model.dims.d_in,
            "g_hidden": model.dims.g_hidden,
            "g_out": model.dims.g_out,
            "n_out": model.dims.n_out,
        },
        "seed": model.seed,
        "params": {name: p.ravel().tolist() for name, p in model.parameters()},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, extra)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(
            f"unsupported checkpoint schema {payload.get('schema_version')!r}"
        )
    dims = ModelDims(**payload["dims"])
    shapes = param_shapes(dims)
    params = {
        name: np.array(flat, dtype=np.float64).reshape(shapes[name])
        for name, flat in payload["params"].items()
    }
    model = AdaptModel(dims, payload["seed"], params=params)
    return model, payload.get("extra", {})
