"""Small dense classifiers with manual backpropagation.

Everything here is plain numpy in double precision. Models are value
objects: training and update functions return new models and never mutate
their inputs, so they are safe to ship across worker threads.

Parameter vectors are flat float64 arrays paired with a layout (one entry
per weight matrix / bias vector) so that client updates can be added,
scaled, clipped and aggregated coordinate-wise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

RELU = "relu"
LINEAR = "none"
_ACTIVATIONS = (RELU, LINEAR)


class ShapeError(ValueError):
    """Input dimensions do not match the model architecture."""


class LayoutError(ValueError):
    """Two parameter vectors (or a vector and an architecture) disagree."""


class ConfigError(ValueError):
    """Invalid training configuration (empty shard, bad epoch count, ...)."""


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: ``y = act(x @ W + b)`` with W of shape (in, out)."""

    layer_id: str
    in_dim: int
    out_dim: int
    activation: str

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeError(f"layer {self.layer_id}: dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


def mlp_arch(dims: Sequence[int]) -> tuple[LayerSpec, ...]:
    """Architecture for a ReLU MLP ``dims[0] -> ... -> dims[-1]``.

    Hidden layers get ReLU, the final layer emits raw logits. At least one
    hidden layer is required so the model has a penultimate representation.
    """
    if len(dims) < 3:
        raise ConfigError("an MLP needs at least one hidden layer")
    layers = []
    for i in range(len(dims) - 1):
        act = LINEAR if i == len(dims) - 2 else RELU
        layers.append(LayerSpec(f"fc{i}", int(dims[i]), int(dims[i + 1]), act))
    return tuple(layers)


@dataclass(frozen=True)
class MlpModel:
    """Dense network defined by ``arch`` with concrete weights.

    ``weights[i]`` has shape ``(in_dim, out_dim)`` and ``biases[i]`` shape
    ``(out_dim,)``. The penultimate-layer representation (PLR) is the
    post-activation output of the last hidden layer.
    """

    arch: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.arch) < 2:
            raise ShapeError("model needs at least one hidden layer")
        if self.arch[-1].activation != LINEAR:
            raise ConfigError("final layer must emit raw logits")
        for spec, w, b in zip(self.arch, self.weights, self.biases):
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise ShapeError(f"layer {spec.layer_id}: parameter shape mismatch")
        for a, b in zip(self.arch, self.arch[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layers {a.layer_id}->{b.layer_id} do not chain")

    @property
    def input_dim(self) -> int:
        return self.arch[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.arch[-1].out_dim

    @property
    def penultimate_index(self) -> int:
        return len(self.arch) - 2

    @property
    def plr_dim(self) -> int:
        return self.arch[self.penultimate_index].out_dim


def init_mlp(arch: Sequence[LayerSpec], seed) -> MlpModel:
    """He-uniform initialised model (bound sqrt(6 / fan_in), zero biases)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in arch:
        bound = math.sqrt(6.0 / spec.in_dim)
        weights.append(rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim)))
        biases.append(np.zeros(spec.out_dim))
    return MlpModel(tuple(arch), tuple(weights), tuple(biases))


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter (or update) vector plus its layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        expect = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.ndim != 1 or len(self.values) != expect:
            raise LayoutError(
                f"vector length {len(self.values)} != layout size {expect}"
            )

    @property
    def size(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def arch_layout(arch: Sequence[LayerSpec]) -> Layout:
    entries = []
    for spec in arch:
        entries.append((f"{spec.layer_id}.W", (spec.in_dim, spec.out_dim)))
        entries.append((f"{spec.layer_id}.b", (spec.out_dim,)))
    return tuple(entries)


def _check_same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise LayoutError("parameter vectors have different layouts")


def flatten(model: MlpModel) -> ParamVector:
    chunks = []
    for w, b in zip(model.weights, model.biases):
        chunks.append(w.ravel())
        chunks.append(b)
    return ParamVector(np.concatenate(chunks).astype(np.float64), arch_layout(model.arch))


def _param_views(arch: Sequence[LayerSpec], flat: np.ndarray):
    """Per-layer (W, b) views into a flat buffer, in layout order."""
    views = []
    off = 0
    for spec in arch:
        wn = spec.in_dim * spec.out_dim
        w = flat[off : off + wn].reshape(spec.in_dim, spec.out_dim)
        off += wn
        b = flat[off : off + spec.out_dim]
        off += spec.out_dim
        views.append((w, b))
    return views


def unflatten(vec: ParamVector, arch: Sequence[LayerSpec]) -> MlpModel:
    if vec.layout != arch_layout(arch):
        raise LayoutError("vector layout does not match architecture")
    weights, biases = [], []
    for w, b in _param_views(arch, vec.values):
        weights.append(w.copy())
        biases.append(b.copy())
    return MlpModel(tuple(arch), tuple(weights), tuple(biases))


def apply_update(theta: ParamVector, delta: ParamVector, scale: float = 1.0) -> ParamVector:
    """``theta + scale * delta`` element-wise (layouts must match)."""
    _check_same_layout(theta, delta)
    return ParamVector(theta.values + scale * delta.values, theta.layout)


def param_delta(new: ParamVector, base: ParamVector) -> ParamVector:
    """Update vector ``new - base`` (a client's delta w.r.t. the global model)."""
    _check_same_layout(new, base)
    return ParamVector(new.values - base.values, new.layout)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _forward_acts(arch, views, batch: np.ndarray) -> list[np.ndarray]:
    """All post-activation outputs; acts[0] is the input batch."""
    a = batch
    acts = [a]
    for spec, (w, b) in zip(arch, views):
        z = a @ w + b
        a = np.maximum(z, 0.0) if spec.activation == RELU else z
        acts.append(a)
    return acts


def _check_batch(model_input_dim: int, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model_input_dim:
        raise ShapeError(
            f"batch shape {batch.shape} incompatible with input dim {model_input_dim}"
        )
    return batch


def forward_with_plr(model: MlpModel, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and penultimate-layer representations for a batch.

    The PLR is the post-activation output of the last hidden layer, one row
    per input sample. The model is not modified.
    """
    batch = _check_batch(model.input_dim, batch)
    views = list(zip(model.weights, model.biases))
    acts = _forward_acts(model.arch, views, batch)
    return acts[-1], acts[-2]


def forward_logits(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    return forward_with_plr(model, batch)[0]


def _backward_flat(
    arch,
    views,
    acts: list[np.ndarray],
    grad_logits: Optional[np.ndarray],
    grad_plr: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop upstream gradients into a flat parameter gradient.

    ``grad_logits`` attaches to the final output, ``grad_plr`` to the last
    hidden activation; either may be None. Returns (flat gradient, gradient
    w.r.t. the input batch).
    """
    n_layers = len(arch)
    size = sum(s.in_dim * s.out_dim + s.out_dim for s in arch)
    gflat = np.zeros(size)
    gviews = _param_views(arch, gflat)

    upstream = grad_logits
    start = n_layers - 1
    if upstream is None:
        # nothing flows from the logits; start at the PLR layer
        if grad_plr is None:
            raise ValueError("need grad_logits and/or grad_plr")
        upstream = grad_plr
        grad_plr = None
        start = n_layers - 2

    for l in range(start, -1, -1):
        spec = arch[l]
        if l == n_layers - 2 and grad_plr is not None:
            upstream = upstream + grad_plr
        if spec.activation == RELU:
            dz = upstream * (acts[l + 1] > 0.0)
        else:
            dz = upstream
        gw, gb = gviews[l]
        np.matmul(acts[l].T, dz, out=gw)
        gb[:] = dz.sum(axis=0)
        upstream = dz @ views[l][0].T
    return gflat, upstream


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Log-sum-exp stabilised, so logits with magnitude up to ~1e3 are safe.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shift = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def cross_entropy_loss_and_grad(
    model: MlpModel, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, ParamVector]:
    """Mean cross-entropy of the model on a labeled batch, plus its gradient."""
    batch = _check_batch(model.input_dim, batch)
    views = list(zip(model.weights, model.biases))
    acts = _forward_acts(model.arch, views, batch)
    loss, dlogits = softmax_cross_entropy(acts[-1], labels)
    gflat, _ = _backward_flat(model.arch, views, acts, dlogits)
    return loss, ParamVector(gflat, arch_layout(model.arch))


# ---------------------------------------------------------------------------
# Optimizers and local training
# ---------------------------------------------------------------------------

SGD = "sgd"
ADAM = "adam"


@dataclass(frozen=True)
class OptimizerState:
    """Optimizer settings; buffers are created fresh per training call."""

    kind: str = SGD
    lr: float = 0.001
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in (SGD, ADAM):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")


class _OptRunner:
    """Per-invocation optimizer buffers over one flat parameter array."""

    def __init__(self, opt: OptimizerState, size: int):
        self.opt = opt
        self.t = 0
        if opt.kind == SGD:
            self.v = np.zeros(size)
        else:
            self.m = np.zeros(size)
            self.v = np.zeros(size)

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        o = self.opt
        if o.kind == SGD:
            self.v *= o.momentum
            self.v += grad
            flat -= o.lr * self.v
        else:
            self.t += 1
            self.m = o.beta1 * self.m + (1 - o.beta1) * grad
            self.v = o.beta2 * self.v + (1 - o.beta2) * grad * grad
            mhat = self.m / (1 - o.beta1**self.t)
            vhat = self.v / (1 - o.beta2**self.t)
            flat -= o.lr * mhat / (np.sqrt(vhat) + o.eps)


def minibatch_plan(n: int, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled mini-batch index arrays (last one may be short)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train_local(
    model: MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    opt: OptimizerState,
    rng_seed,
) -> MlpModel:
    """Mini-batch cross-entropy training with seeded shuffling.

    Deterministic for fixed (model, data, seed); the input model is left
    untouched and a freshly trained copy is returned.
    """
    features = _check_batch(model.input_dim, features)
    labels = np.asarray(labels)
    if len(features) == 0:
        raise ConfigError("cannot train on an empty shard")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")

    rng = np.random.default_rng(rng_seed)
    flat = flatten(model).values.copy()
    views = _param_views(model.arch, flat)
    runner = _OptRunner(opt, len(flat))
    for _ in range(epochs):
        for idx in minibatch_plan(len(features), batch_size, rng):
            acts = _forward_acts(model.arch, views, features[idx])
            _, dlogits = softmax_cross_entropy(acts[-1], labels[idx])
            gflat, _ = _backward_flat(model.arch, views, acts, dlogits)
            runner.step(flat, gflat)
    return unflatten(ParamVector(flat, arch_layout(model.arch)), model.arch)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: MlpModel) -> bytes:
    """Text header (one line per layer), blank line, little-endian f64 payload."""
    header = "".join(
        f"{s.layer_id} {s.in_dim} {s.out_dim} {s.activation}\n" for s in model.arch
    )
    payload = flatten(model).values.astype("<f8").tobytes()
    return header.encode("ascii") + b"\n" + payload


def save_checkpoint(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def parse_checkpoint(raw: bytes) -> MlpModel:
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise LayoutError("checkpoint has no header/payload separator")
    specs = []
    for line in raw[:sep].decode("ascii").splitlines():
        parts = line.split()
        if len(parts) != 4:
            raise LayoutError(f"bad checkpoint header line: {line!r}")
        specs.append(LayerSpec(parts[0], int(parts[1]), int(parts[2]), parts[3]))
    arch = tuple(specs)
    layout = arch_layout(arch)
    expect = sum(int(np.prod(shape)) for _, shape in layout)
    values = np.frombuffer(raw[sep + 2 :], dtype="<f8")
    if len(values) != expect:
        raise LayoutError(f"checkpoint payload has {len(values)} floats, expected {expect}")
    return unflatten(ParamVector(values.astype(np.float64), layout), arch)


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
