"""Small numpy neural networks with exact gradients w.r.t. the input image.

All tensors are float64 numpy arrays. Images are (C, H, W) (or any shape the
first layer accepts) with raw pixel values; a model multiplies its input by
``input_scale`` (1/255 for the zoo) before the first layer, so gradients
returned by :func:`input_gradient` are in raw pixel units.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: Optional[int] = None
    channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and not (self.units and self.units > 0):
            raise ValueError("dense layer needs positive units")
        if self.kind == "conv2d" and not (self.channels and self.kernel):
            raise ValueError("conv2d layer needs channels and kernel")
        if self.kind == "maxpool2d" and not self.kernel:
            raise ValueError("maxpool2d layer needs kernel")

    @property
    def step(self):
        if self.stride:
            return self.stride
        return self.kernel if self.kind == "maxpool2d" else 1

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        if self.kind == "dense":
            if len(in_shape) != 1:
                raise ShapeError(f"dense expects a flat input, got {in_shape}")
            return (self.units,)
        if self.kind in ("relu",):
            return in_shape
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        pad = self.padding if self.kind == "conv2d" else 0
        ho = (h + 2 * pad - self.kernel) // self.step + 1
        wo = (w + 2 * pad - self.kernel) // self.step + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.kind} kernel {self.kernel} does not fit input {in_shape}")
        return (self.channels if self.kind == "conv2d" else c, ho, wo)

    def param_shapes(self, in_shape):
        if self.kind == "dense":
            return [(self.units, in_shape[0]), (self.units,)]
        if self.kind == "conv2d":
            return [(self.channels, in_shape[0], self.kernel, self.kernel), (self.channels,)]
        return []

    def to_dict(self):
        d = {"kind": self.kind}
        for key in ("units", "channels", "kernel", "stride"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.padding:
            d["padding"] = self.padding
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def infer_shapes(input_shape, layers):
    """Shapes flowing through ``layers``: ``[input_shape, out_1, ..., out_n]``."""
    shapes = [tuple(input_shape)]
    for spec in layers:
        shapes.append(spec.output_shape(shapes[-1]))
    return shapes


@dataclass
class Model:
    id: str
    family: str
    input_shape: tuple
    layers: list
    params: list
    num_classes: int
    seed: int = 0
    top1_error: Optional[float] = None
    input_scale: float = 1.0 / 255.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        shapes = infer_shapes(self.input_shape, self.layers)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"layers produce {shapes[-1]}, expected ({self.num_classes},)")
        frozen = []
        for spec, in_shape, p in zip(self.layers, shapes, self.params):
            want = spec.param_shapes(in_shape)
            if [tuple(a.shape) for a in p] != [tuple(s) for s in want]:
                raise ShapeError(f"{spec.kind} weights {[a.shape for a in p]} != {want}")
            arrs = []
            for a in p:
                a = np.array(a, dtype=np.float64)
                a.flags.writeable = False
                arrs.append(a)
            frozen.append(tuple(arrs))
        if len(frozen) != len(self.layers):
            raise ShapeError("one parameter tuple per layer required")
        self.params = frozen

    def weights_digest(self):
        h = hashlib.sha256()
        for p in self.params:
            for a in p:
                h.update(a.tobytes())
        return h.hexdigest()

    def with_params(self, params, **changes):
        return replace(self, params=params, **changes)


def init_model(model_id, family, input_shape, layers, num_classes, seed,
               input_scale=1.0 / 255.0):
    """He-uniform weights, zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    shape = tuple(input_shape)
    for spec in layers:
        shapes = spec.param_shapes(shape)
        if shapes:
            w_shape, b_shape = shapes
            fan_in = int(np.prod(w_shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params.append((rng.uniform(-bound, bound, size=w_shape), np.zeros(b_shape)))
        else:
            params.append(())
        shape = spec.output_shape(shape)
    return Model(model_id, family, tuple(input_shape), list(layers), params, num_classes,
                 seed=seed, input_scale=input_scale)


# ---------------------------------------------------------------------------
# layer kernels, batched over the leading axis

def _windows(x, k, s):
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _conv_fwd(spec, p, x):
    w, b = p
    pad = spec.padding
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k, s = spec.kernel, spec.step
    win = _windows(x, k, s)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), (x.shape, cols)


def _conv_bwd(spec, p, cache, dout, need_params):
    w, _ = p
    xshape, cols = cache
    n, f, ho, wo = dout.shape
    k, s, pad = spec.kernel, spec.step, spec.padding
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    grads = None
    if need_params:
        grads = ((dmat.T @ cols).reshape(w.shape), dmat.sum(axis=0))
    dcols = (dmat @ w.reshape(f, -1)).reshape(n, ho, wo, xshape[1], k, k)
    dx = np.zeros(xshape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, grads


def _pool_fwd(spec, p, x):
    k, s = spec.kernel, spec.step
    win = _windows(x, k, s)
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_bwd(spec, p, cache, dout, need_params):
    xshape, arg = cache
    k, s = spec.kernel, spec.step
    ho, wo = arg.shape[2:]
    dx = np.zeros(xshape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dout * (arg == i * k + j)
    return dx, None


def _dense_fwd(spec, p, x):
    w, b = p
    return x @ w.T + b, x


def _dense_bwd(spec, p, x, dout, need_params):
    w, _ = p
    grads = (dout.T @ x, dout.sum(axis=0)) if need_params else None
    return dout @ w, grads


def _relu_fwd(spec, p, x):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(spec, p, mask, dout, need_params):
    return dout * mask, None


def _flat_fwd(spec, p, x):
    return x.reshape(len(x), -1), x.shape


def _flat_bwd(spec, p, shape, dout, need_params):
    return dout.reshape(shape), None


_KERNELS = {
    "dense": (_dense_fwd, _dense_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "maxpool2d": (_pool_fwd, _pool_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "flatten": (_flat_fwd, _flat_bwd),
}


def _check_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"model {model.id!r} expects input shape {model.input_shape}, "
                         f"got {tuple(x.shape[1:])}")
    return x


def _run_forward(model, x):
    a = x * model.input_scale
    caches = []
    for spec, p in zip(model.layers, model.params):
        a, cache = _KERNELS[spec.kind][0](spec, p, a)
        caches.append(cache)
    return a, caches


def _run_backward(model, caches, dout, need_params=False):
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[i]
        dout, grads[i] = _KERNELS[spec.kind][1](spec, model.params[i], caches[i], dout, need_params)
    return dout * model.input_scale, grads


def forward_batch(model, images):
    """Logits of shape (N, num_classes) for a batch of images."""
    x = _check_batch(model, images)
    return _run_forward(model, x)[0]


def forward(model, image):
    """Logits for one image; raises :class:`ShapeError` on a shape mismatch."""
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape) != model.input_shape:
        raise ShapeError(f"model {model.id!r} expects input shape {model.input_shape}, "
                         f"got {tuple(image.shape)}")
    return forward_batch(model, image[None])[0]


def predict_batch(model, images, batch_size=512):
    """Top-1 labels; ties go to the lowest class index."""
    out = [forward_batch(model, images[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_label(label, k):
    if not (0 <= int(label) < k) or int(label) != label:
        raise ValueError(f"label {label} outside [0, {k})")


def softmax_cross_entropy(logits, label):
    """``-log softmax(logits)[label]``, accurate for tiny losses too."""
    z = np.asarray(logits, dtype=np.float64)
    _check_label(label, len(z))
    if z[label] == z.max():
        # log1p keeps full relative precision when the label dominates
        return float(np.log1p(np.sum(np.exp(np.delete(z, label) - z[label]))))
    m = z.max()
    return float(m + np.log(np.sum(np.exp(z - m))) - z[label])


# ---------------------------------------------------------------------------
# objectives and input gradients

@dataclass(frozen=True)
class Objective:
    kind: str
    label: Optional[int] = None
    hot: Optional[int] = None
    cold: Optional[int] = None

    @classmethod
    def loss_true_class(cls, label):
        return cls("loss_true_class", label=int(label))

    @classmethod
    def logit_difference(cls, hot, cold):
        if hot == cold:
            raise ValueError("hot and cold labels must differ")
        return cls("logit_difference", hot=int(hot), cold=int(cold))

    def validate(self, num_classes):
        if self.kind == "loss_true_class":
            _check_label(self.label, num_classes)
        elif self.kind == "logit_difference":
            _check_label(self.hot, num_classes)
            _check_label(self.cold, num_classes)
        else:
            raise ValueError(f"unknown objective {self.kind!r}")

    def value(self, logits):
        if self.kind == "loss_true_class":
            return softmax_cross_entropy(logits, self.label)
        return float(logits[self.hot] - logits[self.cold])

    def logit_gradient(self, logits):
        if self.kind == "loss_true_class":
            g = softmax(logits)
            # p - 1 cancels when p is close to 1; the other classes sum exactly
            g[self.label] = -np.sum(np.delete(g, self.label))
            return g
        g = np.zeros_like(logits)
        g[self.hot], g[self.cold] = 1.0, -1.0
        return g


def objective_value(model, image, objective):
    objective.validate(model.num_classes)
    return objective.value(forward(model, image))


def input_gradient(model, image, objective):
    """d objective / d pixel, same shape as ``image``."""
    objective.validate(model.num_classes)
    x = _check_batch(model, np.asarray(image, dtype=np.float64)[None])
    logits, caches = _run_forward(model, x)
    dlogits = objective.logit_gradient(logits[0])[None]
    dx, _ = _run_backward(model, caches, dlogits)
    return dx[0]


# ---------------------------------------------------------------------------
# training and evaluation

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    weight_decay: float = 0.0
    holdout_fraction: float = 0.1

    def validate(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training hyperparameters: {self}")


def _batch_loss_grads(model, x, y, weight_decay):
    logits, caches = _run_forward(model, x)
    p = softmax(logits)
    n = len(y)
    loss = float(np.mean(-np.log(np.maximum(p[np.arange(n), y], 1e-300))))
    p[np.arange(n), y] -= 1.0
    _, grads = _run_backward(model, caches, p / n, need_params=True)
    if weight_decay:
        grads = [tuple(g + weight_decay * w for g, w in zip(gs, ws)) if gs else gs
                 for gs, ws in zip(grads, model.params)]
    return loss, grads


def train(model, train_set, hyper, holdout=None):
    """SGD with momentum; returns a new :class:`Model` with ``top1_error`` set.

    Without an explicit ``holdout`` set, a seeded ``holdout_fraction`` of
    ``train_set`` is kept aside for the recorded error.
    """
    hyper.validate()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(hyper.seed)
    if holdout is None:
        order = rng.permutation(len(train_set))
        n_hold = max(1, int(round(hyper.holdout_fraction * len(train_set))))
        holdout = train_set.subset(np.sort(order[:n_hold]))
        train_set = train_set.subset(np.sort(order[n_hold:]))
    x_all = _check_batch(model, train_set.images)
    y_all = train_set.labels

    params = [tuple(np.array(a) for a in p) for p in model.params]
    velocity = [tuple(np.zeros_like(a) for a in p) for p in params]
    work = model.with_params(params)
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(y_all))
        total = 0.0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grads = _batch_loss_grads(work, x_all[idx], y_all[idx], hyper.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"model {model.id!r}: non-finite loss at epoch {epoch}, "
                                       f"batch starting {start}")
            total += loss * len(idx)
            new_v, new_p = [], []
            for ps, vs, gs in zip(params, velocity, grads):
                vs = tuple(hyper.momentum * v - hyper.lr * g for v, g in zip(vs, gs)) if gs else vs
                new_v.append(vs)
                new_p.append(tuple(a + v for a, v in zip(ps, vs)))
            params, velocity = new_p, new_v
            work = model.with_params(params)
        log.debug("model %s epoch %d loss %.5f", model.id, epoch, total / len(y_all))
        if not all(np.all(np.isfinite(a)) for p in params for a in p):
            raise TrainingDiverged(f"model {model.id!r}: non-finite weights after epoch {epoch}")
    return work.with_params(work.params, top1_error=evaluate(work, holdout, 1))


def evaluate(model, dataset, k=1, batch_size=512):
    """Fraction of samples whose label is not among the ``k`` highest logits.

    Class ranking breaks ties towards the lower class index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if not 1 <= k <= model.num_classes:
        raise ValueError(f"k={k} outside [1, {model.num_classes}]")
    misses = 0
    for start in range(0, len(dataset), batch_size):
        z = forward_batch(model, dataset.images[start:start + batch_size])
        y = dataset.labels[start:start + batch_size]
        zt = z[np.arange(len(y)), y][:, None]
        lower = np.arange(model.num_classes)[None, :] < y[:, None]
        rank = np.sum(z > zt, axis=1) + np.sum((z == zt) & lower, axis=1)
        misses += int(np.sum(rank >= k))
    return misses / len(dataset)
