import numpy as np
import pytest

from advforge.nn import LayerSpec, Model, _run_forward, init_model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def linear_model(w, b=None, shape=None, scale=1.0, model_id="linear"):
    """Softmax-linear classifier ``W @ x + b`` on inputs of ``shape``."""
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(len(w)) if b is None else np.asarray(b, dtype=np.float64)
    shape = shape or (w.shape[1],)
    layers = [LayerSpec("dense", units=len(w))]
    params = [(w, b)]
    if len(shape) > 1:
        layers.insert(0, LayerSpec("flatten"))
        params.insert(0, ())
    return Model(model_id, "linear", shape, layers, params, len(w), input_scale=scale)


def activation_pattern(model, x):
    """ReLU masks and max-pool winners of one forward pass."""
    _, caches = _run_forward(model, np.asarray(x, dtype=np.float64)[None])
    out = []
    for spec, cache in zip(model.layers, caches):
        if spec.kind == "relu":
            out.append(cache.tobytes())
        elif spec.kind == "maxpool2d":
            out.append(cache[1].tobytes())
    return out


def smooth_stencil(model, x, idx, h):
    """True when the network is a single smooth piece on ``x[idx] +- h``.

    A central difference across a ReLU kink or a max-pool switch measures an
    average of two one-sided slopes, not the derivative.
    """
    base = activation_pattern(model, x)
    for sign in (1, -1):
        y = x.copy()
        y[idx] += sign * h
        if activation_pattern(model, y) != base:
            return False
    return True


def scan_oracle(w, b, scale, image, true_label, vec, alphas):
    """First alpha in ``alphas`` whose rounded, clamped step flips a linear model."""
    for a in alphas:
        x = np.clip(np.floor(image + a * vec + 0.5), 0, 255)
        z = w @ (x.ravel() * scale) + b
        if np.any(np.delete(z, true_label) > z[true_label]):
            return a
    return None


def linear_instance(seed):
    rng = np.random.default_rng(seed)
    k, d = rng.integers(2, 11), rng.integers(2, 50)
    w = rng.normal(size=(k, d)) * rng.choice([0.05, 0.3, 1.0, 3.0])
    b = rng.normal(size=k) * rng.choice([0.0, 1.0, 4.0])
    image = rng.integers(0, 256, d).astype(np.float64)
    z = w @ (image / 255) + b
    return w, b, image, int(np.argmax(z)), np.sort(z)[-1] > np.sort(z)[-2]


FAMILY_LAYERS = {
    "mlp": [LayerSpec("flatten"), LayerSpec("dense", units=12), LayerSpec("relu"),
            LayerSpec("dense", units=10)],
    "cnn-shallow": [LayerSpec("conv2d", channels=4, kernel=5), LayerSpec("relu"),
                    LayerSpec("maxpool2d", kernel=2), LayerSpec("flatten"),
                    LayerSpec("dense", units=10)],
    "cnn-deep": [LayerSpec("conv2d", channels=4, kernel=3, padding=1), LayerSpec("relu"),
                 LayerSpec("conv2d", channels=6, kernel=3, stride=2), LayerSpec("relu"),
                 LayerSpec("maxpool2d", kernel=2), LayerSpec("flatten"),
                 LayerSpec("dense", units=16), LayerSpec("relu"), LayerSpec("dense", units=10)],
}


@pytest.fixture(params=sorted(FAMILY_LAYERS))
def family_model(request):
    return init_model(request.param, request.param, (1, 14, 14), FAMILY_LAYERS[request.param],
                      10, seed=11)
