"""Perceptual adversarial similarity: warp alignment followed by SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WARP_ARITY = {"identity": 0, "translation": 2, "affine": 6}


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    def kernel_1d(self):
        r = np.arange(self.window) - (self.window - 1) / 2
        g = np.exp(-(r * r) / (2 * self.sigma ** 2))
        return g / g.sum()

    def kernel(self):
        g = self.kernel_1d()
        return np.outer(g, g)


DEFAULT_SSIM = SsimParams()


def to_gray(image):
    """(H, W), (1, H, W) or (3, H, W) -> (H, W) luminance."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    if x.ndim == 3 and x.shape[0] == 3:
        return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    raise ValueError(f"unsupported image shape {x.shape}")


def _filter_valid(x, g):
    # separable Gaussian, valid region only
    rows = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim_map(a, b, params=DEFAULT_SSIM):
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < params.window:
        raise ValueError(f"image {a.shape} smaller than the {params.window}x{params.window} window")
    g = params.kernel_1d()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, params=DEFAULT_SSIM):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    return float(np.mean(ssim_map(a, b, params)))


# ---------------------------------------------------------------------------
# alignment

@dataclass
class Alignment:
    warped: np.ndarray
    params: np.ndarray
    warp: str
    correlation: float = float("nan")
    iterations: int = 0
    degenerate: bool = False
    history: list = field(default_factory=list)


def warp_matrix(warp, p):
    """2x3 matrix mapping output (x, y) to sampling coordinates in the source."""
    m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    if warp == "translation":
        m[:, 2] += p
    elif warp == "affine":
        m += np.array([[p[0], p[2], p[4]], [p[1], p[3], p[5]]])
    return m


def _bilinear(img, xs, ys):
    h, w = img.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2) if w > 1 else np.zeros_like(xs, dtype=int)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2) if h > 1 else np.zeros_like(ys, dtype=int)
    fx, fy = xs - x0, ys - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def _sample(img, warp, p):
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    m = warp_matrix(warp, p)
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return _bilinear(img, sx, sy), sx, sy


def apply_warp(image, warp, p):
    """Sample ``image`` at warped coordinates; border pixels are replicated."""
    img = to_gray(image)
    if warp == "identity":
        return img.copy()
    return _sample(img, warp, np.asarray(p, dtype=np.float64))[0]


def _jacobian(warp, gx, gy, xs, ys):
    if warp == "translation":
        cols = [gx, gy]
    else:
        cols = [gx * xs, gy * xs, gx * ys, gy * ys, gx, gy]
    return np.stack([c.ravel() for c in cols], axis=1)


def _zncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else float("nan")


def align(candidate, reference, warp="translation", max_iter=50, tol=1e-6):
    """Warp ``candidate`` onto ``reference`` by maximising their normalised correlation.

    Enhanced-correlation Gauss-Newton updates from the identity warp. A step
    that lowers the correlation is halved (up to 10 times). Returns the best
    iterate seen.
    """
    if warp not in WARP_ARITY:
        raise ValueError(f"unknown warp model {warp!r}")
    cand = to_gray(candidate)
    ref = to_gray(reference)
    if cand.shape != ref.shape:
        raise ValueError(f"shape mismatch {cand.shape} vs {ref.shape}")
    p = np.zeros(WARP_ARITY[warp])
    if warp == "identity":
        return Alignment(cand.copy(), p, warp, correlation=_zncc(cand.ravel(), ref.ravel()))
    if np.ptp(cand) == 0 or np.ptp(ref) == 0:
        return Alignment(cand.copy(), np.zeros(WARP_ARITY[warp]), warp, degenerate=True)

    gy, gx = np.gradient(cand)
    r = ref.ravel() - ref.mean()
    r_norm2 = r @ r

    def evaluate(params):
        warped, sx, sy = _sample(cand, warp, params)
        return warped, sx, sy, _zncc(warped.ravel(), ref.ravel())

    warped, sx, sy, rho = evaluate(p)
    best = (rho, p.copy(), warped)
    history = [rho]
    h, w = cand.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    it = 0
    for it in range(1, max_iter + 1):
        if not np.isfinite(rho):
            break
        jac = _jacobian(warp, _bilinear(gx, sx, sy), _bilinear(gy, sx, sy), xs, ys)
        jac = jac - jac.mean(axis=0)
        iw = warped.ravel() - warped.mean()
        hess = jac.T @ jac
        try:
            hinv = np.linalg.inv(hess)
        except np.linalg.LinAlgError:
            break
        proj_i = jac.T @ iw
        proj_r = jac.T @ r
        num = iw @ iw - proj_i @ hinv @ proj_i
        den = iw @ r - proj_r @ hinv @ proj_i
        if den <= 0:
            # correlation too low for the closed-form scale; fall back to a plain GN step
            lam = np.sqrt(iw @ iw / r_norm2)
        else:
            lam = num / den
        dp = hinv @ (jac.T @ (lam * r - iw))
        step = 1.0
        for _ in range(10):
            cand_p = p + step * dp
            nw, nsx, nsy, nrho = evaluate(cand_p)
            if np.isfinite(nrho) and nrho >= rho - 1e-12:
                break
            step *= 0.5
        else:
            break
        p, warped, sx, sy, rho = cand_p, nw, nsx, nsy, nrho
        history.append(rho)
        if rho > best[0]:
            best = (rho, p.copy(), warped)
        if np.linalg.norm(step * dp) < tol:
            break
    rho, p, warped = best
    return Alignment(warped, p, warp, correlation=rho, iterations=it, history=history)


def pass_score(adversarial, original, warp="identity", params=DEFAULT_SSIM):
    """SSIM between the aligned adversarial image and the original."""
    aligned = align(adversarial, original, warp)
    return ssim(aligned.warped, original, params)
