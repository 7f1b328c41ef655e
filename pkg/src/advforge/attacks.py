"""FGS, FGV and HC1 directions and the minimal-step line search.

Images live in the raw [0, 255] pixel domain. A direction is normalised to
unit L-inf norm, so a step ``alpha`` is directly the pre-quantisation L-inf
size of the perturbation in pixel units.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import Objective, forward, forward_batch, input_gradient

MAX_STEP = 255
# FGV/HC1 steps are searched on a grid of 1/FINE_STEPS pixel units.
FINE_STEPS = 100
_BRACKETS = (1, 2, 4, 8, 16, 32, 64, 128, MAX_STEP)


class AttackType(str, enum.Enum):
    FGS = "FGS"
    FGV = "FGV"
    HC1 = "HC1"

    def __str__(self):
        return self.value


class FailureReason(str, enum.Enum):
    ZERO_GRADIENT = "zero_gradient"
    LABEL_NEVER_FLIPS = "label_never_flips"

    def __str__(self):
        return self.value


@dataclass
class Direction:
    vector: np.ndarray
    attack: AttackType
    hot_label: Optional[int] = None

    @property
    def is_zero(self):
        return not np.any(self.vector)


@dataclass
class AdversarialRecord:
    source_model_id: str
    attack: AttackType
    image_id: int
    true_label: int
    success: bool
    adversarial_label: Optional[int] = None
    alpha: Optional[float] = None
    perturbation: Optional[np.ndarray] = None
    l2: Optional[float] = None
    linf: Optional[int] = None
    pass_score: Optional[float] = None
    failure_reason: Optional[FailureReason] = None
    hot_label: Optional[int] = None

    def adversarial_image(self, original):
        if not self.success:
            raise ValueError("failed record has no adversarial image")
        return np.asarray(original, dtype=np.float64) + self.perturbation


def fgs_direction(gradient):
    return Direction(np.sign(np.asarray(gradient, dtype=np.float64)), AttackType.FGS)


def _linf_normalise(g):
    g = np.asarray(g, dtype=np.float64)
    top = np.max(np.abs(g)) if g.size else 0.0
    if top == 0:
        return np.zeros_like(g)
    v = g / top
    # exact unit norm even when the division rounds
    v[np.abs(g) == top] = np.sign(g[np.abs(g) == top])
    return v


def fgv_direction(gradient):
    return Direction(_linf_normalise(gradient), AttackType.FGV)


def select_hot_class(logits, true_label):
    """Highest-scoring class other than ``true_label`` (ties: lowest index)."""
    z = np.array(logits, dtype=np.float64)
    if len(z) < 2:
        raise ValueError("need at least two classes")
    z[true_label] = -np.inf
    return int(np.argmax(z))


def hc_direction(model, image, true_label):
    hot = select_hot_class(forward(model, image), true_label)
    g = input_gradient(model, image, Objective.logit_difference(hot, true_label))
    return Direction(_linf_normalise(g), AttackType.HC1, hot_label=hot)


def attack_direction(model, image, true_label, attack):
    attack = AttackType(attack)
    if attack is AttackType.HC1:
        return hc_direction(model, image, true_label)
    g = input_gradient(model, image, Objective.loss_true_class(true_label))
    return fgs_direction(g) if attack is AttackType.FGS else fgv_direction(g)


def quantize_clip(image):
    """Round half away from zero, then clamp to [0, 255]."""
    x = np.asarray(image, dtype=np.float64)
    return np.clip(np.sign(x) * np.floor(np.abs(x) + 0.5), 0.0, 255.0)


def step_image(image, direction, alpha):
    vec = direction.vector if isinstance(direction, Direction) else direction
    return quantize_clip(np.asarray(image, dtype=np.float64) + alpha * vec)


def is_fooled(logits, true_label):
    """True when some other class strictly outscores ``true_label``.

    A tie with the true class does not count as a flip.
    """
    z = np.asarray(logits)
    if z.ndim == 1:
        return bool(np.any(np.delete(z, true_label) > z[true_label]))
    others = np.delete(z, true_label, axis=1)
    return np.any(others > z[:, [true_label]], axis=1)


def adversarial_label(logits, true_label):
    z = np.array(logits, dtype=np.float64)
    if not is_fooled(z, true_label):
        return None
    return int(np.argmax(z))


def perturbation_norms(original, adversarial):
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    delta = np.rint(b - a)
    return float(np.sqrt(np.sum(delta * delta))), int(np.max(np.abs(delta))) if delta.size else 0


def _search_integer(model, image, true_label, vec):
    # Brackets grow geometrically; each bracket is scanned exhaustively in one
    # batch, so the first flip found is the smallest integer step overall.
    lo = 0
    for hi in _BRACKETS:
        alphas = np.arange(lo + 1, hi + 1, dtype=np.float64)
        batch = quantize_clip(image[None] + alphas.reshape((-1,) + (1,) * image.ndim) * vec)
        hits = is_fooled(forward_batch(model, batch), true_label)
        if np.any(hits):
            return float(alphas[int(np.argmax(hits))])
        lo = hi
    return None


def _search_fine(model, image, true_label, vec):
    def flips(k):
        return is_fooled(forward(model, step_image(image, vec, k / FINE_STEPS)), true_label)

    lo, hi = 0, None
    for a in _BRACKETS:
        if flips(a * FINE_STEPS):
            hi = a * FINE_STEPS
            break
        lo = a * FINE_STEPS
    if hi is None:
        return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if flips(mid):
            hi = mid
        else:
            lo = mid
    return hi / FINE_STEPS


def minimal_adversarial(model, image, true_label, direction, image_id=0):
    """Smallest step along ``direction`` whose quantised image flips the label.

    FGS searches integer steps exactly; FGV and HC1 search steps on a 0.01
    pixel grid. Steps never exceed 255, which saturates every pixel for a
    unit L-inf direction.
    """
    image = np.asarray(image, dtype=np.float64)
    true_label = int(true_label)
    base = dict(source_model_id=model.id, attack=direction.attack, image_id=image_id,
                true_label=true_label, hot_label=direction.hot_label)
    if is_fooled(forward(model, image), true_label):
        raise ValueError(f"image {image_id} is not classified as {true_label} by {model.id!r}")
    if direction.is_zero:
        return AdversarialRecord(success=False, failure_reason=FailureReason.ZERO_GRADIENT, **base)
    if direction.attack is AttackType.FGS:
        alpha = _search_integer(model, image, true_label, direction.vector)
    else:
        alpha = _search_fine(model, image, true_label, direction.vector)
    if alpha is None:
        return AdversarialRecord(success=False, failure_reason=FailureReason.LABEL_NEVER_FLIPS,
                                 **base)
    adv = step_image(image, direction.vector, alpha)
    l2, linf = perturbation_norms(image, adv)
    return AdversarialRecord(success=True, adversarial_label=adversarial_label(forward(model, adv),
                                                                               true_label),
                             alpha=alpha, perturbation=adv - image, l2=l2, linf=linf, **base)


def generate(model, image, true_label, attack, image_id=0, warp="identity"):
    """Direction + line search + PASS for one (model, attack, image)."""
    from .perceptual import pass_score

    direction = attack_direction(model, image, true_label, attack)
    record = minimal_adversarial(model, image, true_label, direction, image_id=image_id)
    if record.success:
        record.pass_score = pass_score(record.adversarial_image(image), image, warp=warp)
    return record


def success_rate(records):
    records = list(records)
    if not records:
        raise ValueError("success rate of an empty record list is undefined")
    return sum(r.success for r in records) / len(records)
