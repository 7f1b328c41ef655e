"""Experimental protocol: eval-set selection, zoo, sweeps, portability, robustness."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import AttackType, generate
from .data import LabeledDataset
from .nn import (LayerSpec, TrainConfig, TrainingDiverged, forward_batch, init_model,
                 predict_batch, train)

log = logging.getLogger(__name__)


@dataclass
class EvalSet:
    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    per_class: int
    shortfall: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def as_dataset(self):
        return LabeledDataset(self.images, self.labels, self.ids)

    def image(self, image_id):
        return self.images[self._index()[int(image_id)]]

    def _index(self):
        return {int(i): k for k, i in enumerate(self.ids)}


def select_eval_set(models, dataset, per_class=10):
    """First ``per_class`` images per class (index order) that every model gets right."""
    if not models:
        raise ValueError("need at least one model")
    ok = np.ones(len(dataset), dtype=bool)
    for m in models:
        ok &= predict_batch(m, dataset.images) == dataset.labels
    classes = sorted(set(int(c) for c in dataset.labels))
    keep, counts = [], {c: 0 for c in classes}
    for i in np.flatnonzero(ok):
        c = int(dataset.labels[i])
        if counts[c] < per_class:
            counts[c] += 1
            keep.append(i)
    keep = np.array(keep, dtype=np.int64)
    shortfall = {c: per_class - n for c, n in counts.items() if n < per_class}
    if shortfall:
        log.warning("eval set shortfall per class: %s", shortfall)
    return EvalSet(dataset.ids[keep], dataset.images[keep], dataset.labels[keep], per_class,
                   shortfall)


# ---------------------------------------------------------------------------
# zoo

@dataclass
class ArchConfig:
    name: str
    family: str
    layers: list
    seeds: list
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_id(self, seed):
        return f"{self.name}-s{seed}"

    def to_dict(self):
        return {"name": self.name, "family": self.family, "seeds": list(self.seeds),
                "layers": [spec.to_dict() for spec in self.layers],
                "train": {k: getattr(self.train, k) for k in
                          ("lr", "momentum", "batch_size", "epochs", "weight_decay")}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["family"], [LayerSpec.from_dict(x) for x in d["layers"]],
                   [int(s) for s in d["seeds"]], TrainConfig(**d.get("train", {})))


def shuffle_seed(global_seed, model_seed):
    return int(np.random.SeedSequence([global_seed, model_seed]).generate_state(1)[0])


def _train_one(args):
    arch, seed, train_set, holdout, num_classes, global_seed = args
    model = init_model(arch.model_id(seed), arch.family, train_set.image_shape, arch.layers,
                       num_classes, seed)
    hyper = TrainConfig(**{**arch.train.__dict__, "seed": shuffle_seed(global_seed, seed)})
    return train(model, train_set, hyper, holdout=holdout)


def build_zoo(specs, train_set, holdout=None, num_classes=10, global_seed=0, jobs=1):
    """Train every (architecture, seed) pair; diverging models are logged and skipped."""
    families = {a.family for a in specs}
    total = sum(len(a.seeds) for a in specs)
    if len(families) < 2 or total < 6:
        log.warning("zoo has %d families / %d models; family and correlation analyses "
                    "need at least 2 / 6", len(families), total)
    tasks = [(a, s, train_set, holdout, num_classes, global_seed) for a in specs for s in a.seeds]
    models = []
    for task, result in zip(tasks, _map(_train_one_safe, tasks, jobs)):
        if isinstance(result, Exception):
            log.error("training %s failed: %s", task[0].model_id(task[1]), result)
        else:
            log.info("trained %s: top-1 error %.4f", result.id, result.top1_error)
            models.append(result)
    errors = [m.top1_error for m in models]
    if errors and max(errors) - min(errors) < 0.02:
        log.warning("zoo accuracy spread %.2f points is under 2 points",
                    100 * (max(errors) - min(errors)))
    return models


def _train_one_safe(args):
    try:
        return _train_one(args)
    except TrainingDiverged as exc:
        return exc


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# attack sweep

def _attack_chunk(args):
    model, attack, ids, images, labels, warp = args
    return [generate(model, x, y, attack, image_id=int(i), warp=warp)
            for i, x, y in zip(ids, images, labels)]


def sweep_chunks(zoo, eval_set, attacks, warp="identity", jobs=1, skip=()):
    """Yield ``((model_id, attack), records)`` per chunk in deterministic order."""
    keys = [(m, AttackType(a)) for m in zoo for a in attacks]
    keys = [(m, a) for m, a in keys if (m.id, a) not in set(skip)]
    tasks = [(m, a, eval_set.ids, eval_set.images, eval_set.labels, warp) for m, a in keys]
    if jobs <= 1:
        for (m, a), t in zip(keys, tasks):
            yield (m.id, a), _attack_chunk(t)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for (m, a), recs in zip(keys, pool.map(_attack_chunk, tasks)):
            yield (m.id, a), recs


def attack_sweep(zoo, eval_set, attacks, warp="identity", jobs=1):
    """One record per (model, attack, image); failures are data, never exceptions."""
    records = []
    for _, recs in sweep_chunks(zoo, eval_set, attacks, warp, jobs):
        records.extend(recs)
    return records


# ---------------------------------------------------------------------------
# portability

@dataclass
class PortabilityMatrix:
    attack: AttackType
    model_ids: list
    counts: np.ndarray
    denominators: np.ndarray
    pass_threshold: Optional[float] = None

    @property
    def rates(self):
        n = len(self.model_ids)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.counts / self.denominators[:, None]
        r[self.denominators == 0] = np.nan
        r[np.arange(n), np.arange(n)] = 1.0
        return r

    def off_diagonal(self):
        r = self.rates
        n = len(self.model_ids)
        return [((self.model_ids[i], self.model_ids[j]), r[i, j])
                for i in range(n) for j in range(n) if i != j and not np.isnan(r[i, j])]


def portability_matrix(records, zoo, attack, originals, pass_threshold=None):
    """Transfer counts over successful source adversarials.

    Cell (i, j) counts the successful adversarial images made on model i that
    model j misclassifies (any wrong label). ``originals`` maps image id to the
    clean image. With ``pass_threshold`` only records whose PASS reaches it are
    counted.
    """
    attack = AttackType(attack)
    ids = [m.id for m in zoo]
    pos = {mid: k for k, mid in enumerate(ids)}
    n = len(ids)
    counts = np.zeros((n, n), dtype=np.int64)
    denom = np.zeros(n, dtype=np.int64)
    by_source = {mid: [] for mid in ids}
    for r in records:
        if r.attack != attack or not r.success or r.source_model_id not in pos:
            continue
        if pass_threshold is not None and (r.pass_score is None or r.pass_score < pass_threshold):
            continue
        by_source[r.source_model_id].append(r)
    for mid, recs in by_source.items():
        i = pos[mid]
        denom[i] = len(recs)
        counts[i, i] = len(recs)
        if not recs:
            continue
        advs = np.stack([r.adversarial_image(originals[r.image_id]) for r in recs])
        labels = np.array([r.true_label for r in recs])
        for j, target in enumerate(zoo):
            if j == i:
                continue
            z = forward_batch(target, advs)
            zt = z[np.arange(len(labels)), labels]
            z[np.arange(len(labels)), labels] = -np.inf
            counts[i, j] = int(np.sum(z.max(axis=1) > zt))
    return PortabilityMatrix(attack, ids, counts, denom, pass_threshold)


def family_portability_contrast(matrix, zoo):
    """Mean off-diagonal transfer rate within vs across architecture families."""
    family = {m.id: m.family for m in zoo}
    within, cross = [], []
    for (src, dst), rate in matrix.off_diagonal():
        (within if family[src] == family[dst] else cross).append(rate)
    return {"within_family_mean": float(np.mean(within)) if within else None,
            "cross_family_mean": float(np.mean(cross)) if cross else None}


def mean_portability(matrix):
    rates = [r for _, r in matrix.off_diagonal()]
    return float(np.mean(rates)) if rates else None


# ---------------------------------------------------------------------------
# robustness and correlation

@dataclass
class RobustnessSummary:
    model_id: str
    attack: AttackType
    n_records: int
    n_success: int
    success_rate: float
    mean_l2: Optional[float] = None
    std_l2: Optional[float] = None
    mean_linf: Optional[float] = None
    std_linf: Optional[float] = None
    mean_pass: Optional[float] = None
    std_pass: Optional[float] = None


def robustness_summary(records):
    """Per (model, attack) success rate and population mean/std of the metrics."""
    records = list(records)
    if not records:
        raise ValueError("no records to summarise")
    groups = {}
    for r in records:
        groups.setdefault((r.source_model_id, AttackType(r.attack)), []).append(r)
    out = []
    for (mid, attack), recs in groups.items():
        ok = [r for r in recs if r.success]
        s = RobustnessSummary(mid, attack, len(recs), len(ok), len(ok) / len(recs))
        if ok:
            for name in ("l2", "linf", "pass"):
                vals = np.array([getattr(r, "pass_score" if name == "pass" else name) for r in ok],
                                dtype=np.float64)
                setattr(s, f"mean_{name}", float(np.mean(vals)))
                setattr(s, f"std_{name}", float(np.std(vals)))
        out.append(s)
    return out


def average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(x, y):
    """Spearman's rho with average-rank ties; ``None`` if either side is constant."""
    rx, ry = average_ranks(x), average_ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return None
    return float(np.clip(rx @ ry / den, -1.0, 1.0))


@dataclass
class CorrelationResult:
    attack: AttackType
    rho: Optional[float]
    pairs: list
    accuracy_spread: float
    underpowered: bool

    def to_dict(self):
        return {"attack": str(self.attack), "rho": self.rho, "pairs": self.pairs,
                "accuracy_spread": self.accuracy_spread, "underpowered": self.underpowered}


def accuracy_robustness_correlation(zoo, summaries, attack, min_spread=0.02):
    """Spearman rho between top-1 accuracy and mean minimal-perturbation L2."""
    attack = AttackType(attack)
    l2 = {s.model_id: s.mean_l2 for s in summaries if s.attack == attack}
    pairs = [{"model": m.id, "accuracy": 1.0 - m.top1_error, "mean_l2": l2[m.id]}
             for m in zoo if l2.get(m.id) is not None and m.top1_error is not None]
    if len(pairs) < 4:
        raise ValueError(f"need at least 4 models with a defined mean L2, got {len(pairs)}")
    acc = [p["accuracy"] for p in pairs]
    rho = spearman(acc, [p["mean_l2"] for p in pairs])
    spread = max(acc) - min(acc)
    return CorrelationResult(attack, rho, pairs, spread, spread < min_spread)
