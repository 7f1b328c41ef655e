"""``advforge`` command line: train / select / attack / report / verify."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as fmt
from .attacks import AttackType, is_fooled, perturbation_norms
from .bench import (EvalSet, accuracy_robustness_correlation, build_zoo,
                    family_portability_contrast, mean_portability, portability_matrix,
                    robustness_summary, select_eval_set, sweep_chunks)
from .config import ConfigError, RunConfig
from .container import ContainerError, load_model, save_model
from .data import IdxError, read_idx, write_idx
from .nn import evaluate, forward

log = logging.getLogger("advforge")

ATTACK_ORDER = [a.value for a in AttackType]
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class RunError(RuntimeError):
    pass


class Paths:
    def __init__(self, out):
        self.out = Path(out)
        self.models = self.out / "models"
        self.manifest = self.out / "zoo.json"
        self.evalset = self.out / "evalset"
        self.records = self.out / "records.csv"
        self.adv = self.out / "adv"
        self.report = self.out / "report"

    def model_file(self, model_id):
        return self.models / f"{model_id}.advzoo"

    def dump_file(self, model_id, attack):
        return self.adv / f"{model_id}__{attack}.idx"


def _write_atomic(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data if isinstance(data, bytes) else data.encode("utf-8"))
    os.replace(tmp, path)


def _image_dump(images):
    images = np.asarray(images)
    return images[:, 0] if images.shape[1] == 1 else images


def _from_dump(array, image_shape):
    return np.asarray(array, dtype=np.float64).reshape((len(array),) + tuple(image_shape))


# ---------------------------------------------------------------------------
# loading helpers

def load_zoo(paths):
    if not paths.manifest.exists():
        raise RunError(f"{paths.manifest} missing; run `advforge train` first")
    manifest = json.loads(paths.manifest.read_text())
    try:
        return [load_model(paths.out / m["file"]) for m in manifest["models"]]
    except (OSError, ContainerError) as exc:
        raise RunError(f"cannot load zoo: {exc}") from exc


def load_eval_set(paths):
    meta_file = paths.evalset / "meta.json"
    if not meta_file.exists():
        return None
    meta = json.loads(meta_file.read_text())
    images = read_idx(paths.evalset / "images.idx")
    labels = read_idx(paths.evalset / "labels.idx")
    shape = tuple(meta["image_shape"])
    return EvalSet(np.array(meta["ids"], dtype=np.int64), _from_dump(images, shape),
                   labels.astype(np.int64), meta["per_class"],
                   {int(k): v for k, v in meta["shortfall"].items()})


def save_eval_set(paths, ev):
    paths.evalset.mkdir(parents=True, exist_ok=True)
    write_idx(paths.evalset / "images.idx", _image_dump(ev.images))
    write_idx(paths.evalset / "labels.idx", ev.labels)
    meta = {"ids": [int(i) for i in ev.ids], "per_class": ev.per_class,
            "image_shape": list(ev.images.shape[1:]),
            "shortfall": {str(k): v for k, v in sorted(ev.shortfall.items())}}
    _write_atomic(paths.evalset / "meta.json", fmt.dump_json(meta))


def load_records_with_images(paths, ev, zoo):
    """Records from CSV, with perturbations restored from the IDX dumps."""
    if not paths.records.exists():
        raise RunError(f"{paths.records} missing; run `advforge attack` first")
    records = fmt.parse_records(paths.records.read_text())
    index = {int(i): k for k, i in enumerate(ev.ids)}
    dumps = {}
    for r in records:
        key = (r.source_model_id, str(r.attack))
        if key not in dumps:
            f = paths.dump_file(*key)
            if not f.exists():
                raise RunError(f"adversarial image dump {f} missing")
            dumps[key] = _from_dump(read_idx(f), ev.images.shape[1:])
        if r.image_id not in index:
            raise RunError(f"record references image {r.image_id} outside the eval set")
        if r.success:
            k = index[r.image_id]
            r.perturbation = dumps[key][k] - ev.images[k]
    return records


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg, paths, jobs):
    train_set, test_set = cfg.datasets()
    models = build_zoo(cfg.zoo, train_set, test_set, num_classes=cfg.dataset.num_classes,
                       global_seed=cfg.seed, jobs=jobs)
    paths.models.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in models:
        save_model(m, paths.model_file(m.id))
        rows.append({"id": m.id, "family": m.family, "seed": m.seed,
                     "file": str(paths.model_file(m.id).relative_to(paths.out)),
                     "top1_error": m.top1_error,
                     f"top{cfg.top_k}_error": evaluate(m, test_set, cfg.top_k)})
    _write_atomic(paths.manifest, fmt.dump_json({"top_k": cfg.top_k, "models": rows}))
    expected = [a.model_id(s) for a in cfg.zoo for s in a.seeds]
    failed = sorted(set(expected) - {m.id for m in models})
    for mid in failed:
        log.error("model %s failed to train", mid)
    print(f"trained {len(models)}/{len(expected)} models -> {paths.manifest}")
    return 1 if failed else 0


def cmd_select(cfg, paths, jobs):
    zoo = load_zoo(paths)
    train_set, _ = cfg.datasets()
    ev = select_eval_set(zoo, train_set, cfg.per_class)
    save_eval_set(paths, ev)
    print(f"selected {len(ev)} images ({cfg.per_class} per class requested)"
          + (f", shortfall {ev.shortfall}" if ev.shortfall else ""))
    return 0


def _completed_prefix(paths, keys, n_images):
    """Complete (model, attack) chunks at the start of an existing records CSV."""
    if not paths.records.exists():
        return 0, []
    text = paths.records.read_text()
    lines = text.split("\n")
    if lines[0] != ",".join(fmt.RECORD_FIELDS):
        return 0, []
    # the last element is "" after a trailing newline, or a torn row otherwise
    body = lines[1:-1]
    done, kept = 0, []
    for key in keys:
        chunk = body[done * n_images:(done + 1) * n_images]
        if len(chunk) < n_images or not paths.dump_file(*key).exists():
            break
        if any(ln.split(",")[1:3] != [key[0], key[1]] for ln in chunk):
            break
        kept.extend(chunk)
        done += 1
    return done, kept


def cmd_attack(cfg, paths, jobs, attacks=None, resume=False):
    zoo = load_zoo(paths)
    ev = load_eval_set(paths)
    if ev is None:
        cmd_select(cfg, paths, jobs)
        ev = load_eval_set(paths)
    if len(ev) == 0:
        raise RunError("eval set is empty; no image is classified correctly by every model")
    attacks = [a for a in ATTACK_ORDER if a in (attacks or cfg.attacks)]
    keys = [(m.id, a) for m in zoo for a in attacks]
    paths.adv.mkdir(parents=True, exist_ok=True)
    done, kept = _completed_prefix(paths, keys, len(ev)) if resume else (0, [])
    if done:
        log.info("resuming after %d completed chunks", done)
    header = ",".join(fmt.RECORD_FIELDS) + "\n"
    _write_atomic(paths.records, header + "".join(ln + "\n" for ln in kept))
    n_fail = 0
    with open(paths.records, "a", newline="") as out:
        for (mid, attack), recs in sweep_chunks(zoo, ev, attacks, cfg.warp, jobs,
                                                 skip={(m, AttackType(a)) for m, a in keys[:done]}):
            advs = np.stack([r.adversarial_image(x) if r.success else x
                             for r, x in zip(recs, ev.images)])
            dump = paths.dump_file(mid, str(attack))
            tmp = dump.with_name(dump.name + ".tmp")
            write_idx(tmp, _image_dump(advs))
            os.replace(tmp, dump)
            out.write(fmt.format_records(recs, header=False))
            out.flush()
            n_fail += sum(not r.success for r in recs)
            log.info("%s %s: %d/%d successful", mid, attack, sum(r.success for r in recs), len(recs))
    total = len(keys) * len(ev)
    print(f"wrote {total} records to {paths.records} ({n_fail} generation failures this run)")
    return 0


def build_report(cfg, paths):
    """Every report file as ``{name: text}``; nothing is written here."""
    zoo = load_zoo(paths)
    ev = load_eval_set(paths)
    if ev is None:
        raise RunError("eval set missing; run `advforge select` or `advforge attack` first")
    records = load_records_with_images(paths, ev, zoo)
    if not records:
        raise RunError(f"{paths.records} holds no records")
    originals = {int(i): x for i, x in zip(ev.ids, ev.images)}
    present = [a for a in ATTACK_ORDER if any(str(r.attack) == a for r in records)]
    files = {}
    summaries = robustness_summary(records)
    order = {m.id: k for k, m in enumerate(zoo)}
    summaries.sort(key=lambda s: (order.get(s.model_id, len(order)), ATTACK_ORDER.index(str(s.attack))))
    files["summary.csv"] = fmt.format_summary(summaries)
    matrices, counts, trends, correlations = [], [], {"std_convention": "population"}, []
    for a in present:
        m = portability_matrix(records, zoo, a, originals)
        matrices.append(m)
        counts.append(fmt.matrix_counts(m))
        files[f"portability_{a}.csv"] = fmt.format_matrix(m)
        for thr in cfg.pass_thresholds:
            mp = portability_matrix(records, zoo, a, originals, pass_threshold=thr)
            counts.append(fmt.matrix_counts(mp))
            files[f"portability_{a}_pass{thr:g}.csv"] = fmt.format_matrix(mp)
        contrast = family_portability_contrast(m, zoo)
        rates = [s.success_rate for s in summaries if str(s.attack) == a]
        entry = {"mean_portability": mean_portability(m), **contrast,
                 "min_success_rate": min(rates), "rho": None, "underpowered": None}
        try:
            c = accuracy_robustness_correlation(zoo, summaries, a)
        except ValueError as exc:
            log.warning("correlation for %s skipped: %s", a, exc)
        else:
            correlations.append(c)
            files[f"correlation_{a}.json"] = fmt.dump_json(c.to_dict())
            entry.update(rho=c.rho, underpowered=c.underpowered)
        trends[a] = entry
    files["portability.json"] = fmt.dump_json(counts)
    files["trends.json"] = fmt.dump_json(trends)
    files["fig2a-pass-success.dat"] = fmt.plot_pass_success(summaries)
    files["fig2b-norms.dat"] = fmt.plot_norms(summaries)
    files["fig3-matrix.dat"] = fmt.plot_matrices(matrices)
    files["correlation-scatter.dat"] = fmt.plot_correlation(correlations)
    return files


def cmd_report(cfg, paths, jobs):
    files = build_report(cfg, paths)
    paths.report.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        _write_atomic(paths.report / name, text)
    print(f"wrote {len(files)} report files to {paths.report}")
    return 0


def verify_run(paths):
    """Replay stored adversarial images; returns a list of mismatch messages."""
    zoo = {m.id: m for m in load_zoo(paths)}
    ev = load_eval_set(paths)
    records = fmt.parse_records(paths.records.read_text())
    index = {int(i): k for k, i in enumerate(ev.ids)}
    problems = []
    advs = {}
    for r in records:
        key = (r.source_model_id, str(r.attack))
        if key not in advs:
            advs[key] = _from_dump(read_idx(paths.dump_file(*key)), ev.images.shape[1:])
        if not r.success:
            continue
        k = index[r.image_id]
        adv, orig = advs[key][k], ev.images[k]
        z = forward(zoo[r.source_model_id], adv)
        if not is_fooled(z, r.true_label) or int(np.argmax(z)) != r.adversarial_label:
            problems.append(f"{key} image {r.image_id}: source model does not reproduce "
                            f"label {r.adversarial_label}")
        l2, linf = perturbation_norms(orig, adv)
        if f"{l2:.6f}" != f"{r.l2:.6f}" or linf != r.linf:
            problems.append(f"{key} image {r.image_id}: stored norms differ from replay")
    stored = json.loads((paths.report / "portability.json").read_text())
    for entry in stored:
        ids, attack, thr = entry["model_ids"], entry["attack"], entry["pass_threshold"]
        n = len(ids)
        counts = np.zeros((n, n), dtype=np.int64)
        denom = np.zeros(n, dtype=np.int64)
        for r in records:
            if str(r.attack) != attack or not r.success:
                continue
            if thr is not None and r.pass_score < thr:
                continue
            i = ids.index(r.source_model_id)
            denom[i] += 1
            adv = advs[(r.source_model_id, attack)][index[r.image_id]]
            for j, target in enumerate(ids):
                if j == i or is_fooled(forward(zoo[target], adv), r.true_label):
                    counts[i, j] += 1
        if denom.tolist() != entry["denominators"] or counts.tolist() != entry["counts"]:
            problems.append(f"portability counts for {attack} (pass >= {thr}) do not replay")
        if thr is None:
            _, _, cells = fmt.parse_matrix((paths.report / f"portability_{attack}.csv").read_text())
            for i, src in enumerate(ids):
                for j, dst in enumerate(ids):
                    want = "100.00" if i == j else (
                        fmt.NA if denom[i] == 0 else f"{100 * counts[i, j] / denom[i]:.2f}")
                    if cells[src][dst] != want:
                        problems.append(f"{attack} cell {src}->{dst}: {cells[src][dst]} != {want}")
    return problems


def cmd_verify(cfg, paths, jobs):
    if not (paths.report / "portability.json").exists():
        raise RunError("report missing; run `advforge report` first")
    problems = verify_run(paths)
    for p in problems:
        print("MISMATCH", p)
    print("verify: ok" if not problems else f"verify: {len(problems)} mismatches")
    return 0 if not problems else 1


COMMANDS = {"train": cmd_train, "select": cmd_select, "attack": cmd_attack,
            "report": cmd_report, "verify": cmd_verify}


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="experiment.example", help="run config (YAML)")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides config seed)")
    common.add_argument("--jobs", type=int, help="worker processes (overrides config jobs)")
    parser = argparse.ArgumentParser(prog="advforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "attack":
            p.add_argument("--attacks", help="comma-separated subset of FGS,FGV,HC1")
            p.add_argument("--resume", action="store_true",
                           help="keep completed (model, attack) chunks of an earlier run")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    level = LOG_LEVELS.get(os.environ.get("ADVFORGE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        cfg.validate()
        extra = {}
        if args.command == "attack":
            if args.attacks:
                extra["attacks"] = [s.strip() for s in args.attacks.split(",")]
                for a in extra["attacks"]:
                    if a not in ATTACK_ORDER:
                        raise ConfigError(f"unknown attack {a!r}")
            extra["resume"] = args.resume
        out = Path(args.out) if args.out else cfg.resolve(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, Paths(out), cfg.jobs, **extra)
    except (ConfigError, RunError, IdxError, fmt.RecordFormatError, OSError) as exc:
        print(f"advforge {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
