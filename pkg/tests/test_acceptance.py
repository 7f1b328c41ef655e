"""End-to-end acceptance checks, one test per criterion.

The shipped ``experiment.example`` is run twice from scratch (train, attack,
report) in temporary directories. Each test records a one-line PASS/FAIL
verdict that is printed in the terminal summary.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from advforge import report as fmt
from advforge.attacks import (AttackType, attack_direction, is_fooled, minimal_adversarial,
                              select_hot_class, step_image)
from advforge.bench import portability_matrix
from advforge.cli import Paths, load_eval_set, load_records_with_images, load_zoo, main
from advforge.nn import Model, Objective, forward, input_gradient, objective_value
from advforge.perceptual import DEFAULT_SSIM, align, pass_score, ssim

from conftest import (ACCEPTANCE_LINES, linear_instance, linear_model, scan_oracle,
                      smooth_stencil)
from test_perceptual import naive_ssim, smooth_image

CONFIG = Path(__file__).resolve().parent.parent / "experiment.example"


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _pipeline(out):
    for cmd in ("train", "attack", "report"):
        rc = main([cmd, "--config", str(CONFIG), "--out", str(out)])
        assert rc == 0, f"{cmd} exited {rc}"
    return Paths(out)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return _pipeline(root / "a"), _pipeline(root / "b")


@pytest.fixture(scope="session")
def run_a(runs):
    paths = runs[0]
    zoo = load_zoo(paths)
    ev = load_eval_set(paths)
    records = load_records_with_images(paths, ev, zoo)
    trends = json.loads((paths.report / "trends.json").read_text())
    return paths, zoo, ev, records, trends


def test_zoo_layout(run_a):
    paths, zoo, ev, records, _ = run_a
    manifest = json.loads(paths.manifest.read_text())
    assert len(zoo) == 8 and len(manifest["models"]) == 8
    assert len({m.family for m in zoo}) == 2
    assert len(ev) == 100 and ev.shortfall == {}
    assert len(records) == 2400


def test_criterion_01_gradient_oracle(run_a):
    _, zoo, ev, _, _ = run_a
    rng = np.random.default_rng(0)
    worst, checked, skipped, short = 0.0, 0, 0, []
    archs = {}
    for m in zoo:
        archs.setdefault(m.id.rsplit("-s", 1)[0], m)
    for name, model in sorted(archs.items()):
        # off-lattice point so no ReLU or max-pool tie sits exactly on it
        x = ev.images[int(rng.integers(len(ev)))] + rng.uniform(-0.4, 0.4, model.input_shape)
        label = int(np.argmax(forward(model, x)))
        hot = select_hot_class(forward(model, x), label)
        for obj in (Objective.loss_true_class(label), Objective.logit_difference(hot, label)):
            g = input_gradient(model, x, obj)
            n = 0
            for f in rng.permutation(x.size):
                idx = np.unravel_index(f, x.shape)
                if not smooth_stencil(model, x, idx, 1e-3):
                    skipped += 1
                    continue
                up, down = x.copy(), x.copy()
                up[idx] += 1e-3
                down[idx] -= 1e-3
                fd = (objective_value(model, up, obj) - objective_value(model, down, obj)) / 2e-3
                worst = max(worst, abs(g[idx] - fd) / max(1e-8, abs(fd)))
                n += 1
                if n == 100:
                    break
            checked += n
            if n < 100:
                short.append(name)
    verdict(1, worst < 1e-4 and not short,
            f"gradient vs central difference: {checked} coordinates over {len(archs)} "
            f"architectures x 2 objectives, worst rel err {worst:.2e} ({skipped} stencils "
            f"straddling a ReLU/max-pool switch excluded)")


def test_criterion_02_minimality(run_a):
    _, zoo, ev, records, _ = run_a
    models = {m.id: m for m in zoo}
    index = {int(i): k for k, i in enumerate(ev.ids)}
    bad = n = 0
    for r in records:
        if not r.success:
            continue
        x = ev.images[index[r.image_id]]
        model = models[r.source_model_id]
        d = attack_direction(model, x, r.true_label, r.attack)
        if r.attack is AttackType.FGS:
            below = r.alpha - 1
        else:
            below = (round(r.alpha * 100) - 1) / 100
        at = step_image(x, d, r.alpha)
        n += 1
        if (is_fooled(forward(model, step_image(x, d, below)), r.true_label)
                or not is_fooled(forward(model, at), r.true_label)
                or not np.array_equal(at, r.adversarial_image(x))):
            bad += 1
    verdict(2, bad == 0 and n > 0, f"minimality replay: {n - bad}/{n} successful records "
                                   "flip at alpha and not one step below")


def test_criterion_03_line_search_oracle():
    seed = agree = total = nontrivial = 0
    while total < 1000:
        w, b, image, label, strict = linear_instance(seed)
        seed += 1
        if not strict:
            continue
        m = linear_model(w, b, scale=1 / 255)
        d = attack_direction(m, image, label, AttackType.FGS)
        rec = minimal_adversarial(m, image, label, d)
        expected = scan_oracle(w, b, 1 / 255, image, label, d.vector, range(1, 256))
        got = rec.alpha if rec.success else None
        agree += got == expected
        nontrivial += expected is not None and expected > 1
        total += 1
    verdict(3, agree == total, f"FGS alpha vs exhaustive scan: {agree}/{total} equal "
                               f"({nontrivial} with alpha > 1)")


def test_criterion_04_diagonal_and_clones(run_a):
    paths, zoo, ev, records, _ = run_a
    diag_ok, n_files = True, 0
    for f in sorted(paths.report.glob("portability_*.csv")):
        _, ids, cells = fmt.parse_matrix(f.read_text())
        diag_ok &= all(cells[i][i] == "100.00" for i in ids)
        n_files += 1
    src = zoo[0]
    twin = Model(src.id + "-clone", src.family, src.input_shape, src.layers, src.params,
                 src.num_classes, seed=src.seed, top1_error=src.top1_error,
                 input_scale=src.input_scale)
    own = [r for r in records if r.source_model_id == src.id]
    copies = [dataclasses.replace(r, source_model_id=twin.id) for r in own]
    originals = {int(i): x for i, x in zip(ev.ids, ev.images)}
    clone_ok = True
    for attack in AttackType:
        rates = portability_matrix(own + copies, [src, twin, zoo[-1]], attack, originals).rates
        clone_ok &= rates[0, 1] == 1.0 and rates[1, 0] == 1.0
    verdict(4, diag_ok and clone_ok and n_files > 0,
            f"diagonals 100.00 in {n_files} matrices; clone off-diagonals exactly 100% "
            f"for all attacks: {clone_ok}")


def test_criterion_05_replay(runs, capsys):
    paths = runs[0]
    rc = main(["verify", "--config", str(CONFIG), "--out", str(paths.out)])
    out = capsys.readouterr().out
    verdict(5, rc == 0 and "verify: ok" in out, f"verify exit {rc}: {out.strip().splitlines()[-1]}")


def test_criterion_06_ssim_pass(run_a):
    _, _, ev, _, _ = run_a
    self_err = max(abs(pass_score(x, x) - 1.0) for x in ev.images)
    rng = np.random.default_rng(6)
    oracle_err = 0.0
    for _ in range(100):
        a = rng.uniform(0, 255, (32, 32))
        b = np.clip(a + rng.normal(0, rng.uniform(1, 80), a.shape), 0, 255)
        oracle_err = max(oracle_err, abs(ssim(a, b) - naive_ssim(a, b)))
    c1 = DEFAULT_SSIM.c1
    const_err = abs(ssim(np.zeros((16, 16)), np.full((16, 16), 255.0)) - c1 / (255 ** 2 + c1))
    ref = smooth_image(40, seed=3, margin=13)
    shifted = smooth_image(40, seed=3, margin=13, shift=(1.0, 0.0))
    shift_err = float(np.max(np.abs(align(shifted, ref, "translation").params - [1.0, 0.0])))
    ok = self_err < 1e-9 and oracle_err < 1e-8 and const_err < 1e-12 and shift_err < 0.1
    verdict(6, ok, f"pass(x,x) err {self_err:.1e}; naive oracle err {oracle_err:.1e}; "
                   f"constant pair err {const_err:.1e}; 1 px shift err {shift_err:.3f} px")


def test_criterion_07_hc1_success(run_a):
    paths = run_a[0]
    rows = [r.split(",") for r in (paths.report / "summary.csv").read_text().splitlines()[1:]]
    rates = {r[0]: float(r[2]) for r in rows if r[1] == "HC1"}
    worst = min(rates, key=rates.get)
    verdict(7, len(rates) == 8 and all(v >= 0.95 for v in rates.values()),
            f"HC1 success >= 95% on all {len(rates)} models (lowest {worst} {100 * rates[worst]:.0f}%)")


def test_criterion_08_attack_transferability(run_a):
    t = run_a[4]
    fgs, fgv, hc1 = (t[a]["mean_portability"] for a in ("FGS", "FGV", "HC1"))
    verdict(8, fgs > fgv and fgs > hc1,
            f"mean off-diagonal portability FGS {fgs:.4f} > FGV {fgv:.4f}, HC1 {hc1:.4f}")


def test_criterion_09_topology(run_a):
    t = run_a[4]["FGS"]
    w, c = t["within_family_mean"], t["cross_family_mean"]
    verdict(9, w is not None and c is not None and w > c,
            f"FGS within-family {w:.4f} > cross-family {c:.4f}")


def test_criterion_10_accuracy_robustness(run_a):
    paths = run_a[0]
    parts, ok = [], True
    for a in ("FGS", "FGV", "HC1"):
        c = json.loads((paths.report / f"correlation_{a}.json").read_text())
        if c["underpowered"]:
            parts.append(f"{a} underpowered (spread {100 * c['accuracy_spread']:.1f} pts)")
            continue
        ok &= c["rho"] is not None and c["rho"] > 0 and len(c["pairs"]) >= 6
        parts.append(f"{a} rho {c['rho']:+.3f}")
    verdict(10, ok, "Spearman(accuracy, mean L2): " + ", ".join(parts))


def test_criterion_11_determinism(runs):
    a, b = runs
    files = [Path("zoo.json"), Path("records.csv"), Path("evalset/meta.json")]
    files += sorted(p.relative_to(a.out) for p in a.report.iterdir())
    differ = [str(f) for f in files if (a.out / f).read_bytes() != (b.out / f).read_bytes()]
    reports = [f for f in files if f.suffix in (".csv", ".json")]
    verdict(11, not differ and sorted(p.name for p in b.report.iterdir()) ==
            sorted(p.name for p in a.report.iterdir()),
            f"two full runs: {len(files) - len(differ)}/{len(files)} output files byte-identical "
            f"({len(reports)} CSV/JSON)" + (f"; differ: {differ}" if differ else ""))
