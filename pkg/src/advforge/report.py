"""On-disk formats for records, portability matrices, summaries and plot data."""

from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from .attacks import AdversarialRecord, AttackType, FailureReason

RECORD_FIELDS = ["image_id", "source_model", "attack", "true_label", "adv_label", "alpha", "l2",
                 "linf", "pass", "success", "failure_reason"]
SUMMARY_FIELDS = ["model", "attack", "success_rate", "n_success", "mean_l2", "std_l2",
                  "mean_linf", "std_linf", "mean_pass", "std_pass"]
NA = "n/a"


class RecordFormatError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _opt(value, fmt):
    return "" if value is None else format(value, fmt)


def record_row(r):
    return [str(r.image_id), r.source_model_id, str(AttackType(r.attack)), str(r.true_label),
            _opt(r.adversarial_label, "d"), _opt(r.alpha, ".2f"), _opt(r.l2, ".6f"),
            _opt(r.linf, "d"), _opt(r.pass_score, ".8f"), "true" if r.success else "false",
            "" if r.failure_reason is None else str(r.failure_reason)]


def format_records(records, header=True):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow(record_row(r))
    return buf.getvalue()


def _parse_row(row, line):
    if len(row) != len(RECORD_FIELDS):
        raise RecordFormatError(line, f"expected {len(RECORD_FIELDS)} fields, got {len(row)}")
    d = dict(zip(RECORD_FIELDS, row))
    try:
        success = {"true": True, "false": False}[d["success"]]
        rec = AdversarialRecord(
            source_model_id=d["source_model"], attack=AttackType(d["attack"]),
            image_id=int(d["image_id"]), true_label=int(d["true_label"]), success=success)
        if success:
            rec.adversarial_label = int(d["adv_label"])
            rec.alpha = float(d["alpha"])
            rec.l2 = float(d["l2"])
            rec.linf = int(d["linf"])
            rec.pass_score = float(d["pass"])
            if d["failure_reason"]:
                raise ValueError("successful record carries a failure reason")
        else:
            rec.failure_reason = FailureReason(d["failure_reason"])
            if any(d[k] for k in ("adv_label", "alpha", "l2", "linf", "pass")):
                raise ValueError("failed record carries metrics")
    except (KeyError, ValueError) as exc:
        raise RecordFormatError(line, str(exc)) from None
    return rec


def parse_records(text):
    """Parse a records CSV; malformed rows raise :class:`RecordFormatError`."""
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise RecordFormatError(1, "empty file") from None
    if header != RECORD_FIELDS:
        raise RecordFormatError(1, f"unexpected header {header}")
    return [_parse_row(row, n) for n, row in enumerate(rows, start=2)]


# ---------------------------------------------------------------------------
# portability matrices

def _pct(rate):
    return NA if rate is None or (isinstance(rate, float) and math.isnan(rate)) else f"{100 * rate:.2f}"


def format_matrix(matrix):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "source\\target"] + list(matrix.model_ids))
    rates = matrix.rates
    for i, src in enumerate(matrix.model_ids):
        w.writerow([str(matrix.attack), src] + [_pct(r) for r in rates[i]])
    return buf.getvalue()


def parse_matrix(text):
    """``(attack, model_ids, cells)`` from a portability CSV; cells stay strings."""
    rows = list(csv.reader(io.StringIO(text)))
    ids = rows[0][2:]
    return rows[1][0] if len(rows) > 1 else None, ids, {r[1]: dict(zip(ids, r[2:])) for r in rows[1:]}


def matrix_counts(matrix):
    return {"attack": str(matrix.attack), "pass_threshold": matrix.pass_threshold,
            "model_ids": list(matrix.model_ids), "denominators": matrix.denominators.tolist(),
            "counts": matrix.counts.tolist()}


# ---------------------------------------------------------------------------
# summaries

def _num(value, fmt=".6f"):
    return NA if value is None else format(value, fmt)


def format_summary(summaries):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for s in summaries:
        w.writerow([s.model_id, str(s.attack), f"{s.success_rate:.4f}", str(s.n_success),
                    _num(s.mean_l2), _num(s.std_l2), _num(s.mean_linf), _num(s.std_linf),
                    _num(s.mean_pass, ".8f"), _num(s.std_pass, ".8f")])
    return buf.getvalue()


def dump_json(obj):
    return json.dumps(obj, indent=2) + "\n"


# ---------------------------------------------------------------------------
# gnuplot data

def plot_pass_success(summaries):
    lines = ["# model attack success_rate mean_pass std_pass",
             "# std is the population standard deviation over successful records"]
    for s in summaries:
        lines.append(f"{s.model_id} {s.attack} {s.success_rate:.4f} {_num(s.mean_pass, '.8f')} "
                     f"{_num(s.std_pass, '.8f')}")
    return "\n".join(lines) + "\n"


def plot_norms(summaries):
    lines = ["# model attack mean_l2 std_l2 mean_linf std_linf",
             "# std is the population standard deviation over successful records"]
    for s in summaries:
        lines.append(f"{s.model_id} {s.attack} {_num(s.mean_l2)} {_num(s.std_l2)} "
                     f"{_num(s.mean_linf)} {_num(s.std_linf)}")
    return "\n".join(lines) + "\n"


def plot_matrices(matrices):
    blocks = []
    for m in matrices:
        lines = [f"# attack {m.attack}: source_index target_index percent (NaN = undefined)",
                 "# models " + " ".join(m.model_ids)]
        rates = m.rates
        for i in range(len(m.model_ids)):
            for j in range(len(m.model_ids)):
                v = rates[i, j]
                lines.append(f"{i} {j} {'NaN' if np.isnan(v) else format(100 * v, '.2f')}")
            lines.append("")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def plot_correlation(results):
    blocks = []
    for c in results:
        rho = "undefined" if c.rho is None else f"{c.rho:.6f}"
        lines = [f"# attack {c.attack} spearman_rho {rho}", "# model accuracy mean_l2"]
        lines += [f"{p['model']} {p['accuracy']:.6f} {p['mean_l2']:.6f}" for p in c.pairs]
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"
