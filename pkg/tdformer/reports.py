"""
Report files: CSV tables that open with ``# key: value`` provenance lines,
SVG heatmaps of mutual-information matrices and the Excel workbook of a
paired comparison. Column meanings are listed in docs/formats.md.
"""
import csv
import datetime
import logging
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import xlsxwriter  # noqa: E402

from .config import config_hash  # noqa: E402

logger = logging.getLogger(__name__)

# pinned so reruns write identical files
WORKBOOK_CREATED = datetime.datetime(2000, 1, 1)
SVG_SALT = "tdformer"

TRAIN_FIELDS = ["epoch", "loss", "train_accuracy", "test_accuracy", "firing_rate"]
STAGE_FIELDS = ["epoch", "stage", "alpha", "loss"]
BOUND_FIELDS = ["a", "b", "f", "law", "samples", "applicable", "bound", "tight", "empirical", "sigma",
                "margin", "violation", "attained"]
VARIANCE_FIELDS = ["kind", "sampler", "f_q", "f_k", "f_v", "n", "d", "samples", "analytic", "empirical",
                   "relative_error"]
MOMENT_FIELDS = ["f", "a", "b", "channels", "samples", "expected_mean_ratio", "mean_ratio",
                 "reference_mean_ratio", "expected_var_ratio", "var_ratio", "reference_var_ratio",
                 "corr_mean", "corr_rms", "corr_max", "in_regime"]
EPSILON_FIELDS = ["h", "baseline", "baseline_measured", "feedback", "feedback_measured", "hard",
                  "hard_measured"]
JACOBIAN_FIELDS = ["unit", "baseline", "feedback"]
ENERGY_FIELDS = ["block", "group", "macs", "steps", "flops", "spiking", "rate", "sops", "energy_pj"]
COMPARE_FIELDS = ["seed", "arm", "test_accuracy", "mi_off_diagonal", "energy_pj", "tdac_pj"]
SUMMARY_FIELDS = ["metric", "mean_treated", "mean_control", "mean_delta", "positive", "negative",
                  "p_value", "direction"]


def provenance(cfg, **extra):
    meta = {"config_hash": config_hash(cfg), "seed": cfg.seed, "precision": cfg.precision}
    meta.update(extra)
    return meta


def output_path(folder, filename):
    if not os.path.exists(folder):
        os.makedirs(folder)
    return os.path.join(folder, filename)


def write_csv(path, fieldnames, rows, meta=None):
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf8") as csv_file:
        for key, value in (meta or {}).items():
            csv_file.write("# {}: {}\n".format(key, value))
        writer = csv.DictWriter(csv_file, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info("[Output] %s rows saved to %s", len(rows), path)
    return path


def read_csv(path):
    """Provenance dict and rows (as strings) of a file written by ``write_csv``."""
    meta, lines = {}, []
    with open(path, newline="", encoding="utf8") as csv_file:
        for line in csv_file:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition(": ")
                meta[key] = value
            else:
                lines.append(line)
    return meta, list(csv.DictReader(lines))


def train_rows(report):
    for record in report.epochs:
        rates = list(record.firing_rates.values())
        yield {"epoch": record.epoch, "loss": record.loss, "train_accuracy": record.train_accuracy,
               "test_accuracy": record.test_accuracy, "firing_rate": float(np.mean(rates)) if rates else 0.0}


def stage_rows(report):
    for record in report.epochs:
        for stage, (alpha, loss) in enumerate(zip(report.alphas, record.stage_losses)):
            yield {"epoch": record.epoch, "stage": stage, "alpha": alpha, "loss": loss}


def bound_rows(reports):
    for r in reports:
        yield {"a": r.a, "b": r.b, "f": r.f, "law": r.law, "samples": r.samples, "applicable": r.applicable,
               "bound": r.bound, "tight": r.tight, "empirical": r.empirical, "sigma": r.sigma,
               "margin": r.margin, "violation": r.violation, "attained": r.attained}


def variance_rows(reports):
    for r in reports:
        f_q, f_k, f_v = r.rates
        yield {"kind": r.kind, "sampler": r.sampler, "f_q": f_q, "f_k": f_k, "f_v": f_v, "n": r.n, "d": r.d,
               "samples": r.samples, "analytic": r.analytic, "empirical": r.empirical,
               "relative_error": r.relative_error}


def moment_rows(reports):
    for r in reports:
        yield {name: getattr(r, name) for name in MOMENT_FIELDS}


def epsilon_rows(report):
    for i, h in enumerate(report.h):
        yield {"h": float(h),
               "baseline": float(report.baseline[i]), "baseline_measured": float(report.baseline_measured[i]),
               "feedback": float(report.feedback[i]), "feedback_measured": float(report.feedback_measured[i]),
               "hard": float(report.hard[i]), "hard_measured": float(report.hard_measured[i])}


def jacobian_rows(jacobian):
    for unit in range(jacobian.units):
        yield {"unit": unit, "baseline": float(jacobian.baseline[unit]), "feedback": float(jacobian.feedback[unit])}


def mi_fields(matrix):
    return ["step"] + ["t{}".format(t) for t in range(matrix.steps)]


def mi_rows(matrix):
    for i, row in enumerate(matrix.values):
        entry = {"step": "t{}".format(i)}
        entry.update({"t{}".format(j): float(v) for j, v in enumerate(row)})
        yield entry


def energy_rows(ledger):
    for row in ledger.rows:
        yield {"block": row.name, "group": row.group, "macs": row.macs, "steps": row.steps, "flops": row.flops,
               "spiking": row.spiking, "rate": row.rate, "sops": row.sops, "energy_pj": row.energy_pj}


def energy_meta(ledger):
    return {"e_mac_pj": ledger.e_mac, "e_ac_pj": ledger.e_ac, "flop_convention": "1 MAC = 2 FLOPs",
            "sop": "rate x steps x MACs", "total_pj": ledger.total_pj, "baseline_pj": ledger.baseline_pj,
            "tdac_pj": ledger.tdac_pj, "tdac_share": ledger.tdac_share}


def write_heatmap(path, values, title, meta=None):
    """Sequential-colour SVG of a square matrix with its colour scale."""
    values = np.asarray(values)
    description = "; ".join("{}: {}".format(k, v) for k, v in (meta or {}).items())
    with plt.rc_context({"svg.hashsalt": SVG_SALT}):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        image = ax.imshow(values, cmap="viridis", vmin=0.0, origin="upper")
        fig.colorbar(image, ax=ax, label="bits")
        ticks = range(values.shape[0])
        ax.set_xticks(list(ticks))
        ax.set_yticks(list(ticks))
        ax.set_xticklabels([str(t + 1) for t in ticks])
        ax.set_yticklabels([str(t + 1) for t in ticks])
        ax.set_xlabel("time step")
        ax.set_ylabel("time step")
        ax.set_title(title)
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
        plt.close(fig)
    logger.info("[Output] heatmap saved to %s", path)
    return path


def write_workbook(path, sheets, meta=None):
    """One worksheet per (name, fieldnames, rows) plus a provenance sheet."""
    workbook = xlsxwriter.Workbook(path, {"strings_to_urls": False, "nan_inf_to_errors": True})
    workbook.set_properties({"title": "tdformer comparison", "created": WORKBOOK_CREATED})
    info = workbook.add_worksheet("provenance")
    for xl_row, (key, value) in enumerate((meta or {}).items()):
        info.write_row(xl_row, 0, [key, str(value)])
    for name, fieldnames, rows in sheets:
        worksheet = workbook.add_worksheet(name)
        worksheet.write_row(0, 0, fieldnames)
        for xl_row, row in enumerate(rows, start=1):
            worksheet.write_row(xl_row, 0, [row.get(h) for h in fieldnames])
    workbook.close()
    logger.info("[Output] workbook saved to %s", path)
    return path
