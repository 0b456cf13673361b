"""Report rendering: the aligned-column results table, CSV outputs, and
matplotlib figures written alongside them.
"""

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

TABLE_COLUMNS = ("Contrastive Loss", "Augment", "Training Loss",
                 "Recall_u", "Recall_M", "Recall_M*", "Rank-5", "Acc_clf")


def table_row(report, pretrain_label, augment_label, train_label):
    m = report.metrics_dict()
    return {"Contrastive Loss": pretrain_label,
            "Augment": augment_label,
            "Training Loss": train_label,
            "Recall_u": f"{m['recall_micro']:.3f}",
            "Recall_M": f"{m['recall_macro']:.3f}",
            "Recall_M*": f"{m['recall_macro_rare']:.3f}",
            "Rank-5": f"{m.get('rank_5', float('nan')):.3f}"
                      if "rank_5" in m else "-",
            "Acc_clf": f"{m['acc_clf']:.3f}" if "acc_clf" in m else "-"}


def format_table(rows):
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) if rows else len(c)
              for c in TABLE_COLUMNS}
    def fmt(vals):
        return " | ".join(v.ljust(widths[c]) for c, v in zip(TABLE_COLUMNS, vals))
    lines = [fmt(TABLE_COLUMNS),
             "-+-".join("-" * widths[c] for c in TABLE_COLUMNS)]
    lines.extend(fmt([r[c] for c in TABLE_COLUMNS]) for r in rows)
    return "\n".join(lines) + "\n"


def write_curves_csv(curve, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_recall_macro"])
        for epoch, loss, val in curve:
            w.writerow([epoch, f"{loss:.6f}", "" if val is None else f"{val:.6f}"])


def read_curves_csv(path):
    curve = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            curve.append((int(row["epoch"]), float(row["train_loss"]),
                          float(row["val_recall_macro"])
                          if row["val_recall_macro"] else None))
    return curve


SWEEP_COLUMNS = ("value", "recall_micro", "recall_macro",
                 "recall_macro_rare", "rank_5")


def write_sweep_csv(rows, path):
    """rows: (axis value, EvalReport) pairs."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for value, report in rows:
            m = report.metrics_dict()
            w.writerow([value, m["recall_micro"], m["recall_macro"],
                        m["recall_macro_rare"], m.get("rank_5", "")])


def render_curves(curve, out_png):
    """Training-loss and validation-recall figure for one run."""
    epochs = [e for e, _, _ in curve]
    losses = [l for _, l, _ in curve]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, losses, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    val_pts = [(e, v) for e, _, v in curve if v is not None]
    if val_pts:
        ax2 = ax1.twinx()
        ax2.plot(*zip(*val_pts), color="tab:orange", marker="o",
                 label="val Recall_M")
        ax2.set_ylabel("val Recall_M", color="tab:orange")
        ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_sweep(sweep_csv, out_png):
    values, series = [], {c: [] for c in SWEEP_COLUMNS[1:]}
    with open(sweep_csv, newline="") as f:
        for row in csv.DictReader(f):
            values.append(float(row["value"]))
            for c in series:
                series[c].append(float(row[c]) if row[c] else None)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        pts = [(v, y) for v, y in zip(values, ys) if y is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=name)
    ax.set_xlabel("swept value")
    ax.set_ylabel("metric")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_per_class_recall(report, out_png):
    classes = sorted(report.per_class_recall)
    vals = [report.per_class_recall[c] for c in classes]
    rare = set(report.config.get("rare_classes", []))
    colors = ["tab:red" if c in rare else "tab:blue" for c in classes]
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(classes) + 2), 3.5))
    ax.bar([str(c) for c in classes], vals, color=colors)
    ax.set_xlabel("class")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
