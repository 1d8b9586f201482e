"""CSV reports and matplotlib figures for runs and evaluations.

Every reporting entry point writes the delimited table first, then
renders the matching figure next to it.  Figures use the Agg backend so
headless runs work.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import CSV_HEADER


def write_metrics_csv(path, per_image_reports, pooled, averaged):
    """Metric table: one row per image, then pooled and averaged rows.

    Columns are exactly sen,spe,f1,acc,auc,iou,threshold,pixels; row
    order is per-image (input order), pooled, averaged.
    """
    lines = [CSV_HEADER]
    lines += [r.csv_row() for r in per_image_reports]
    lines.append(pooled.csv_row())
    lines.append(averaged.csv_row())
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_run_csv(path, record):
    """Per-epoch loss trace of a training run."""
    lines = ["epoch,train_loss,val_loss"]
    for i, (tr, va) in enumerate(zip(record.train_losses, record.val_losses), start=1):
        lines.append(f"{i},{tr:.8f},{va:.8f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_ablation_csv(path, stage_results):
    """One pooled-metrics row per ablation stage."""
    lines = ["stage," + CSV_HEADER]
    for stage, _, result in stage_results:
        lines.append(f"{stage},{result.pooled.csv_row()}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_complexity_csv(path_or_none, report):
    line = "params,flops,input_shape"
    shape = "x".join(str(v) for v in report.input_shape) if report.input_shape else ""
    row = f"{report.total_params},{report.flops if report.flops is not None else ''},{shape}"
    text = line + "\n" + row + "\n"
    if path_or_none is None:
        return text
    with open(path_or_none, "w") as f:
        f.write(text)
    return text


def save_loss_curve(record, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = np.arange(1, len(record.train_losses) + 1)
    ax.plot(epochs, record.train_losses, label="train")
    ax.plot(epochs, record.val_losses, label="validation")
    if record.best_epoch:
        ax.axvline(record.best_epoch, color="gray", ls="--", lw=0.8, label="best")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _roc_points(probs, truth):
    p = np.asarray(probs, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel() > 0
    order = np.argsort(-p, kind="stable")
    t = t[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    n_pos = tp[-1] if tp.size else 0
    n_neg = fp[-1] if fp.size else 0
    if n_pos == 0 or n_neg == 0:
        return np.array([0.0, 1.0]), np.array([0.0, 1.0])
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    return fpr, tpr


def save_roc_curve(eval_result, samples, path):
    """Pooled ROC over every evaluated pixel of the run."""
    by_id = {s.sample_id: s for s in samples}
    probs, truths = [], []
    for r in eval_result.per_image:
        sample = by_id[r.sample_id]
        fov = sample.fov
        if fov is not None:
            inside = np.asarray(fov) > 0
            probs.append(r.prob.values[inside])
            truths.append(np.asarray(sample.mask)[inside])
        else:
            probs.append(r.prob.values.ravel())
            truths.append(np.asarray(sample.mask).ravel())
    fpr, tpr = _roc_points(np.concatenate(probs), np.concatenate(truths))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.2)
    ax.plot([0, 1], [0, 1], color="gray", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"pooled AUC = {eval_result.pooled.auc:.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sample_panel(sample, prob, mask, path):
    """Image, ground truth, probability map, and binary prediction."""
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    panels = [
        (np.asarray(sample.image), "image", "gray"),
        (np.asarray(sample.mask), "truth", "gray"),
        (prob.values, "probability", "magma"),
        (np.asarray(mask), "prediction", "gray"),
    ]
    for ax, (arr, title, cmap) in zip(axes, panels):
        ax.imshow(arr, cmap=cmap, vmin=0, vmax=1)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_bars(stage_results, path):
    """Grouped bars of the six metrics across ablation stages."""
    names = [stage for stage, _, _ in stage_results]
    fields = ["sensitivity", "specificity", "f1", "accuracy", "auc", "iou"]
    values = np.array(
        [[getattr(res.pooled, f) for f in fields] for _, _, res in stage_results]
    )
    x = np.arange(len(fields))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for i, name in enumerate(names):
        ax.bar(x + i * width, values[i], width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(["sen", "spe", "f1", "acc", "auc", "iou"])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, frameon=False, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_eval_outputs(eval_result, samples, out_dir, max_panels=4):
    """Standard evaluation bundle: metrics.csv, roc.png, sample panels."""
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(
        os.path.join(out_dir, "metrics.csv"),
        [r.report for r in eval_result.per_image],
        eval_result.pooled,
        eval_result.averaged,
    )
    save_roc_curve(eval_result, samples, os.path.join(out_dir, "roc.png"))
    by_id = {s.sample_id: s for s in samples}
    for r in eval_result.per_image[:max_panels]:
        save_sample_panel(
            by_id[r.sample_id], r.prob, r.mask,
            os.path.join(out_dir, f"panel_{r.sample_id}.png"),
        )
