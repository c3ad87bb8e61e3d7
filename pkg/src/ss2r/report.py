"""Static report bundle: a markdown summary plus SVG plots, built only from files in the run directory.

Numbers in the markdown are copied verbatim from the CSV/JSON outputs, never
recomputed, so the report and the metrics can not disagree.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SET_ORDER = ["S", "D1", "D2", "D3", "D4", "R2"]
SET_LABEL = {"S": "synthetic S", "D1": "Stage I", "D2": "Stage II", "D3": "Stage III", "D4": "Stage IV",
             "R2": "second oracle draw"}


class ReportError(RuntimeError):
    pass


def _rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> None:
    plt.rcParams["svg.hashsalt"] = "ss2r"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _loss_plot(metrics: Path, out: Path) -> bool:
    curves = sorted(metrics.glob("stage*_loss.csv"))
    if not curves:
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for path in curves:
        rows = _rows(path)
        step = [int(r["step"]) for r in rows]
        loss = [float(r["loss"]) for r in rows]
        k = max(1, len(loss) // 50)
        smooth = [sum(loss[max(0, i - k):i + 1]) / len(loss[max(0, i - k):i + 1]) for i in range(len(loss))]
        ax.plot(step, smooth, label=path.stem.replace("_loss", ""))
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction loss (moving average)")
    ax.legend()
    _save(fig, out)
    return True


def _profile_plot(summary: dict, out: Path) -> bool:
    prof = summary.get("profile")
    if not prof:
        return False
    z = [0.5 * (p["z_lo"] + p["z_hi"]) for p in prof]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(z, [p["model_var"] for p in prof], "o-", label="Stage I samples")
    ax.plot(z, [p["oracle_var"] for p in prof], "s-", label="oracle (realized)")
    ax.plot(z, [p["analytic_var"] for p in prof], "--", label="oracle (a + b z^2)^2")
    ax.set_xlabel("synthetic depth bucket centre (m)")
    ax.set_ylabel("residual variance (m^2)")
    ax.legend()
    _save(fig, out)
    return True


def _disc_plot(summary: dict, out: Path) -> bool:
    acc = summary.get("disc_frozen")
    if not acc:
        return False
    names = [n for n in SET_ORDER if n in acc]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([SET_LABEL[n] for n in names], [100 * acc[n]["generated_accuracy"] for n in names])
    ax.axhline(50, color="grey", lw=0.8, ls=":")
    ax.set_ylabel("patches flagged generated (%)")
    _save(fig, out)
    return True


def _metric_plot(table: dict[str, dict[str, str]], out: Path) -> None:
    names = [n for n in SET_ORDER if n in table]
    keys = ["chamfer_l2_x1000", "f_score", "voxel_iou"]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    for ax, k in zip(axes, keys):
        ax.bar([SET_LABEL[n] for n in names], [float(table[n][k]) for n in names])
        ax.set_title(k)
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    _save(fig, out)


def build_report(run_dir) -> Path:
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics"
    evals = sorted(metrics.glob("eval_*.csv")) if metrics.is_dir() else []
    if not evals:
        raise ReportError(f"no metrics CSVs under {metrics}; run eval first")
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    table = {}
    for path in evals:
        name = path.stem[len("eval_"):]
        mean = [r for r in _rows(path) if r["sample_id"] == "mean"]
        if mean:
            table[name] = mean[0]
    summary_path = metrics / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}

    lines = ["# Simulation report", "", f"Run directory: `{run_dir.name}`", "",
             "## Fused-cloud agreement with the oracle-real captures (validation mean)", "",
             "| map set | Chamfer L2 x1000 | F-score (%) | occupancy IoU (%) |", "|---|---|---|---|"]
    order = [n for n in SET_ORDER if n in table] + sorted(n for n in table if n not in SET_ORDER)
    for n in order:
        r = table[n]
        lines.append(f"| {SET_LABEL.get(n, n)} | {r['chamfer_l2_x1000']} | {r['f_score']} | {r['voxel_iou']} |")
    lines.append("")
    if "profile" in summary:
        lines += ["## Stage-I residual statistics by depth bucket", "",
                  "| depth (m) | model var | oracle var | analytic var | rel. err | model mean | oracle mean | SE |",
                  "|---|---|---|---|---|---|---|---|"]
        for p in summary["profile"]:
            lines.append(f"| {p['z_lo']:.3f}-{p['z_hi']:.3f} | {p['model_var']:.6g} | {p['oracle_var']:.6g} | "
                         f"{p['analytic_var']:.6g} | {p['var_rel_err']:.4f} | {p['model_mean']:.6g} | "
                         f"{p['oracle_mean']:.6g} | {p['mean_se']:.3g} |")
        lines.append("")
    if "disc_frozen" in summary:
        lines += ["## Stage-I discriminator on simulated patches", "",
                  "| map set | flagged generated | balanced accuracy | patches |", "|---|---|---|---|"]
        for n in [n for n in SET_ORDER if n in summary["disc_frozen"]]:
            a = summary["disc_frozen"][n]
            lines.append(f"| {SET_LABEL[n]} | {a['generated_accuracy']} | {a['balanced_accuracy']} | {a['n_patches']} |")
        if summary.get("disc_retrained_accuracy") is not None:
            lines.append(f"\nRetrained on the final stage's patches: held-out accuracy {summary['disc_retrained_accuracy']}")
        lines.append("")

    plots = {"metrics.svg": True}
    _metric_plot(table, out / "metrics.svg")
    plots["loss_curves.svg"] = _loss_plot(metrics, out / "loss_curves.svg")
    plots["residual_variance.svg"] = _profile_plot(summary, out / "residual_variance.svg")
    plots["discriminator.svg"] = _disc_plot(summary, out / "discriminator.svg")
    lines += ["## Plots", ""] + [f"![{k}]({k})" for k, ok in plots.items() if ok] + [""]
    (out / "summary.md").write_text("\n".join(lines))
    return out
