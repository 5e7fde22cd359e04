"""Figure rendering for the report files; every plot lands next to its CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import CalibrationReport, ControlReport, PoolBenchReport


def save_calibration_figure(report: CalibrationReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    xs, ys, errs = [], [], []
    for p, f, sd in zip(report.pred_mean, report.frac_correct, report.bootstrap_sd):
        if p is None:
            continue
        xs.append(p)
        ys.append(f)
        errs.append(sd or 0.0)
    ax.plot([0, 1], [0, 1], "--", color="gray", lw=1, label="perfect")
    ax.errorbar(xs, ys, yerr=errs, fmt="o-", capsize=3, label="model")
    ax.set_xlabel("predicted difficulty d")
    ax.set_ylabel("empirical fraction correct")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title("reliability curve")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_control_figure(report: ControlReport, path: str | Path) -> None:
    by_target: dict[float, list[float]] = {}
    for cell in report.cells:
        by_target.setdefault(cell.d_target, []).extend(cell.achieved)
    targets = sorted(by_target)
    means = [np.mean(by_target[t]) for t in targets]
    sds = [np.std(by_target[t]) for t in targets]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], "--", color="gray", lw=1, label="target")
    ax.errorbar(targets, means, yerr=sds, fmt="o-", capsize=3,
                label=f"achieved (rmse {report.rmse:.3f})")
    ax.set_xlabel("target difficulty")
    ax.set_ylabel("achieved difficulty (model-scored)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title("difficulty control")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_pool_figure(report: PoolBenchReport, path: str | Path) -> None:
    pool_rows = [r for r in report.rows if r.method == "pool"]
    gen_rows = [r for r in report.rows if r.method == "generate"]
    targets = sorted({r.d_target for r in pool_rows})
    sizes = sorted({r.pool_size for r in pool_rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.5))
    for t in targets:
        ys = [r.rmse for s in sizes for r in pool_rows
              if r.pool_size == s and r.d_target == t]
        ax1.plot(sizes, ys, "o-", label=f"pool, d={t:g}")
        gen = [r for r in gen_rows if r.d_target == t]
        if gen and np.isfinite(gen[0].rmse):
            ax1.axhline(gen[0].rmse, ls="--", lw=1,
                        color=ax1.lines[-1].get_color())
    ax1.set_xlabel("pool size")
    ax1.set_ylabel("top-k selection RMSE")
    ax1.set_title("quality (dashed: generation)")
    ax1.legend(fontsize=8)

    pool_secs = {s: next(r.seconds for r in pool_rows if r.pool_size == s)
                 for s in sizes}
    ax2.plot(list(pool_secs), list(pool_secs.values()), "o-", label="pool scoring")
    if gen_rows:
        gen_mean = float(np.mean([r.seconds for r in gen_rows]))
        ax2.axhline(gen_mean, ls="--", color="tab:red",
                    label=f"generation ({gen_mean:.1f}s)")
    ax2.set_xlabel("pool size")
    ax2.set_ylabel("wall-clock seconds")
    ax2.set_title("latency")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_figure(rows: list[tuple[int, float]], path: str | Path,
                     title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        steps, losses = zip(*rows)
        ax.plot(steps, losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
