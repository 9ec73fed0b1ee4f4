from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.models import AgreementReport, CutoffPerformance, QuantityAgreement, StagingPerformance  # noqa: E402
from app.scoring import report_quantity  # noqa: E402

logger = logging.getLogger(__name__)

# 固定 SVG 内部 id 的哈希盐，并去掉日期元数据，重复运行得到相同文件
matplotlib.rcParams["svg.hashsalt"] = "radar-sleep-screen"
_SVG_METADATA = {"Date": None}

QUANTITY_LABELS = {
    "oahi": "OAHI (events/h)",
    "cai": "CAI (events/h)",
    "tst_h": "TST (h)",
    "light_pct": "Light sleep (% TST)",
    "deep_pct": "Deep sleep (% TST)",
    "rem_pct": "REM (% TST)",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return path


def _paired_values(report: AgreementReport, quantity: str) -> tuple[np.ndarray, np.ndarray]:
    device = np.array([report_quantity(s.predicted, quantity) for s in report.subjects])
    reference = np.array([report_quantity(s.truth, quantity) for s in report.subjects])
    return device, reference


def plot_scatter(report: AgreementReport, agreement: QuantityAgreement, path: Path) -> Path:
    device, reference = _paired_values(report, agreement.quantity)
    label = QUANTITY_LABELS.get(agreement.quantity, agreement.quantity)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(reference, device, s=16, color="tab:blue")
    low = float(min(reference.min(), device.min()))
    high = float(max(reference.max(), device.max()))
    ax.plot([low, high], [low, high], linestyle="--", color="grey", gid="identity-line")
    ax.set_xlabel(f"Reference {label}")
    ax.set_ylabel(f"Device {label}")
    ax.set_title(f"ICC = {agreement.icc.value:.3f} ({agreement.icc.ci_low:.3f}-{agreement.icc.ci_high:.3f})")
    return _save(fig, path)


def plot_bland_altman(report: AgreementReport, agreement: QuantityAgreement, path: Path) -> Path:
    device, reference = _paired_values(report, agreement.quantity)
    ba = agreement.bland_altman
    label = QUANTITY_LABELS.get(agreement.quantity, agreement.quantity)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.scatter((device + reference) / 2.0, device - reference, s=16, color="tab:blue")
    ax.axhline(ba.bias, color="black", gid="ba-bias")
    ax.axhline(ba.loa_low, color="tab:red", linestyle="--", gid="ba-loa-low")
    ax.axhline(ba.loa_high, color="tab:red", linestyle="--", gid="ba-loa-high")
    ax.set_xlabel(f"Mean of device and reference {label}")
    ax.set_ylabel("Device - reference")
    ax.set_title(f"bias {ba.bias:.2f}, limits of agreement {ba.loa_low:.2f} to {ba.loa_high:.2f}")
    return _save(fig, path)


def plot_roc(cutoffs: list[CutoffPerformance], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", gid="roc-diagonal")
    for item in cutoffs:
        if item.auc is None:
            continue
        ax.step(
            item.roc_fpr,
            item.roc_tpr,
            where="post",
            label=f"OAHI > {item.cutoff:g}: AUC {item.auc.value:.3f}",
            gid=f"roc-cutoff-{item.cutoff:g}",
        )
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("Sensitivity")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_confusion(staging: StagingPerformance, path: Path) -> Path:
    cm = np.asarray(staging.confusion, dtype=float)
    rows = cm.sum(axis=1, keepdims=True)
    share = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.2 * len(staging.labels) + 2, 1.1 * len(staging.labels) + 1.5))
    im = ax.imshow(share, vmin=0, vmax=1, cmap="Blues")
    fig.colorbar(im, ax=ax)
    ticks = range(len(staging.labels))
    ax.set_xticks(list(ticks), staging.labels)
    ax.set_yticks(list(ticks), staging.labels)
    ax.set_xlabel("Device")
    ax.set_ylabel("Reference")
    for i in ticks:
        for j in ticks:
            ax.text(j, i, f"{int(cm[i, j])}\n{share[i, j]:.1%}", ha="center", va="center", fontsize=7)
    ax.set_title(f"{staging.scheme.value}: accuracy {staging.accuracy:.3f}, kappa {staging.kappa:.3f}")
    return _save(fig, path)


def write_plots(report: AgreementReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir) / "figures"
    paths: list[Path] = []
    for agreement in report.agreement:
        paths.append(plot_scatter(report, agreement, out / f"scatter_{agreement.quantity}.svg"))
        paths.append(plot_bland_altman(report, agreement, out / f"bland_altman_{agreement.quantity}.svg"))
    if report.diagnostic:
        paths.append(plot_roc(report.diagnostic, out / "roc_oahi.svg"))
    for staging in report.staging:
        paths.append(plot_confusion(staging, out / f"confusion_{staging.scheme.value}.svg"))
    logger.info("plots_written | count=%d | dir=%s", len(paths), out)
    return paths
