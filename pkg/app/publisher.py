from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd

from app.models import AgreementReport, Severity
from app.scoring import report_quantity
from app.stats import describe
from app.storage import write_json

logger = logging.getLogger(__name__)

REPORT_JSON = "agreement_report.json"
SUMMARY_QUANTITIES = (
    "oahi",
    "cai",
    "odi",
    "tst_h",
    "sleep_efficiency_pct",
    "sleep_latency_min",
    "light_pct",
    "deep_pct",
    "rem_pct",
    "spo2_mean_pct",
    "spo2_lowest_pct",
)


def _severity_label(value: str) -> str:
    mapping = {
        "healthy": "正常",
        "mild": "轻度",
        "moderate": "中度",
        "severe": "重度",
    }
    return mapping.get(value, value)


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.1f}%"


def render_markdown(report: AgreementReport) -> str:
    lines: list[str] = []
    source = "规则判读 (oracle)" if report.source == "oracle" else "模型判读"
    lines.append(f"# 睡眠呼吸筛查一致性报告（{source}）")
    lines.append("")
    lines.append(f"- 受试者：{report.n_subjects}，交叉验证折数：{report.k_folds}，seed：{report.seed}")
    lines.append(f"- 严重程度分级一致：{report.severity_agreement}/{report.n_subjects}")
    if report.events is not None:
        lines.append(
            f"- 事件检出：recall {report.events.recall:.3f}，precision {report.events.precision:.3f}"
            f"（{report.events.matched}/{report.events.n_truth} 匹配，检出 {report.events.n_detected}）"
        )
    if report.failures:
        lines.append(f"- 处理失败：{', '.join(sorted(report.failures))}")
    lines.append("")

    lines.append("## 一、一致性 (ICC / Bland-Altman)")
    lines.append("| 指标 | ICC (95% CI) | bias | limits of agreement |")
    lines.append("|---|---|---|---|")
    for item in report.agreement:
        icc = item.icc
        ba = item.bland_altman
        lines.append(
            f"| {item.quantity} | {icc.value:.3f} ({icc.ci_low:.3f}-{icc.ci_high:.3f}) "
            f"| {ba.bias:.2f} | {ba.loa_low:.2f} to {ba.loa_high:.2f} |"
        )
    lines.append("")

    lines.append("## 二、诊断效能")
    lines.append("| OAHI 截断 | 灵敏度 (95% CI) | 特异度 (95% CI) | AUC (95% CI) |")
    lines.append("|---|---|---|---|")
    for item in report.diagnostic:
        sens = item.sensitivity
        spec = item.specificity
        sens_text = "-" if sens is None else f"{_pct(sens.value)} ({_pct(sens.ci_low)}-{_pct(sens.ci_high)})"
        spec_text = "-" if spec is None else f"{_pct(spec.value)} ({_pct(spec.ci_low)}-{_pct(spec.ci_high)})"
        auc_text = "-" if item.auc is None else f"{item.auc.value:.3f} ({item.auc.ci_low:.3f}-{item.auc.ci_high:.3f})"
        lines.append(f"| > {item.cutoff:g} | {sens_text} | {spec_text} | {auc_text} |")
    lines.append("")

    lines.append("## 三、睡眠分期")
    lines.append("| 方案 | accuracy | kappa | macro recall | macro precision |")
    lines.append("|---|---|---|---|---|")
    for item in report.staging:
        lines.append(
            f"| {item.scheme.value} | {_pct(item.accuracy)} | {item.kappa:.3f} "
            f"| {_pct(item.macro_recall)} | {_pct(item.macro_precision)} |"
        )
    return "\n".join(lines).strip() + "\n"


def diagnostic_table(report: AgreementReport) -> pd.DataFrame:
    rows = []
    for item in report.diagnostic:
        row = {"cutoff": item.cutoff, "tp": item.tp, "fn": item.fn, "tn": item.tn, "fp": item.fp}
        for name, est in (("sensitivity", item.sensitivity), ("specificity", item.specificity), ("auc", item.auc)):
            row[name] = None if est is None else est.value
            row[f"{name}_ci_low"] = None if est is None else est.ci_low
            row[f"{name}_ci_high"] = None if est is None else est.ci_high
        rows.append(row)
    return pd.DataFrame(rows)


def staging_table(report: AgreementReport) -> pd.DataFrame:
    rows = []
    for item in report.staging:
        for label in item.labels:
            rows.append(
                {
                    "scheme": item.scheme.value,
                    "class": label,
                    "recall": item.recall.get(label),
                    "precision": item.precision.get(label),
                    "accuracy": item.accuracy,
                    "kappa": item.kappa,
                    "macro_recall": item.macro_recall,
                    "macro_precision": item.macro_precision,
                }
            )
    return pd.DataFrame(rows)


def agreement_table(report: AgreementReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "quantity": item.quantity,
                "icc": item.icc.value,
                "icc_ci_low": item.icc.ci_low,
                "icc_ci_high": item.icc.ci_high,
                "icc_method": item.icc.method,
                "bias": item.bland_altman.bias,
                "loa_low": item.bland_altman.loa_low,
                "loa_high": item.bland_altman.loa_high,
                "within_fraction": item.bland_altman.within_fraction,
            }
            for item in report.agreement
        ]
    )


def cohort_summary_table(report: AgreementReport) -> pd.DataFrame:
    """按参考分级分组的 median (P25, P75)，对应队列基线特征表。"""
    rows = []
    for severity in Severity:
        members = [s.truth for s in report.subjects if s.truth.severity == severity]
        if not members:
            continue
        for quantity in SUMMARY_QUANTITIES:
            values = []
            for truth in members:
                try:
                    values.append(report_quantity(truth, quantity))
                except ValueError:
                    continue
            if not values:
                continue
            d = describe(values)
            rows.append(
                {
                    "group": severity.value,
                    "group_label": _severity_label(severity.value),
                    "quantity": quantity,
                    "n": d.n,
                    "median": d.median,
                    "p25": d.p25,
                    "p75": d.p75,
                    "summary": f"{d.median:.1f} ({d.p25:.1f}, {d.p75:.1f})",
                }
            )
    return pd.DataFrame(rows)


def subjects_table(report: AgreementReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "subject_id": s.subject_id,
                "fold": s.fold,
                "planted_severity": s.planted_severity.value,
                "truth_oahi": s.truth.oahi,
                "device_oahi": s.predicted.oahi,
                "truth_severity": s.truth.severity.value,
                "device_severity": s.predicted.severity.value,
                "truth_cai": s.truth.cai,
                "device_cai": s.predicted.cai,
                "truth_tst_h": s.truth.tst_h,
                "device_tst_h": s.predicted.tst_h,
                "event_recall": s.events.recall,
                "event_precision": s.events.precision,
            }
            for s in report.subjects
        ]
    )


def write_tables(report: AgreementReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = {
        "table_diagnostic.csv": diagnostic_table(report),
        "table_staging.csv": staging_table(report),
        "table_agreement.csv": agreement_table(report),
        "table_cohort_summary.csv": cohort_summary_table(report),
        "table_subjects.csv": subjects_table(report),
    }
    paths = []
    for name, table in tables.items():
        path = out / name
        table.to_csv(path, index=False, float_format="%.6f")
        paths.append(path)
    for item in report.staging:
        path = out / f"confusion_{item.scheme.value}.csv"
        pd.DataFrame(item.confusion, index=item.labels, columns=item.labels).to_csv(path, index_label="reference")
        paths.append(path)
    return paths


def archive_report(report: AgreementReport, out_dir: str | Path) -> tuple[str, str]:
    out = Path(out_dir)
    json_path = write_json(out / REPORT_JSON, report)
    md_path = out / "report.md"
    md_path.write_text(render_markdown(report), encoding="utf-8")
    logger.info("report_archived | json=%s | md=%s", json_path, md_path)
    return str(md_path), str(json_path)
