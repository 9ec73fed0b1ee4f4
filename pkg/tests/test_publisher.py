import pandas as pd

from app.models import AgreementReport
from app.plots import write_plots
from app.publisher import archive_report, cohort_summary_table, diagnostic_table, render_markdown, write_tables
from app.storage import read_json


def test_render_markdown_sections(small_report) -> None:
    md = render_markdown(small_report)

    assert md.startswith("# 睡眠呼吸筛查一致性报告（规则判读 (oracle)）")
    assert "严重程度分级一致：5/6" in md
    assert "34/36 匹配" in md
    assert "处理失败：S0099" in md
    assert "## 一、一致性 (ICC / Bland-Altman)" in md
    assert "| > 5 |" in md
    assert "| WRNN |" in md


def test_diagnostic_table_rows(small_report) -> None:
    table = diagnostic_table(small_report)

    assert table["cutoff"].tolist() == [1.0, 5.0, 10.0]
    assert table.loc[0, "specificity"] == 0.0
    assert table.loc[1, "auc"] == 1.0


def test_cohort_summary_groups_by_reference_severity(small_report) -> None:
    table = cohort_summary_table(small_report)

    assert set(table["group"]) == {"healthy", "mild", "moderate", "severe"}
    oahi = table[(table["quantity"] == "oahi") & (table["group"] == "severe")].iloc[0]
    assert oahi["n"] == 2
    assert "spo2_mean_pct" not in set(table["quantity"])


def test_write_tables(tmp_path, small_report) -> None:
    paths = write_tables(small_report, tmp_path)

    names = {p.name for p in paths}
    assert {"table_diagnostic.csv", "table_staging.csv", "table_agreement.csv", "table_subjects.csv"} <= names
    assert {"confusion_WS.csv", "confusion_WRLD.csv", "confusion_WRNN.csv"} <= names
    subjects = pd.read_csv(tmp_path / "table_subjects.csv")
    assert len(subjects) == 6
    confusion = pd.read_csv(tmp_path / "confusion_WS.csv", index_col="reference")
    assert confusion.values.trace() == confusion.values.sum()


def test_archive_report_round_trip(tmp_path, small_report) -> None:
    md_path, json_path = archive_report(small_report, tmp_path)

    assert AgreementReport.model_validate(read_json(json_path)) == small_report
    assert "严重程度分级一致" in (tmp_path / "report.md").read_text(encoding="utf-8")
    assert md_path.endswith("report.md")


def test_write_plots_is_repeatable(tmp_path, small_report) -> None:
    first = write_plots(small_report, tmp_path / "a")
    second = write_plots(small_report, tmp_path / "b")

    names = sorted(p.name for p in first)
    assert "roc_oahi.svg" in names
    assert "bland_altman_oahi.svg" in names
    assert "confusion_WRNN.svg" in names
    assert names == sorted(p.name for p in second)
    for a, b in zip(sorted(first), sorted(second)):
        assert a.read_bytes() == b.read_bytes()
