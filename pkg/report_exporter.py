"""验证报告导出器

本模块的职责：
- VerificationReport → JSON（report.json）
- TAR@FAR 表与每折准确率 → CSV（pandas）
- 终端摘要格式化
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List

import pandas as pd

from lafs_local.evaluation import VerificationReport


class ReportExporter:
    """验证报告 → 文件 / 终端文本"""

    def export_json(self, report: VerificationReport, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        return path

    def export_csv(self, report: VerificationReport, path) -> Path:
        """一行一个指标：metric, key, value"""
        rows: List[Dict[str, object]] = [
            {"metric": "accuracy_mean", "key": "", "value": report.accuracy_mean},
            {"metric": "accuracy_std", "key": "", "value": report.accuracy_std},
        ]
        rows += [{"metric": "fold_accuracy", "key": i, "value": a} for i, a in enumerate(report.fold_accuracies)]
        rows += [{"metric": "tar_at_far", "key": f"{far:g}", "value": tar} for far, tar in sorted(report.tar_at_far.items())]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=["metric", "key", "value"]).to_csv(path, index=False, lineterminator="\n")
        return path

    def format_summary(self, report: VerificationReport, title: str = "验证评估") -> str:
        """格式化终端摘要

        参数：
        - report: VerificationReport
        - title:  标题（通常带上模型 / checkpoint 名）
        """
        lines = ["", "=" * 60, f"【{title}】", "=" * 60, ""]
        lines.append(f"🎯 k 折准确率：{report.accuracy_mean * 100:.2f}% ± {report.accuracy_std * 100:.2f}%")
        lines.append(f"👥 验证对：真匹配 {report.n_genuine} / 冒认 {report.n_impostor}")
        lines.append("")
        lines.append("📈 TAR@FAR：")
        for far, tar in sorted(report.tar_at_far.items()):
            lines.append(f"   FAR={far:<8g} TAR={tar * 100:6.2f}%")
        if report.protocol:
            lines.append("")
            lines.append("📋 协议：" + ", ".join(f"{k}={v}" for k, v in sorted(report.protocol.items())))
        lines.append("")
        return "\n".join(lines)


def export_report(report: VerificationReport, out_dir, stem: str = "report") -> Dict[str, Path]:
    exporter = ReportExporter()
    out_dir = Path(out_dir)
    return {
        "json": exporter.export_json(report, out_dir / f"{stem}.json"),
        "csv": exporter.export_csv(report, out_dir / f"{stem}.csv"),
    }
