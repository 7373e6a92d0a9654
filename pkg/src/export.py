"""
Export of comparison reports.
Supports PDF, CSV, and JSON formats.
"""

import io
import json
from typing import Any, Dict, List, Optional

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Image, PageBreak, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from src import __version__

METRIC_LABELS = {"reward": "Reward", "iou": "IoU", "sdf": "SDF", "density": "Density"}


def variant_means(report: pd.DataFrame) -> pd.DataFrame:
    metrics = [m for m in METRIC_LABELS if m in report.columns]
    return report.groupby("variant", sort=True)[metrics].mean().reset_index()


class ReportExporter:
    def export_to_json(self, report: pd.DataFrame, analysis: Optional[Dict[str, Any]] = None) -> str:
        export_data = {
            "metadata": {"version": __version__},
            "rows": json.loads(report.to_json(orient="records")),
            "means": json.loads(variant_means(report).to_json(orient="records")),
            "analysis": analysis,
        }
        return json.dumps(export_data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def export_to_csv(self, report: pd.DataFrame) -> str:
        return report.to_csv(index=False)

    def export_to_pdf(self, report: pd.DataFrame, analysis: Optional[Dict[str, Any]] = None,
                      images: Optional[List[str]] = None) -> bytes:
        buffer = io.BytesIO()
        # no creation date in the file
        doc = SimpleDocTemplate(buffer, pagesize=letter, rightMargin=72, leftMargin=72,
                                topMargin=72, bottomMargin=18, invariant=True)
        story = []
        styles = getSampleStyleSheet()

        title_style = ParagraphStyle(
            "ReportTitle",
            parent=styles["Heading1"],
            fontSize=22,
            textColor=colors.HexColor("#1f77b4"),
            spaceAfter=24,
            alignment=TA_CENTER
        )
        story.append(Paragraph("Dough Rolling Variant Comparison", title_style))
        story.append(Spacer(1, 12))

        if analysis:
            story.append(Paragraph("Overall Analysis", styles["Heading2"]))
            lines = "".join(f"<b>{key}:</b> {value}<br/>" for key, value in sorted(analysis.items()))
            story.append(Paragraph(lines, styles["Normal"]))
            story.append(Spacer(1, 12))

        story.append(Paragraph("Mean per Variant", styles["Heading2"]))
        story.append(self._table(variant_means(report)))

        story.append(PageBreak())
        story.append(Paragraph("All Runs", styles["Heading2"]))
        story.append(Spacer(1, 12))
        story.append(self._table(report))

        for path in images or []:
            story.append(PageBreak())
            story.append(Image(path, width=6 * inch, height=4 * inch))

        doc.build(story)
        buffer.seek(0)
        return buffer.getvalue()

    def _table(self, frame: pd.DataFrame) -> Table:
        header = [METRIC_LABELS.get(c, c) for c in frame.columns]
        rows = [[f"{v:.4g}" if isinstance(v, float) else str(v) for v in row] for row in frame.itertuples(index=False)]
        table = Table([header] + rows)
        table.setStyle(TableStyle([
            ("BACKGROUND", (0, 0), (-1, 0), colors.grey),
            ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
            ("ALIGN", (0, 0), (-1, -1), "LEFT"),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("FONTSIZE", (0, 0), (-1, 0), 10),
            ("BOTTOMPADDING", (0, 0), (-1, 0), 12),
            ("GRID", (0, 0), (-1, -1), 1, colors.black),
            ("FONTSIZE", (0, 1), (-1, -1), 9),
            ("ROWBACKGROUNDS", (0, 1), (-1, -1), [colors.white, colors.lightgrey]),
        ]))
        return table
