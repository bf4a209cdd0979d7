"""
pdf_report.py
=============
Printable PDF versions of evaluation reports and ablation summaries.
Uses ReportLab for PDF generation.

Install: pip install reportlab
"""

import io
from typing import List

from reportlab.lib.colors import HexColor
from reportlab.lib.enums import TA_CENTER, TA_LEFT
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import cm
from reportlab.platypus import (
    HRFlowable, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle,
)

from bambino_engine.core.evalkit import EvalReport
from bambino_engine.tools.ablation import AblationSummary

# ── Color palette ──────────────────────────────────────────────
VOID      = HexColor("#0B0B0F")
GOLD      = HexColor("#C9A96E")
SURFACE   = HexColor("#1E1C28")
MUTED     = HexColor("#6E6A7C")
RED       = HexColor("#B85C5C")
GREEN     = HexColor("#6DBF8E")
WHITE     = HexColor("#FFFFFF")
ROW_A     = HexColor("#FAFAFA")

_styles = getSampleStyleSheet()
TITLE = ParagraphStyle("Title", parent=_styles["Normal"], fontSize=24, fontName="Helvetica",
                       textColor=VOID, alignment=TA_CENTER, spaceAfter=6)
SUBTITLE = ParagraphStyle("Subtitle", parent=_styles["Normal"], fontSize=10, fontName="Helvetica",
                          textColor=MUTED, alignment=TA_CENTER, spaceAfter=16)
BODY = ParagraphStyle("Body", parent=_styles["Normal"], fontSize=9, fontName="Helvetica",
                      textColor=VOID, spaceAfter=4, leading=14)
BAR = ParagraphStyle("Bar", parent=_styles["Normal"], fontSize=11, fontName="Helvetica-Bold",
                     textColor=WHITE, alignment=TA_LEFT)


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "—"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def _bar(text: str) -> Table:
    return Table([[Paragraph(text, BAR)]], colWidths=[17*cm], style=TableStyle([
        ("BACKGROUND",    (0,0), (-1,-1), VOID),
        ("TOPPADDING",    (0,0), (-1,-1), 8),
        ("BOTTOMPADDING", (0,0), (-1,-1), 8),
        ("LEFTPADDING",   (0,0), (-1,-1), 12),
    ]))


def _grid(header: List[str], rows: List[List[str]], widths: List[float]) -> Table:
    table = Table([header] + rows, colWidths=[w*cm for w in widths])
    table.setStyle(TableStyle([
        ("FONTNAME",       (0,0), (-1,0),  "Helvetica-Bold"),
        ("FONTNAME",       (0,1), (-1,-1), "Helvetica"),
        ("FONTSIZE",       (0,0), (-1,-1), 8.5),
        ("BACKGROUND",     (0,0), (-1,0),  SURFACE),
        ("TEXTCOLOR",      (0,0), (-1,0),  GOLD),
        ("ROWBACKGROUNDS", (0,1), (-1,-1), [ROW_A, WHITE]),
        ("GRID",           (0,0), (-1,-1), 0.3, HexColor("#DDDDDD")),
        ("TOPPADDING",     (0,0), (-1,-1), 5),
        ("BOTTOMPADDING",  (0,0), (-1,-1), 5),
        ("LEFTPADDING",    (0,0), (-1,-1), 6),
    ]))
    return table


def _build(story: list, title: str) -> bytes:
    buffer = io.BytesIO()
    doc = SimpleDocTemplate(
        buffer, pagesize=A4,
        rightMargin=2*cm, leftMargin=2*cm, topMargin=2*cm, bottomMargin=2*cm,
        title=title, author="bambino-engine", invariant=1,
    )
    doc.build(story)
    return buffer.getvalue()


def _header(story: list, title: str, subtitle: str) -> None:
    story.append(Paragraph(title, TITLE))
    story.append(Paragraph(subtitle, SUBTITLE))
    story.append(HRFlowable(width="100%", thickness=0.5, color=GOLD))
    story.append(Spacer(1, 0.4*cm))


def generate_eval_pdf(report: EvalReport, title: str = "Evaluation") -> bytes:
    story: list = []
    _header(story, title, f"mode {report.mode} · seeds {', '.join(map(str, report.seeds)) or '—'}")

    story.append(_bar("PERPLEXITY"))
    story.append(Spacer(1, 0.3*cm))
    story.append(_grid(
        ["Language", "Before", "After", "Delta"],
        [["L1", _fmt(report.l1_ppl_before), _fmt(report.l1_ppl_after), _fmt(report.forgetting_delta)],
         ["L2", _fmt(report.l2_ppl_before), _fmt(report.l2_ppl_after), _fmt(report.acquisition_delta)]],
        [4, 4, 4, 5]))
    story.append(Paragraph(
        "L1 delta is forgetting (after − before); L2 delta is acquisition (before − after).", BODY))
    story.append(Spacer(1, 0.5*cm))

    if report.task_accuracy:
        story.append(_bar("TASK ACCURACY"))
        story.append(Spacer(1, 0.3*cm))
        rows = [[name, _fmt(report.task_accuracy_before.get(name)), _fmt(acc)]
                for name, acc in report.task_accuracy.items()]
        rows += [[f"{suite} average", _fmt(report.suite_accuracy_before.get(suite)), _fmt(acc)]
                 for suite, acc in report.suite_accuracy.items()]
        story.append(_grid(["Task", "Before", "After"], rows, [7, 5, 5]))
        story.append(Spacer(1, 0.5*cm))

    story.append(HRFlowable(width="100%", thickness=0.5, color=GOLD))
    story.append(Paragraph(f"checkpoint {report.checkpoint}", BODY))
    if report.baseline:
        story.append(Paragraph(f"baseline {report.baseline}", BODY))
    return _build(story, title)


def generate_ablation_pdf(summary: AblationSummary, title: str = "Ablation summary") -> bytes:
    story: list = []
    _header(story, title, "medians over seeds")

    story.append(_bar("FINAL PERPLEXITY BY MODE"))
    story.append(Spacer(1, 0.3*cm))
    rows = [[mode, ", ".join(map(str, s.seeds)), _fmt(s.median_l2_ppl), _fmt(s.median_l1_ppl),
             _fmt(s.median_acquisition_delta), _fmt(s.median_forgetting_delta)]
            for mode, s in summary.modes.items()]
    story.append(_grid(["Mode", "Seeds", "L2 PPL", "L1 PPL", "Acquisition", "Forgetting"],
                       rows, [3.2, 2.8, 2.6, 2.6, 2.9, 2.9]))
    story.append(Spacer(1, 0.5*cm))

    suites = sorted({k for s in summary.modes.values() for k in s.median_suite_accuracy})
    if suites:
        story.append(_bar("SUITE ACCURACY"))
        story.append(Spacer(1, 0.3*cm))
        rows = [[mode] + [_fmt(s.median_suite_accuracy.get(k)) for k in suites]
                for mode, s in summary.modes.items()]
        story.append(_grid(["Mode"] + suites, rows, [5] + [12 / len(suites)] * len(suites)))
        story.append(Spacer(1, 0.5*cm))

    story.append(_bar("ORDERING"))
    story.append(Spacer(1, 0.3*cm))
    for check, holds in summary.ordering.items():
        colour = "#" + (GREEN if holds else RED).hexval()[2:]
        story.append(Paragraph(
            f"{check.replace('_le_', ' ≤ ')}: <font color='{colour}'><b>{'holds' if holds else 'violated'}</b></font>",
            BODY))
    for flag in summary.flagged_seeds:
        story.append(Paragraph(f"<b>seed {flag.seed}</b>: {flag.reason}", BODY))
    if not summary.flagged_seeds:
        story.append(Paragraph("No seed breaks the ordering.", BODY))
    return _build(story, title)

