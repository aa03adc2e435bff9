"""Markdown/CSV tables and figures for pipeline and sweep runs.

Tables mirror the usual layout of multilingual results: one row per model
(tagging scheme) with per-language error rates and their unweighted
average, and for merge sweeps one row per alpha.  Nothing time-dependent is
written, so reruns with the same config and seed reproduce every file.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from .pipeline import PipelineResult, SweepResult

SCHEME_LABELS = {"plain": "plain", "b": "B", "e": "E", "b2": "B2"}

# Fixed PNG metadata keeps figure bytes independent of the matplotlib build.
_PNG_META = {"Software": None}


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _unit_label(unit: str) -> str:
    return "CER" if unit == "char" else "WER"


def markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(map(str, r)) + " |" for r in rows]
    return "\n".join(lines)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _provenance(cfg) -> list[str]:
    return [f"config_hash: {cfg.hash}", f"seed: {cfg.seed}"]


def pipeline_table(res: "PipelineResult") -> tuple[list[str], list[list[str]]]:
    units = {}
    for r in res.results:
        for lang, s in r.score.per_language.items():
            units.setdefault(lang, s.unit)
    langs = [lang for lang in res.languages if lang in units]
    header = ["Model", "Vocab"] + [f"{lang} ({_unit_label(units[lang])})" for lang in langs] + ["Average", "LID"]
    rows = []
    for r in res.results:
        per = r.score.per_language
        rows.append(
            [SCHEME_LABELS[r.scheme.value], str(r.vocab_size)]
            + [_pct(per[lang].rate) if lang in per else "-" for lang in langs]
            + [_pct(r.score.average), "-" if r.lid_accuracy is None else _pct(r.lid_accuracy)]
        )
    return header, rows


def sweep_table(sweep: "SweepResult") -> tuple[list[str], list[list[str]]]:
    langs = sweep.languages
    header = ["alpha", "Vocab", "Sub-words"] + [f"{lang}" for lang in langs] + ["Average"]
    rows = []
    for row in sweep.rows:
        per = row.score.per_language
        rows.append(
            [str(row.alpha), str(row.vocab_size), str(row.num_subwords)]
            + [_pct(per[lang].rate) if lang in per else "-" for lang in langs]
            + [_pct(row.score.average)]
        )
    return header, rows


def _bar_figure(res: "PipelineResult", path: Path) -> None:
    header, rows = pipeline_table(res)
    langs = header[2:-2]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    width = 0.8 / max(len(rows), 1)
    for i, row in enumerate(rows):
        vals = [float(v) if v != "-" else 0.0 for v in row[2:-2]]
        xs = [j + (i - (len(rows) - 1) / 2) * width for j in range(len(langs))]
        ax.bar(xs, vals, width, label=row[0])
    ax.set_xticks(range(len(langs)))
    ax.set_xticklabels(langs)
    ax.set_ylabel("error rate (%)")
    ax.legend(fontsize=7, frameon=False)
    ax.set_title(f"config {res.config.hash}, seed {res.config.seed}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _sweep_figure(sweep: "SweepResult", path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    alphas = [r.alpha for r in sweep.rows]
    for lang in sweep.languages:
        ax.plot(alphas, [100 * r.score.per_language[lang].rate for r in sweep.rows], marker="o", label=lang)
    ax.plot(alphas, [100 * r.score.average for r in sweep.rows], marker="s", color="k", label="Average")
    ax.set_xlabel("merge operations (alpha)")
    ax.set_ylabel("error rate (%)")
    ax.legend(fontsize=7, frameon=False)
    ax.set_title(f"config {sweep.config.hash}, seed {sweep.config.seed}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def write_pipeline_report(res: "PipelineResult", out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    header, rows = pipeline_table(res)
    md = "\n".join(
        ["# Multilingual toy report", "", *_provenance(res.config), f"alpha: {res.alpha}", "", markdown_table(header, rows), ""]
    )
    paths = {"md": out / "report.md", "csv": out / "report.csv", "png": out / "report.png", "json": out / "report.json"}
    paths["md"].write_text(md, encoding="utf-8")
    paths["csv"].write_text(csv_text(header, rows), encoding="utf-8")
    summary = {
        "config_hash": res.config.hash,
        "seed": res.config.seed,
        "alpha": res.alpha,
        "config": res.config.tree,
        "schemes": {
            r.scheme.value: {
                "vocab_size": r.vocab_size,
                "steps": r.steps,
                "final_loss": round(r.final_loss, 6),
                "lid_accuracy": r.lid_accuracy,
                "score": r.score.to_dict(),
            }
            for r in res.results
        },
    }
    paths["json"].write_text(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    _bar_figure(res, paths["png"])
    return paths


def write_sweep_report(sweep: "SweepResult", out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    header, rows = sweep_table(sweep)
    md = "\n".join(
        [
            "# Merge-operation sweep",
            "",
            *_provenance(sweep.config),
            f"scheme: {sweep.scheme.value}",
            "",
            markdown_table(header, rows),
            "",
        ]
    )
    paths = {"md": out / "sweep.md", "csv": out / "sweep.csv", "png": out / "sweep.png"}
    paths["md"].write_text(md, encoding="utf-8")
    paths["csv"].write_text(csv_text(header, rows), encoding="utf-8")
    _sweep_figure(sweep, paths["png"])
    return paths
