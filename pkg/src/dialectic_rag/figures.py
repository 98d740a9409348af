"""Report figures: per-language accuracy bars and run-to-run deltas.

Rendered headlessly (Agg) to PNG files next to the report. Figures are a
convenience view of the report payload; the JSON/TSV outputs stay the source
of truth.
"""

from __future__ import annotations

from pathlib import Path


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def accuracy_by_language(labels: list[str], tables, path: str | Path) -> Path:
    """Grouped bars: accuracy per language, one group of bars per results file."""
    plt = _plt()
    langs = sorted({lang for table in tables for lang in table.per_lang})
    langs.append("all")
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(langs)), 4.0))
    width = 0.8 / max(1, len(tables))
    for i, (label, table) in enumerate(zip(labels, tables)):
        values = []
        for lang in langs:
            if lang == "all":
                values.append(100.0 * table.overall.accuracy)
            else:
                m = table.per_lang.get(lang)
                values.append(100.0 * m.accuracy if m else 0.0)
        positions = [x + i * width for x in range(len(langs))]
        ax.bar(positions, values, width=width, label=label)
    ax.set_xticks([x + 0.4 - width / 2 for x in range(len(langs))])
    ax.set_xticklabels(langs)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title("Accuracy by language")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def delta_by_language(delta: dict, path: str | Path) -> Path:
    """Signed bars of the accuracy change (run2 - run1) per language."""
    plt = _plt()
    langs = [lang for lang in delta if lang != "overall"] + ["overall"]
    values = [
        100.0 * (delta[lang]["accuracy"] if delta[lang]["accuracy"] is not None else 0.0)
        for lang in langs
    ]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.0 * len(langs)), 4.0))
    colors = ["#2a7e43" if v >= 0 else "#b2332e" for v in values]
    ax.bar(range(len(langs)), values, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(langs)))
    ax.set_xticklabels(langs)
    ax.set_ylabel("Δ accuracy (points)")
    ax.set_title("Performance difference (run2 - run1)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
