"""Plot-ready CSV tables and optional SVG renderings.

CSV floats use nine significant digits. SVG output needs matplotlib, which is
imported only when a figure is requested.
"""

from __future__ import annotations

import csv
import io
from typing import Iterable, Sequence

import numpy as np

from .core import atomic_write_text, format_float


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _flag(b) -> str:
    return "true" if b else "false"


def deviance_csv(results) -> str:
    return _csv(
        ("worker_id", "deviance", "df", "p_value", "flagged"),
        ((r.worker_id, float(r.deviance), r.df, float(r.p_value), _flag(r.flagged)) for r in results),
    )


def deviance_plot_csv(results, worker_index) -> str:
    """``(worker_index, deviance, critical)`` rows with 1-based worker positions."""
    return _csv(
        ("worker_index", "deviance", "critical"),
        ((worker_index[r.worker_id] + 1, float(r.deviance), float(r.critical)) for r in results),
    )


def akld_csv(c1_matches) -> str:
    rows = []
    for m in c1_matches:
        for s in m.scores:
            rows.append((m.worker_id, s.archetype.name, float(s.akld), float(s.mkld), _flag(m.archetype == s.archetype.name)))
    return _csv(("worker_id", "archetype", "akld", "mkld", "matched"), rows)


def risk_csv(risk) -> str:
    return _csv(
        ("worker_id", "behavior_score", "time_score", "accuracy_score", "total", "tier"),
        ((r.worker_id, r.behavior_score, r.time_score, r.accuracy_score, r.total, r.tier.value) for r in risk),
    )


def sweep_csv(rows) -> str:
    """``rows`` of ``(fraction, archetype_name, spammer_index)``."""
    return _csv(("fraction", "archetype", "spammer_index"), ((float(f), a, float(si)) for f, a, si in rows))


def akld_histogram_csv(samples: dict, bins: int = 50) -> str:
    """Densities of credible and spammer aKLD per archetype on a shared grid."""
    rows = []
    for kind, (cred, spam) in samples.items():
        both = np.concatenate([cred, spam])
        edges = np.linspace(both.min(), both.max(), bins + 1)
        if edges[0] == edges[-1]:
            edges = np.linspace(edges[0], edges[0] + 1.0, bins + 1)
        hc, _ = np.histogram(cred, edges, density=True)
        hs, _ = np.histogram(spam, edges, density=True)
        for i in range(bins):
            rows.append((kind.short, float(edges[i]), float(edges[i + 1]), float(hc[i]), float(hs[i])))
    return _csv(("archetype", "bin_left", "bin_right", "credible_density", "spammer_density"), rows)


def write(path, text: str) -> None:
    atomic_write_text(path, text)


# -- figures -----------------------------------------------------------------------


def _svg_text(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    return buf.getvalue()


def deviance_svg(results, worker_index) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = [worker_index[r.worker_id] + 1 for r in results]
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(x, [r.deviance for r in results], color=["C3" if r.flagged else "C0" for r in results])
    crit = sorted({round(r.critical, 6) for r in results})
    for c in crit:
        ax.axhline(c, color="k", lw=0.8, ls="--")
    ax.set_xlabel("worker")
    ax.set_ylabel("deviance distance")
    text = _svg_text(fig)
    plt.close(fig)
    return text


def sweep_svg(rows) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_arch: dict = {}
    for f, a, si in rows:
        by_arch.setdefault(a, []).append((f, si))
    for a, pts in by_arch.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=a)
    ax.set_xlabel("spammer fraction")
    ax.set_ylabel("Spammer Index")
    ax.legend()
    text = _svg_text(fig)
    plt.close(fig)
    return text
