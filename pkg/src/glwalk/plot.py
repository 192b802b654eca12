"""SVG figures from report CSVs.

Every data series and reference line carries a gid ("data", "fit",
"ref-sqrt", "ref-vn", ...) so the SVG can be inspected structurally.
"""

from __future__ import annotations

import io as _io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import SchemaError, atomic_write, read_csv  # noqa: E402

PLOT_KINDS = {"be_curve": "be_curve", "rate_fit": "be_curve", "depcoef": "depcoef", "gap": "gap"}


def _vn(n: np.ndarray, q: float) -> np.ndarray:
    return (np.log(n) / n) ** (q / 2.0 - 1.0)


def _anchor(ref: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Rescale a reference shape so it passes through the first data point."""
    return ref * (y[0] / ref[0])


def plot(report_csv, kind: str, out=None, q: float | None = None, observable: str | None = None) -> Path:
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}")
    _, rows = read_csv(report_csv, PLOT_KINDS[kind])
    if not rows:
        raise SchemaError(f"{report_csv}: no data rows")
    out = Path(out) if out is not None else Path(report_csv).with_suffix(f".{kind}.svg")

    fig, ax = plt.subplots(figsize=(6, 4))
    if kind in ("be_curve", "rate_fit"):
        obs = observable or rows[0]["observable"]
        sel = [r for r in rows if r["observable"] == obs]
        if not sel:
            raise SchemaError(f"no rows for observable {obs!r}")
        n = np.array([float(r["n"]) for r in sel])
        y = np.array([float(r["D_n"]) for r in sel])
        ax.plot(n, y, marker="o", linestyle="-", gid="data", label=f"D_n ({obs})")
        ax.plot(n, _anchor(n ** -0.5, y), linestyle="--", gid="ref-sqrt", label="n^-1/2")
        if q is not None:
            ax.plot(n, _anchor(_vn(n, q), y), linestyle=":", gid="ref-vn", label=f"((log n)/n)^{q / 2 - 1:g}")
        if kind == "rate_fit":
            if len(n) < 2:
                raise SchemaError("rate_fit plot needs >= 2 points")
            b, a = np.polyfit(np.log(n), np.log(y), 1)
            ax.plot(n, np.exp(a + b * np.log(n)), linestyle="-.", gid="fit", label=f"fit slope {b:.3f}")
        floor = float(sel[0]["mc_floor"])
        ax.axhline(floor, color="grey", linewidth=0.8, gid="mc-floor")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel("Kolmogorov distance")
    elif kind == "depcoef":
        k = np.array([float(r["k"]) for r in rows])
        y = np.array([float(r["delta_hat"]) for r in rows])
        p = float(rows[0]["p"])
        pos = y > 0
        ax.plot(k[pos], y[pos], marker="o", linestyle="-", gid="data", label="delta_hat")
        if q is not None:
            ax.plot(k[pos], _anchor(k[pos] ** -(q / p - 1.0), y[pos]), linestyle="--", gid="ref-decay",
                    label=f"k^-{q / p - 1:g}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("k")
        ax.set_ylabel("dependence coefficient")
    else:
        n = np.array([float(r["n"]) for r in rows])
        y = np.array([float(r["max_gap"]) for r in rows])
        ax.plot(n, y, marker="o", linestyle="-", gid="data", label="max gap")
        ax.set_xscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel("gap")
    ax.legend(fontsize=8)
    fig.tight_layout()
    buf = _io.BytesIO()
    with plt.rc_context({"svg.hashsalt": "glwalk", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write(out, buf.getvalue())
    return out


def count_markers(svg_text: str, gid: str = "data") -> int:
    """Number of marker instances drawn inside the group with the given gid."""
    start = svg_text.find(f'id="{gid}"')
    if start < 0:
        return 0
    end = svg_text.find('<g id="', start + 1)
    return svg_text[start:end if end > 0 else None].count("<use ")
