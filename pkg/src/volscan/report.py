"""ROC figure rendering (the only plot the CLI produces)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402


def roc_svg(roc, label="ROC", auc_value=None) -> bytes:
    """SVG bytes of one ROC curve. Output is deterministic: fixed hash salt
    and no date metadata. The curve's path carries the id ``roc-curve``."""
    with matplotlib.rc_context({"svg.hashsalt": "volscan", "svg.fonttype": "none", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot([0, 1], [0, 1], linestyle="--", color="0.6", gid="chance")
        text = label if auc_value is None else f"{label} (AUC {auc_value:.3f})"
        ax.plot(roc.fpr, roc.tpr, drawstyle="default", color="C0", gid="roc-curve", label=text)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right")
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def write_roc_svg(path, roc, label="ROC", auc_value=None):
    atomic_write_bytes(path, roc_svg(roc, label, auc_value))
