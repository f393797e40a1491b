"""Static SVG plots of attack traces and detector ROC curves."""
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.schemas.attack import AttackResult  # noqa: E402
from app.schemas.defense import RocCurve  # noqa: E402

logger = logging.getLogger(__name__)

# fixed salt and no date so identical inputs give byte-identical files
matplotlib.rcParams["svg.hashsalt"] = "illusion-toolkit"
SVG_METADATA = {"Date": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info("wrote plot %s", path)
    return path


def plot_traces(results: Sequence[AttackResult], path, max_lines: int = 20) -> Path:
    """One line per result: loss (gradient attacks) or accepted objective (query attacks)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for index, result in enumerate(results[:max_lines]):
        if result.trace:
            ax.plot(range(len(result.trace)), result.trace, linewidth=0.8, label=f"sample {index}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss / objective")
    ax.set_title("Attack traces")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_roc(curve: RocCurve, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(curve.fpr, curve.tpr, label=f"AUC = {curve.auc:.3f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("Consistency detector")
    ax.legend(loc="lower right")
    return _save(fig, path)
