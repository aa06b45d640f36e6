"""
Static plots (PNG files only)
"""

import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ('l_fw', 'l_ss', 'l_enc', 'l_vmr', 'total')


def plot_loss_curves(metrics: pd.DataFrame, path) -> Path:
    """One line per loss component against the step counter"""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for column in LOSS_COLUMNS:
        if column in metrics and metrics[column].abs().sum() > 0:
            ax.plot(metrics['step'], metrics[column], label=column, linewidth=1.2)
    ax.set_xlabel('step')
    ax.set_ylabel('loss')
    ax.set_yscale('log')
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"✅ Loss curves saved to {path}")
    return path


def plot_subspace_curves(report, path) -> Path:
    """Similarity vs top-i for each text/segment variant pair"""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in report.curves.items():
        ax.plot(range(1, len(values) + 1), values, marker='o', markersize=3, label=name)
    ax.set_xlabel('top-i text singular vectors')
    ax.set_ylabel('subspace similarity')
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f'query {report.qid}')
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"✅ Subspace curves saved to {path}")
    return path
