import hashlib
import json
import logging
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from dataset import denormalize_velocity
from utils import ReportError

log_to_stdout = logging.info

REPORT_SCHEMA = 1
REPORT_COLUMNS = ["schema", "train_dataset", "test_dataset", "distribution", "method", "data_fraction",
                  "train_samples", "rank", "alpha", "trainable_params", "mae", "rmse", "ssim", "wall_seconds", "seed",
                  "config_hash"]
IMPROVEMENT_COLUMNS = ["mae_improvement", "rmse_improvement", "ssim_improvement"]
METRICS = ["mae", "rmse", "ssim"]
DISTRIBUTIONS = ["ID", "OOD", "unknown"]
REPORT_METHODS = ["baseline", "fft", "lora", "pfm"]


def config_hash(config):
    """ First 12 hex digits of the SHA-256 of the canonical JSON of `config`. """
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:12]


def make_row(train_dataset, test_dataset, distribution, method, data_fraction, train_samples, rank, alpha,
             trainable_params, metrics, wall_seconds, seed, config):
    return {
        "schema": REPORT_SCHEMA,
        "train_dataset": train_dataset,
        "test_dataset": test_dataset,
        "distribution": distribution,
        "method": method,
        "data_fraction": data_fraction,
        "train_samples": train_samples,
        "rank": rank,
        "alpha": alpha,
        "trainable_params": trainable_params,
        "mae": metrics.mae,
        "rmse": metrics.rmse,
        "ssim": metrics.ssim,
        "wall_seconds": round(wall_seconds, 3),
        "seed": seed,
        "config_hash": config_hash(config)
    }


def write_report(rows, path, extra_columns=None):
    columns = REPORT_COLUMNS + (extra_columns if extra_columns is not None else [])
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    log_to_stdout(f"Wrote {len(rows)} report rows to '{path}'")


def read_report(path):
    """ Reads and validates an ExperimentReport CSV. Errors name the offending line of the file. """
    try:
        df = pd.read_csv(path, dtype={"train_dataset": str, "test_dataset": str, "method": str,
                                      "distribution": str})
    except pd.errors.EmptyDataError as err:
        raise ReportError(f"{path}: empty report") from err
    except pd.errors.ParserError as err:
        raise ReportError(f"{path}: malformed CSV ({err})") from err

    missing = [col for col in REPORT_COLUMNS if col not in df.columns]
    if missing:
        raise ReportError(f"{path}:1: header lacks columns {missing}")
    if len(df) == 0:
        raise ReportError(f"{path}: report has a header but no rows")

    for idx_row, row in df.iterrows():
        line = idx_row + 2  # 1-based, after the header
        if row["schema"] != REPORT_SCHEMA:
            raise ReportError(f"{path}:{line}: unsupported schema '{row['schema']}', expected {REPORT_SCHEMA}")
        if row["method"] not in REPORT_METHODS:
            raise ReportError(f"{path}:{line}: unknown method '{row['method']}'")
        if row["distribution"] not in DISTRIBUTIONS:
            raise ReportError(f"{path}:{line}: unknown distribution '{row['distribution']}'")
        for metric in METRICS:
            try:
                value = float(row[metric])
            except (TypeError, ValueError):
                raise ReportError(f"{path}:{line}: {metric} value '{row[metric]}' is not a number")
            if not np.isfinite(value):
                raise ReportError(f"{path}:{line}: {metric} value is missing")

    df[METRICS] = df[METRICS].astype(float)
    return df


def series_label(row):
    if row["method"] == "lora" and not pd.isna(row["rank"]):
        return f"lora (r={int(row['rank'])}, alpha={row['alpha']:g})"
    return row["method"]


def _group_column(df):
    """ The column bars are grouped by: data fractions for low-data grids, test datasets otherwise. """
    if df["data_fraction"].nunique() > 1:
        return "data_fraction"
    return "test_dataset"


def plot_metric(df, metric, path):
    group_col = _group_column(df)
    df = df.assign(series=df.apply(series_label, axis=1))
    table = df.pivot_table(index=group_col, columns="series", values=metric, aggfunc="mean", sort=True)

    groups, series = list(table.index), list(table.columns)
    width = 0.8 / max(1, len(series))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(groups) * max(1, len(series)) * 0.5), 4.5))
    for idx_series, name in enumerate(series):
        positions = np.arange(len(groups)) + (idx_series - (len(series) - 1) / 2) * width
        ax.bar(positions, table[name].values, width=width, label=name)

    ax.set_xticks(np.arange(len(groups)))
    ax.set_xticklabels([str(g) for g in groups])
    ax.set_xlabel(group_col)
    ax.set_ylabel(metric.upper())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def summary_markdown(df):
    """ Deterministic markdown table of the report, sorted by (test dataset, fraction, method, rank, alpha). """
    sort_cols = ["test_dataset", "data_fraction", "method", "rank", "alpha"]
    df = df.sort_values(sort_cols, kind="mergesort", na_position="first")
    columns = ["train_dataset", "test_dataset", "distribution", "method", "data_fraction", "rank", "alpha",
               "trainable_params", "mae", "rmse", "ssim"]
    columns += [col for col in IMPROVEMENT_COLUMNS if col in df.columns]

    def _fmt(value):
        if isinstance(value, float):
            if np.isnan(value):
                return ""
            return f"{value:.4f}" if not float(value).is_integer() else f"{int(value)}"
        return str(value)

    lines = ["# Experiment summary", "",
             f"{len(df)} rows, methods: {', '.join(sorted(df['method'].unique()))}", "",
             "| " + " | ".join(columns) + " |",
             "|" + "|".join(["---"] * len(columns)) + "|"]
    for _, row in df.iterrows():
        lines.append("| " + " | ".join(_fmt(row[col]) for col in columns) + " |")

    best_idx = df["mae"].idxmin()
    lines += ["", f"Lowest MAE: {df.loc[best_idx, 'mae']:.4f} ({series_label(df.loc[best_idx])} on "
                  f"{df.loc[best_idx, 'test_dataset']})", ""]
    return "\n".join(lines)


def render_report(csv_path, out_dir):
    """ Writes mae.png, rmse.png, ssim.png and summary.md into `out_dir`. Nothing is written for an invalid CSV. """
    df = read_report(csv_path)
    os.makedirs(out_dir, exist_ok=True)

    outputs = []
    for metric in METRICS:
        plot_path = os.path.join(out_dir, f"{metric}.png")
        plot_metric(df, metric, plot_path)
        outputs.append(plot_path)

    summary_path = os.path.join(out_dir, "summary.md")
    with open(summary_path, "w", encoding="utf-8") as f_summary:
        f_summary.write(summary_markdown(df))
    outputs.append(summary_path)
    log_to_stdout(f"Rendered {len(df)} report rows into '{out_dir}'")
    return outputs


def plot_velocity_maps(preds, targets, path, title=None, max_samples=4, stats=None):
    """ Ground truth (top) and predicted (bottom) velocity maps of the first samples, in m/s. `preds` and `targets`
        are normalized [N, 1, V, V] tensors or arrays. """
    preds, targets = np.asarray(preds)[:max_samples, 0], np.asarray(targets)[:max_samples, 0]
    v_range = {} if stats is None else {"v_min": stats.v_min, "v_max": stats.v_max}
    preds, targets = denormalize_velocity(preds, **v_range), denormalize_velocity(targets, **v_range)
    vmin, vmax = float(np.min(targets)), float(np.max(targets))

    num_samples = preds.shape[0]
    fig, ax = plt.subplots(2, num_samples, figsize=(3 * num_samples, 6), squeeze=False)
    for idx_sample in range(num_samples):
        for idx_kind, (kind, maps) in enumerate([("True", targets), ("Predicted", preds)]):
            im = ax[idx_kind, idx_sample].imshow(maps[idx_sample], cmap="viridis", vmin=vmin, vmax=vmax)
            ax[idx_kind, idx_sample].set_title(f"{kind} #{idx_sample}")
            ax[idx_kind, idx_sample].axis("off")
    fig.colorbar(im, ax=ax.ravel().tolist(), label="velocity (m/s)")
    if title is not None:
        fig.suptitle(title)
    fig.savefig(path)
    plt.close(fig)
