"""Metric tables, sample dumps and sample-grid images."""
import csv
import io
import json
import logging

import numpy as np
from PIL import Image

from core.evaluation import MetricsRecord
from core.storage import atomic_write_bytes, atomic_write_json, atomic_write_text

logger = logging.getLogger('reporting')

TILE_SCALE = 4
TILE_GAP = 2


def _format(value) -> str:
    return repr(float(value))


def _csv_text(fieldnames: list[str], rows: list[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def write_metrics_csv(path: str, records: list[MetricsRecord]) -> str:
    """One flat row per task boundary: shares, bits/dim per task and forgetting per task."""
    n_classes = max((len(r.class_shares) for r in records), default=0)
    n_tasks = max((len(r.loss_matrix_row) for r in records), default=0)
    fieldnames = (["after_task", "task_id"] + [f"share_{c}" for c in range(n_classes)]
                  + [f"bpd_task_{j}" for j in range(n_tasks)] + [f"forgetting_task_{j}" for j in range(n_tasks)])
    rows = []
    for record in records:
        row = {"after_task": record.after_task, "task_id": record.task_id}
        row.update({f"share_{c}": _format(v) for c, v in enumerate(record.class_shares)})
        row.update({f"bpd_task_{j}": _format(v) for j, v in enumerate(record.loss_matrix_row)})
        row.update({f"forgetting_task_{j}": _format(v) for j, v in enumerate(record.forgetting)})
        rows.append(row)
    return atomic_write_text(path, _csv_text(fieldnames, rows))


def write_metrics_json(path: str, records: list[MetricsRecord], summary: dict | None = None) -> str:
    payload = {"records": [r.to_dict() for r in records]}
    if summary:
        payload["summary"] = summary
    return atomic_write_json(path, payload)


def read_metrics_json(path: str) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    return [MetricsRecord.from_dict(r) for r in payload["records"]]


def export_plot_tables(records: list[MetricsRecord], shares_path: str, matrix_path: str,
                       class_labels=None) -> tuple[str, str]:
    """Long-format tables: (after_task, class, share) and (after_task, eval_task, bits_per_dim)."""
    share_rows, matrix_rows = [], []
    for record in records:
        for c, share in enumerate(record.class_shares):
            label = class_labels[c] if class_labels is not None else c
            share_rows.append({"after_task": record.after_task, "class": label, "share": _format(share)})
        for j, value in enumerate(record.loss_matrix_row):
            matrix_rows.append({"after_task": record.after_task, "eval_task": j, "bits_per_dim": _format(value)})
    atomic_write_text(shares_path, _csv_text(["after_task", "class", "share"], share_rows))
    atomic_write_text(matrix_path, _csv_text(["after_task", "eval_task", "bits_per_dim"], matrix_rows))
    return shares_path, matrix_path


def write_samples_csv(path: str, samples: np.ndarray, columns: list[str], codec=None) -> str:
    """Generated rows as CSV; tabular rows are decoded back to column values when a codec is given."""
    if codec is not None:
        rows = [{c: (v if isinstance(v, str) else _format(v)) for c, v in record.items()}
                for record in codec.decode(samples)] if len(samples) else []
        return atomic_write_text(path, _csv_text(list(codec.columns), rows))
    rows = [{c: _format(v) for c, v in zip(columns, row)} for row in samples]
    return atomic_write_text(path, _csv_text(list(columns), rows))


def write_loss_log(path: str, losses: list[list[float]]) -> str:
    rows = [{"task": t, "step": s, "loss_nats": _format(v)}
            for t, task_losses in enumerate(losses) for s, v in enumerate(task_losses, start=1)]
    return atomic_write_text(path, _csv_text(["task", "step", "loss_nats"], rows))


def _tile(sample: np.ndarray, image_shape: tuple, levels: int) -> np.ndarray:
    pixels = np.asarray(sample, dtype=np.float64).reshape(image_shape)
    scaled = np.clip(pixels / max(levels - 1, 1), 0.0, 1.0)
    return np.kron((255.0 * scaled).astype(np.uint8), np.ones((TILE_SCALE, TILE_SCALE), dtype=np.uint8))


def write_sample_grid(path: str, samples_by_task: list[np.ndarray], image_shape: tuple, columns: int = 8,
                      levels: int = 2) -> str:
    """Renders generated images as a PNG grid, one row per task and ``columns`` samples per row.

    Args:
        path: Output PNG path.
        samples_by_task: Flattened samples per task, in task order.
        image_shape: (height, width) of one sample.
        columns: Samples shown per task.
        levels: Number of pixel classes (2 for binarized images).
    """
    height, width = image_shape[0] * TILE_SCALE, image_shape[1] * TILE_SCALE
    n_rows = max(len(samples_by_task), 1)
    canvas = np.full((n_rows * (height + TILE_GAP) + TILE_GAP, columns * (width + TILE_GAP) + TILE_GAP),
                     128, dtype=np.uint8)
    for r, samples in enumerate(samples_by_task):
        for c, sample in enumerate(samples[:columns]):
            top, left = TILE_GAP + r * (height + TILE_GAP), TILE_GAP + c * (width + TILE_GAP)
            canvas[top:top + height, left:left + width] = _tile(sample, image_shape, levels)
    buffer = io.BytesIO()
    Image.fromarray(canvas).save(buffer, format="PNG")
    logger.info(f"Writing a {n_rows}x{columns} sample grid to {path}")
    return atomic_write_bytes(path, buffer.getvalue())
