"""CSV/JSON artifact writers.

Every file is written whole through a temp-file rename so an interrupted
run never leaves a truncated artifact; the curve logger simply rewrites
its file on each flush (learning curves are small).
"""

import json
import os

from .checkpoint import atomic_write_text


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(col, "")) for col in header))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CurveLogger:
    """Accumulates learning-curve rows and rewrites the CSV atomically."""

    HEADER = ("step", "train_loss", "valid_metric", "lr", "penalty",
              "wallclock_s")

    def __init__(self, path):
        self.path = path
        self.rows = []

    def log(self, step, train_loss, valid_metric, lr, penalty, wallclock_s):
        self.rows.append({
            "step": step,
            "train_loss": float(train_loss),
            "valid_metric": "" if valid_metric is None else float(valid_metric),
            "lr": float(lr),
            "penalty": float(penalty),
            "wallclock_s": float(wallclock_s),
        })
        self.flush()

    def flush(self):
        if self.path is not None:
            write_csv(self.path, self.HEADER, self.rows)
