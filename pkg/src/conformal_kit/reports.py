"""Report writers: metrics CSV, per-repetition CSV, auxiliary draws CSV, and a JSON summary."""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from .simulate import MetricsTable

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def build_metadata(command: str, config: Dict[str, Any], version: str, kernel_family: Optional[str] = None) -> Dict[str, Any]:
    """Audit block embedded in every summary: the resolved config and the library version."""
    return {
        "command": command,
        "version": version,
        "kernel_family": kernel_family,
        "config": config,
    }


def save_report(
    table: MetricsTable,
    prefix: Union[str, Path],
    metadata: Dict[str, Any],
) -> Dict[str, Path]:
    """
    Write `<prefix>_metrics.csv` (one row per method), `<prefix>_reps.csv`
    (one row per method and repetition), `<prefix>_summary.json`, and
    `<prefix>_auxiliary.csv` when auxiliary covariate draws were recorded.

    Outputs carry no timestamps, so identical runs give identical files.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": prefix.with_name(prefix.name + "_metrics.csv"),
        "reps": prefix.with_name(prefix.name + "_reps.csv"),
        "summary": prefix.with_name(prefix.name + "_summary.json"),
    }
    summary = table.summary()
    summary.to_csv(paths["metrics"], index=False)
    table.records.to_csv(paths["reps"], index=False)
    if not table.auxiliary.empty:
        paths["auxiliary"] = prefix.with_name(prefix.name + "_auxiliary.csv")
        table.auxiliary.to_csv(paths["auxiliary"], index=False)

    payload = {
        "metadata": metadata,
        "alpha": table.level.alpha,
        "summary": summary.to_dict(orient="records"),
        "extras": table.extras,
    }
    with open(paths["summary"], "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("report written to %s", ", ".join(str(p) for p in paths.values()))
    return paths


def digest(command: str, table: MetricsTable) -> str:
    """One-line result summary, e.g. `simulate: scp marginal=0.901 cond_miscov=0.052 | ...`."""
    parts = []
    for row in table.summary().to_dict(orient="records"):
        fields = [f"{key}={row[key]:.3f}" for key in ("marginal", "cond_miscov")
                  if isinstance(row.get(key), (int, float)) and not pd.isna(row[key])]
        if "mismatch" in row and not pd.isna(row["mismatch"]):
            fields.append(f"mismatch={row['mismatch']:.3f}")
        parts.append(" ".join([str(row["method"])] + fields))
    return f"{command}: " + " | ".join(parts)
