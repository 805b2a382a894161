"""CSV tables, JSON manifests and generated plot scripts.

Floats are written with ``repr`` so a CSV round-trips exactly; nothing
time-dependent goes into any output, so re-running a manifest reproduces
every file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Table:
    header: list[str]
    rows: list[list]
    plot: dict | None = None  # {"x": column, "y": [columns], "logx": bool, "logy": bool}


@dataclass
class Result:
    tables: dict[str, Table] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def write_csv(path, table: Table) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for r in table.rows:
            w.writerow([_cell(v) for v in r])


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import numba
    import scipy

    from .. import __version__

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "homlab": __version__,
    }


PLOT_TEMPLATE = '''"""Plot {name}; generated alongside the CSV and runnable on its own."""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "{csv}"
with open(path) as fh:
    rows = list(csv.DictReader(fh))
x = [float(r["{x}"]) for r in rows]
fig, ax = plt.subplots()
for col in {y!r}:
    ax.plot(x, [float(r[col]) for r in rows], "o-", label=col)
ax.set_xlabel("{x}")
if {logx}:
    ax.set_xscale("log")
if {logy}:
    ax.set_yscale("log")
ax.legend()
ax.set_title("{name}")
fig.savefig("{stem}.png", dpi=120)
'''


def plot_script(name: str, csv_name: str, spec: dict) -> str:
    return PLOT_TEMPLATE.format(
        name=name, csv=csv_name, x=spec["x"], y=list(spec["y"]), logx=bool(spec.get("logx", False)),
        logy=bool(spec.get("logy", False)), stem=Path(csv_name).stem,
    )


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def write_result(out_dir, experiment: str, config: dict, result: Result) -> Path:
    """Write every table, one plot script per plottable table, and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, table in result.tables.items():
        fname = f"{experiment}_{name}.csv"
        write_csv(out / fname, table)
        files[fname] = sha256(out / fname)
        if table.plot:
            pname = f"plot_{experiment}_{name}.py"
            (out / pname).write_text(plot_script(f"{experiment} {name}", fname, table.plot))
    manifest = {
        "experiment": experiment,
        "config": config,
        "summary": _jsonable(result.summary),
        "versions": versions(),
        "outputs": files,
    }
    path = out / f"{experiment}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_outputs(manifest_path, out_dir=None) -> dict[str, bool]:
    """Compare the CSV hashes recorded in a manifest with the files in ``out_dir``."""
    manifest = json.loads(Path(manifest_path).read_text())
    out = Path(out_dir) if out_dir is not None else Path(manifest_path).parent
    return {f: (out / f).exists() and sha256(out / f) == h for f, h in manifest["outputs"].items()}
