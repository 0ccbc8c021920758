"""Plot-data export from metrics records.

CSV schemas (column order is fixed):

=============  =================================================================  ===============
target         columns                                                            source records
=============  =================================================================  ===============
fig3           dataset,teacher,T,mean_entropy,std                                 entropy-scan
fig4           dataset,teacher,n_per_class,accuracy                               transfer-sweep
fig6           dataset,batch,epochs,entropy,accuracy                              sweet-spot
fig8           dataset,teacher,n_per_class,accuracy                               sweet-spot with a transfer comparison
table4-6       dataset,teacher,T,missing_class,missing_class_accuracy,overall     missing-class
projection     dataset,teacher,x,y,class                                          project
=============  =================================================================  ===============

Floats are written with ``repr`` so that re-importing gives back the exact
values.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ConfigError, DataError

COLUMNS = {
    "fig3": ("dataset", "teacher", "T", "mean_entropy", "std"),
    "fig4": ("dataset", "teacher", "n_per_class", "accuracy"),
    "fig6": ("dataset", "batch", "epochs", "entropy", "accuracy"),
    "fig8": ("dataset", "teacher", "n_per_class", "accuracy"),
    "table4-6": ("dataset", "teacher", "T", "missing_class", "missing_class_accuracy", "overall"),
    "projection": ("dataset", "teacher", "x", "y", "class"),
}
SOURCES = {"fig3": "entropy-scan", "fig4": "transfer-sweep", "fig6": "sweet-spot", "fig8": "sweet-spot",
           "table4-6": "missing-class", "projection": "project"}
TARGETS = tuple(COLUMNS)

_INT_COLS = {"n_per_class", "batch", "epochs", "missing_class", "class"}
_STR_COLS = {"dataset", "teacher"}


def _transfer_rows(ds, transfer):
    for row in transfer["rows"]:
        for n, acc in zip(transfer["sizes"], row["accuracy"]):
            yield (ds, row["teacher"], n, acc)


def _rows(target, rec):
    m = rec.metrics
    ds = rec.config["dataset"]["id"]
    if target == "fig3":
        for name, c in m["curves"].items():
            for T, mean, std in zip(c["T"], c["mean_entropy"], c["std"]):
                yield (ds, name, T, mean, std)
    elif target == "fig4":
        yield from _transfer_rows(ds, m["transfer"])
    elif target == "fig6":
        for c in m["cells"]:
            yield (ds, c["batch"], c["epochs"], c["entropy"], c["accuracy"])
    elif target == "fig8":
        if "transfer" not in m:
            raise DataError("sweet-spot record has no transfer comparison (set params.transfer_sizes)")
        yield from _transfer_rows(ds, m["transfer"])
    elif target == "table4-6":
        t = m["table"]
        for row in t["rows"]:
            for T, miss, overall in zip(t["temperatures"], row["missing_class_accuracy"], row["overall_accuracy"]):
                yield (ds, row["teacher"], T, t["missing_class"], miss, overall)
    elif target == "projection":
        for name, pr in m["projections"].items():
            for (x, y), c in zip(pr["points"], pr["labels"]):
                yield (ds, name, x, y, c)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "nan"
    return str(v)


def export_plot_data(records, target, out):
    """Write the CSV for ``target`` from matching records; returns the file path.

    Records of other experiments are ignored. All matching records must share
    one config hash; mixing configurations is refused.
    """
    if target not in COLUMNS:
        raise ConfigError("target", f"unknown target {target!r}; valid targets: {', '.join(TARGETS)}")
    matching = [r for r in records if r.experiment == SOURCES[target]]
    if not matching:
        raise DataError(f"nothing to export: no {SOURCES[target]} records for {target}")
    hashes = {r.config_hash for r in matching}
    if len(hashes) > 1:
        raise ConfigError("records", f"{len(hashes)} different configurations mixed for {target}")
    out = Path(out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{target}.csv"
    rows = list(_rows(target, matching[0]))
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS[target])
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    tmp.replace(out)
    return out


def import_plot_data(path):
    """Read an exported CSV back as a list of dicts with typed values."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = tuple(reader.fieldnames or ())
        if header not in COLUMNS.values():
            raise DataError(f"{path}: unrecognised header {header}")
        out = []
        for row in reader:
            out.append({k: v if k in _STR_COLS else int(v) if k in _INT_COLS else float(v)
                        for k, v in row.items()})
    return out
