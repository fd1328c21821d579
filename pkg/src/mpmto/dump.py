"""Particle-state dumps: one CSV table per load step plus a JSON manifest.

Floats are written with 17 significant digits so a dump reads back
bit-exactly. The manifest records a SHA-256 of every table together with
the config hash, so edited files are detected on load.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .constitutive import hencky_stress
from .errors import MPMError

COLUMNS = ("id", "X0x", "X0y", "x", "y", "F11", "F12", "F21", "F22",
           "s11", "s12", "s22", "V", "lx", "ly")
MANIFEST = "manifest.json"


class DumpError(MPMError):
    pass


@dataclass
class StepTable:
    step: int
    load_scale: float
    data: dict            # column name -> array

    @property
    def x(self):
        return np.stack([self.data["x"], self.data["y"]], axis=1)


@dataclass
class Dump:
    steps: list
    meta: dict = field(default_factory=dict)

    def final(self) -> StepTable:
        return self.steps[-1]


def _g(v):
    return format(float(v), ".17g")


def _table(points, state, params, design_values=None):
    n = len(points)
    F = state.F
    if state.sigma is not None:
        sig = state.sigma
    elif params is not None:
        sig = hencky_stress(F, params.lam, params.mu).sigma
    else:
        sig = np.zeros((n, 2, 2))
    V = np.linalg.det(F) * points.V0
    cols = {"id": np.arange(n), "X0x": points.X0[:, 0], "X0y": points.X0[:, 1],
            "x": state.x[:, 0], "y": state.x[:, 1],
            "F11": F[:, 0, 0], "F12": F[:, 0, 1], "F21": F[:, 1, 0], "F22": F[:, 1, 1],
            "s11": sig[:, 0, 0], "s12": sig[:, 0, 1], "s22": sig[:, 1, 1], "V": V,
            "lx": state.l[:, 0], "ly": state.l[:, 1]}
    if design_values is not None:
        dv = np.asarray(design_values, dtype=float).reshape(n, -1)
        for j in range(dv.shape[1]):
            cols[f"d{j}"] = dv[:, j]
    return cols


def _encode(cols) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(cols)
    w.writerow(names)
    n = len(cols["id"])
    for i in range(n):
        w.writerow([str(int(cols[k][i])) if k == "id" else _g(cols[k][i]) for k in names])
    return buf.getvalue().encode("ascii")


def dump_state(record, points, out_dir, params=None, design_values=None,
               config_hash="", steps="all", extra=None) -> Path:
    """Write the initial and converged step states of ``record`` to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        chosen = [(0, 0.0, record.initial)]
        for res in record.steps:
            if res.state is not None and (steps == "all" or res is record.steps[-1]):
                chosen.append((res.k, res.scale, res.state))
        if record.steps and chosen[-1][0] != record.steps[-1].k:
            last = record.steps[-1]
            chosen.append((last.k, last.scale, record.final))
        for k, scale, st in chosen:
            data = _encode(_table(points, st, params, design_values))
            name = f"step_{k:04d}.csv"
            (out / name).write_bytes(data)
            entries.append({"step": k, "load_scale": scale, "file": name,
                            "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {"format": "mpmto-dump", "version": 1, "code_version": __version__,
                    "config_hash": config_hash, "n_particles": len(points),
                    "steps": entries, "extra": extra or {}}
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise DumpError(f"cannot write dump to {out}: {exc.strerror}") from exc
    return out


def load_dump(path, config_hash=None) -> Dump:
    """Read a dump, checking every table hash and optionally the config hash."""
    root = Path(path)
    if root.is_file():
        root = root.parent
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DumpError(f"cannot read manifest in {root}: {exc}") from exc
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        raise DumpError("config hash mismatch: dump was written for a different config")
    steps = []
    for entry in manifest["steps"]:
        try:
            raw = (root / entry["file"]).read_bytes()
        except OSError as exc:
            raise DumpError(f"cannot read {entry['file']}: {exc.strerror}") from exc
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise DumpError(f"{entry['file']} does not match its manifest hash")
        rows = list(csv.reader(io.StringIO(raw.decode("ascii"))))
        names, body = rows[0], rows[1:]
        data = {}
        for j, name in enumerate(names):
            col = [r[j] for r in body]
            data[name] = np.array(col, dtype=np.int64 if name == "id" else float)
        steps.append(StepTable(entry["step"], entry["load_scale"], data))
    return Dump(steps, manifest)
