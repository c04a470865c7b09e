"""Deterministic on-disk formats: path CSVs, JSON sidecars, tidy plot tables.

Nothing written here carries a timestamp, so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from . import __version__

PLOT_COLUMNS = {
    "fk-compare": ["x", "psi_pde_re", "psi_pde_im", "psi_mc_re", "psi_mc_im", "se", "z"],
    "eigen": ["k", "E_re", "E_im", "residual"],
    "identity": ["metric", "probe", "diff"],
    "structure": ["bucket", "t_start", "t_end", "mu", "nu", "rate_re", "rate_im", "se",
                  "predicted_re", "predicted_im"],
    "phi-sweep": ["phi", "xx", "yy", "xy", "xx_pred", "yy_pred", "xy_pred", "xx_se", "yy_se",
                  "xy_se", "max_abs_z"],
    "trajectory": ["tau", "component", "z", "zdot"],
    "norms": ["step", "time", "norm"],
}


def fmt(x) -> str:
    """Shortest round-trip float formatting."""
    return repr(float(x))


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def path_header(ens) -> dict:
    p = ens.params
    return {"n": p.dim, "dt": ens.config.dt, "seed": ens.config.master_seed,
            "alpha": [p.alpha.real, p.alpha.imag], "lambda": p.lam, "m": p.m}


def write_paths_csv(ens, path, max_paths=None):
    """Header lines ``# key=value`` then rows path, tau, Re Z^0.., Im Z^0.."""
    n = ens.params.dim
    count = ens.n_paths if max_paths is None else min(max_paths, ens.n_paths)
    head = path_header(ens)
    with open(path, "w", newline="") as fh:
        for k in ("n", "dt", "seed", "alpha", "lambda", "m"):
            v = head[k]
            fh.write(f"# {k}={json.dumps(v) if isinstance(v, list) else v}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path", "tau"] + [f"re{k}" for k in range(n)] + [f"im{k}" for k in range(n)])
        for p in range(count):
            for t, z in zip(ens.times, ens.positions[p]):
                wr.writerow([p, fmt(t)] + [fmt(v) for v in z.real] + [fmt(v) for v in z.imag])


def read_paths_csv(path):
    """Returns (header dict, positions array (paths, steps, n), times)."""
    header, rows = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, v = line[2:].strip().split("=", 1)
                header[k] = json.loads(v)
            else:
                break
        rows = list(csv.reader(fh))
    n = int(header["n"])
    data = np.array(rows, dtype=float)
    n_paths = int(data[:, 0].max()) + 1
    data = data.reshape(n_paths, -1, data.shape[1])
    pos = data[..., 2:2 + n] + 1j * data[..., 2 + n:2 + 2 * n]
    return header, pos, data[0, :, 1]


def sidecar(ens, config_hash: str, extra=None) -> dict:
    p, c = ens.params, ens.config
    meta = {
        "params": {"rho": p.rho, "phi": p.phi, "lambda": p.lam, "m": p.m, "q": p.q,
                   "dim": p.dim, "mode": p.mode},
        "config": {"n_paths": c.n_paths, "dt": c.dt, "horizon": c.horizon,
                   "master_seed": c.master_seed, "z0": [[float(np.real(v)), float(np.imag(v))]
                                                        for v in c.start]},
        "attrition": ens.attrition,
        "rejected": int(ens.rejected.sum()),
        "config_hash": config_hash,
        "version": __version__,
    }
    if "warning" in ens.metadata:
        meta["warning"] = ens.metadata["warning"]
    if extra:
        meta.update(extra)
    return meta


def emit_plot_data(rows, kind: str, out_dir, name=None) -> Path:
    """Tidy CSV, one observation per row, columns fixed per ``kind``."""
    if kind not in PLOT_COLUMNS:
        raise ValueError(f"unknown plot kind {kind!r}; known: {sorted(PLOT_COLUMNS)}")
    cols = PLOT_COLUMNS[kind]
    out = Path(out_dir) / (name or f"{kind}.csv")
    os.makedirs(out.parent, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_cell(r[c]) for c in cols])
    return out


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return v
