"""Trajectory checkpoints: a directory of per-step field snapshots plus a
JSON manifest with tau, N, grid geometry, potential keys and solver stats."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .discretization import Grid, VectorField, read_snapshot, write_snapshot
from .potentials import Integrand, Potential
from .scheme import StepStats, Trajectory

__all__ = ["save_trajectory", "load_trajectory", "MANIFEST"]

MANIFEST = "trajectory.json"


def _step_name(k: int) -> str:
    return f"step_{k:05d}.txt"


def save_trajectory(directory, tr: Trajectory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(tr.N + 1):
        write_snapshot(d / _step_name(k), tr.field(k))
    g = tr.grid
    doc = {
        "tau": tr.tau,
        "N": tr.N,
        "t0": tr.t0,
        "grid": {"extents": list(g.extents), "cells": list(g.cells), "origin": list(g.origin)},
        "potential": None if tr.potential is None else tr.potential.key,
        "integrand": None if tr.integrand is None else tr.integrand.key,
        "residuals": [float(r) for r in tr.residuals],
        "iterations": [int(i) for i in tr.iterations],
        "steps": [_step_name(k) for k in range(tr.N + 1)],
    }
    (d / MANIFEST).write_text(json.dumps(doc, indent=1) + "\n")
    return d


def load_trajectory(directory, potential: Optional[Potential] = None,
                    integrand: Optional[Integrand] = None) -> Trajectory:
    d = Path(directory)
    doc = json.loads((d / MANIFEST).read_text())
    gd = doc["grid"]
    grid = Grid(tuple(gd["extents"]), tuple(gd["cells"]), tuple(gd["origin"]))
    steps = []
    for name in doc["steps"]:
        f = read_snapshot(d / name, grid)
        if not isinstance(f, VectorField):
            raise ValueError(f"{name} is not a node snapshot")
        steps.append(f.values)
    stats = [StepStats(i, r) for i, r in zip(doc["iterations"], doc["residuals"])]
    return Trajectory(grid, np.stack(steps), float(doc["tau"]), potential, integrand,
                      stats, float(doc["t0"]))
