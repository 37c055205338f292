"""
Loss-surface slices through weight space.

The plane is affine in the raw flat vectors: Theta(a, b) = Theta0 + a*u + b*v
with u = ThetaA - Theta0 and v = ThetaB - Theta0. Grid points at the three
anchors use the stored vectors themselves, so the corner metrics are exactly
those of Theta0, ThetaA and ThetaB.
"""

import json
import logging
from pathlib import Path
from typing import Callable, Dict

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.nodes.runner import format_validation_error
from src.state import Architecture, DaMethod, SliceSpec
from src.tools.autodiff import Tape
from src.tools.da_core import adaptation_term, supervised_loss
from src.tools.domains import DomainDataset, generate
from src.tools.errors import ContractViolation
from src.tools.models import ParamSet, accuracy, features, load_params, loss_value, unflatten

logger = logging.getLogger(__name__)

_SNAP_TOL = 1e-12


def load_slice_spec(path) -> SliceSpec:
    """Parse a slice file; relative ParamSet and output paths resolve against the file's directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ContractViolation(f"Cannot read slice spec {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ContractViolation(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from e
    try:
        spec = SliceSpec.model_validate(data)
    except ValidationError as e:
        raise ContractViolation(f"{path}: invalid slice spec\n{format_validation_error(e)}") from e
    base = path.parent
    resolved = {
        name: str(base / getattr(spec, name)) if not Path(getattr(spec, name)).is_absolute() else getattr(spec, name)
        for name in ("theta0", "thetaA", "thetaB", "output")
    }
    return spec.model_copy(update=resolved)


def slice_grid(grid_min: float, grid_max: float, grid_n: int) -> np.ndarray:
    """Evenly spaced coordinates with values within rounding of 0 and 1 snapped onto them."""
    grid = np.linspace(grid_min, grid_max, grid_n)
    grid[np.abs(grid) < _SNAP_TOL] = 0.0
    grid[np.abs(grid - 1.0) < _SNAP_TOL] = 1.0
    return grid


def _metric_fns(arch: Architecture, method: DaMethod, source: DomainDataset,
                target: DomainDataset) -> Dict[str, Callable[[ParamSet], float]]:
    def adapt_loss(params: ParamSet) -> float:
        def build(tape: Tape, nodes):
            feat_src = features(tape, nodes, arch, tape.constant(source.x))
            feat_tgt = features(tape, nodes, arch, tape.constant(target.x))
            return adaptation_term(tape, nodes, arch, method, feat_src, feat_tgt, reverse=False)
        return loss_value(params, build)

    return {
        "test_acc": lambda params: accuracy(params, arch, target),
        "sup_loss": lambda params: loss_value(params, lambda tape, nodes: supervised_loss(tape, nodes, arch, source)),
        "adapt_loss": adapt_loss,
    }


def slice_weight_space(spec: SliceSpec) -> pd.DataFrame:
    """Evaluate spec.metrics on the grid_n x grid_n lattice of the plane through Theta0, ThetaA, ThetaB."""
    theta0, theta_a, theta_b = (load_params(p) for p in (spec.theta0, spec.thetaA, spec.thetaB))
    anchors = [theta0.flatten(), theta_a.flatten(), theta_b.flatten()]
    if len({v.shape[0] for v in anchors}) != 1:
        raise ContractViolation(f"ParamSets differ in parameter count: {[v.shape[0] for v in anchors]}")
    if theta_a.arch.model_dump() != theta0.arch.model_dump() or theta_b.arch.model_dump() != theta0.arch.model_dump():
        raise ContractViolation("ParamSets were saved with different architectures")
    arch = theta0.arch
    if spec.method.is_mcd and arch.num_classifiers != 2 and "adapt_loss" in spec.metrics:
        raise ContractViolation(f"adapt_loss for {spec.method.kind} needs 2 classifier heads")

    source = generate(spec.eval_source, "test")
    target = generate(spec.eval_target, "test")
    metric_fns = _metric_fns(arch, spec.method, source, target)

    flat0, flat_a, flat_b = anchors
    u, v = flat_a - flat0, flat_b - flat0
    corners = {(0.0, 0.0): theta0, (1.0, 0.0): theta_a, (0.0, 1.0): theta_b}
    grid = slice_grid(spec.grid_min, spec.grid_max, spec.grid_n)
    logger.info(f"--- Slicer: {spec.grid_n}x{spec.grid_n} grid, metrics {spec.metrics} ---")

    rows = []
    for a in grid:
        for b in grid:
            params = corners.get((float(a), float(b)))
            if params is None:
                params = unflatten(flat0 + a * u + b * v, arch)
            row = {"a": float(a), "b": float(b)}
            for name in spec.metrics:
                row[name] = metric_fns[name](params)
            rows.append(row)
    return pd.DataFrame(rows, columns=["a", "b", *spec.metrics])


def write_slice(spec: SliceSpec) -> Path:
    frame = slice_weight_space(spec)
    path = Path(spec.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Slice written to {path}")
    return path
