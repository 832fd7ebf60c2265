"""Planned wave-missing designs (SWMD-6 and user-defined variants)."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datagen import Dataset
from .errors import DesignError
from .model import ModelShape


@dataclass(frozen=True)
class MissingDesign:
    """Group-by-wave observation grid; ``True`` means the wave is observed."""

    pattern: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        pat = np.array(self.pattern, dtype=bool)
        if pat.ndim != 2:
            raise DesignError("pattern must be a (groups, waves) grid")
        if not pat.any(axis=1).all():
            raise DesignError("every group must observe at least one wave")
        pat.setflags(write=False)
        object.__setattr__(self, "pattern", pat)

    @property
    def n_groups(self) -> int:
        return self.pattern.shape[0]

    @property
    def n_waves(self) -> int:
        return self.pattern.shape[1]


def swmd6() -> MissingDesign:
    """Simple wave-missing design: group 1 complete, group g>1 skips wave 7-g."""
    pat = np.ones((6, 5), dtype=bool)
    for g in range(1, 6):
        pat[g, 5 - g] = False
    return MissingDesign(pat, "SWMD-6")


def complete_design(n_groups: int = 6, n_waves: int = 5) -> MissingDesign:
    return MissingDesign(np.ones((n_groups, n_waves), dtype=bool), "complete")


def apply_design(data: Dataset, design: MissingDesign, shape: ModelShape | None = None) -> Dataset:
    """Mask every indicator of both constructs at each wave a group skips.

    Values are left untouched; only the mask changes.
    """
    shape = shape or ModelShape()
    if design.n_waves != shape.waves:
        raise DesignError(f"design has {design.n_waves} waves, model has {shape.waves}")
    if data.values.shape[1] != shape.n_observed:
        raise DesignError("dataset width does not match the model shape")
    g = data.group
    if g.size and (g.min() < 1 or g.max() > design.n_groups):
        raise DesignError(f"group labels must lie in 1..{design.n_groups}")
    wave_of_col = np.empty(shape.n_observed, dtype=int)
    for w in range(shape.waves):
        wave_of_col[shape.wave_columns(w)] = w
    keep = design.pattern[g - 1][:, wave_of_col]
    return replace(data, values=data.values.copy(), mask=data.mask & keep)
