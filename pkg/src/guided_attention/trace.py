"""Recorded attention of a decode, with JSON and heatmap export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .decoder import Hypothesis, StepTrace
from .imaging import heatmap, write_pgm


@dataclass(slots=True)
class AttentionTrace:
    """Per-step, per-layer, per-head attention maps of one decoded image.

    ``steps[t].attention[layer]`` is ``[h×L]``; the guidance maps are ``[L]``
    or ``None`` when the guidance was inactive for that layer and step.
    """

    grid_hw: Tuple[int, int]
    steps: List[StepTrace] = field(default_factory=list)
    tokens: List[str] = field(default_factory=list)
    error: Optional[str] = None

    @classmethod
    def from_hypothesis(cls, hyp: Hypothesis, grid_hw: Tuple[int, int], tokens: Sequence[str] = ()) -> "AttentionTrace":
        return cls(grid_hw=tuple(grid_hw), steps=list(hyp.trace or []), tokens=list(tokens))

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def _grid(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).reshape(self.grid_hw)

    def attention(self, step: int, layer: int) -> np.ndarray:
        """``[h×L]`` refined attention of 1-based ``layer`` at 0-based ``step``."""

        return self.steps[step].attention[layer - 1]

    def neighbor_map(self, step: int, layer: int) -> Optional[np.ndarray]:
        return self.steps[step].neighbor_maps[layer - 1]

    def self_map(self, step: int, layer: int) -> Optional[np.ndarray]:
        return self.steps[step].self_maps[layer - 1]

    def records(self) -> List[Dict[str, Any]]:
        """One record per (step, layer, head) plus the guidance maps of each (step, layer)."""

        rows: List[Dict[str, Any]] = []
        for s in self.steps:
            for layer, maps in enumerate(s.attention, start=1):
                for head, values in enumerate(maps):
                    rows.append(
                        {"step": s.step, "layer": layer, "head": head, "map": self._grid(values).tolist()}
                    )
        return rows

    def guidance_records(self) -> List[Dict[str, Any]]:
        rows: List[Dict[str, Any]] = []
        for s in self.steps:
            for layer in range(1, len(s.attention) + 1):
                for kind, values in (("self", s.self_maps[layer - 1]), ("neighbor", s.neighbor_maps[layer - 1])):
                    if values is not None:
                        rows.append({"step": s.step, "layer": layer, "kind": kind, "map": self._grid(values).tolist()})
        return rows

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {
            "grid": list(self.grid_hw),
            "tokens": self.tokens,
            "steps": self.num_steps,
            "attention": self.records(),
            "guidance": self.guidance_records(),
        }
        if self.error is not None:
            body["error"] = self.error
        path.write_text(json.dumps(body), encoding="utf-8")
        return path

    def write_heatmaps(self, out_dir: str | Path) -> List[Path]:
        """Write one min-max scaled ``h₀×w₀`` PGM per attention and guidance map."""

        out_dir = Path(out_dir)
        written: List[Path] = []
        for row in self.records():
            name = f"step{row['step']:03d}_layer{row['layer']}_head{row['head']}.pgm"
            written.append(write_pgm(out_dir / name, heatmap(np.asarray(row["map"]))))
        for row in self.guidance_records():
            name = f"step{row['step']:03d}_layer{row['layer']}_{row['kind']}.pgm"
            written.append(write_pgm(out_dir / name, heatmap(np.asarray(row["map"]))))
        return written
