"""Outcome record shared by both attacks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AttackResult:
    image: np.ndarray
    success: bool
    original_label: int
    adversarial_label: int
    iterations: int
    queries: int             # target-classifier forwards
    judge_queries: int       # forwards of the classifier steering the attack
    wall_time: float
    loss_trace: list = field(default_factory=list)
    delta_trace: list = field(default_factory=list)
    setting: str = ""
    image_id: str = ""

    @property
    def final_delta(self) -> float | None:
        return self.delta_trace[-1] if self.delta_trace else None

    def record(self) -> dict:
        """JSON-friendly summary, without the image."""
        return {
            "image_id": self.image_id,
            "setting": self.setting,
            "success": bool(self.success),
            "original_label": int(self.original_label),
            "adversarial_label": int(self.adversarial_label),
            "iterations": int(self.iterations),
            "queries": int(self.queries),
            "judge_queries": int(self.judge_queries),
            "wall_time": float(self.wall_time),
            "loss_trace": [float(v) for v in self.loss_trace],
            "delta_trace": [float(v) for v in self.delta_trace],
            "final_delta": None if self.final_delta is None else float(self.final_delta),
        }

    @classmethod
    def from_record(cls, rec: dict, image=None) -> "AttackResult":
        return cls(
            image=image, success=bool(rec["success"]),
            original_label=int(rec["original_label"]),
            adversarial_label=int(rec["adversarial_label"]),
            iterations=int(rec["iterations"]), queries=int(rec["queries"]),
            judge_queries=int(rec["judge_queries"]),
            wall_time=float(rec.get("wall_time", 0.0)),
            loss_trace=list(rec.get("loss_trace", [])),
            delta_trace=list(rec.get("delta_trace", [])),
            setting=rec.get("setting", ""), image_id=rec.get("image_id", ""),
        )
