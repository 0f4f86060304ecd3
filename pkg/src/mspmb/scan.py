"""Timestamped sensor scans as delivered to the fusion node."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLUTTER = -1


@dataclass(frozen=True)
class ScanRecord:
    """One vehicle's measurements at one time step.

    ``v2f`` is an (m, 2) array of relative measurements, or ``None`` when the
    vehicle delivered no V2F scan at all (an empty array means it looked and
    saw nothing).  ``origins`` is only
    filled by the simulator: the feature index behind each V2F row, or
    ``CLUTTER``.  Filters never look at it.
    """

    time_step: int
    vehicle_id: int
    gnss: np.ndarray | None = None
    v2f: np.ndarray | None = field(default_factory=lambda: np.zeros((0, 2)))
    origins: tuple = ()

    def __post_init__(self):
        if self.gnss is not None:
            object.__setattr__(self, "gnss", np.asarray(self.gnss, dtype=float).reshape(2))
        if self.v2f is not None:
            object.__setattr__(self, "v2f", np.asarray(self.v2f, dtype=float).reshape(-1, 2))
        origins = tuple(int(o) for o in self.origins)
        if origins and len(origins) != self.n_v2f:
            raise ValueError("origins must label every V2F measurement")
        object.__setattr__(self, "origins", origins)

    @property
    def n_v2f(self) -> int:
        return 0 if self.v2f is None else self.v2f.shape[0]

    def to_dict(self) -> dict:
        out = {
            "time_step": int(self.time_step),
            "vehicle_id": int(self.vehicle_id),
            "gnss": None if self.gnss is None else self.gnss.tolist(),
            "v2f": None if self.v2f is None else self.v2f.tolist(),
        }
        if self.origins:
            out["origins"] = list(self.origins)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScanRecord":
        gnss = data.get("gnss")
        v2f = data.get("v2f", [])
        return cls(
            time_step=int(data["time_step"]),
            vehicle_id=int(data["vehicle_id"]),
            gnss=None if gnss is None else np.array(gnss, dtype=float),
            v2f=None if v2f is None else np.array(v2f, dtype=float).reshape(-1, 2),
            origins=tuple(data.get("origins", ())),
        )

    def __eq__(self, other):
        if not isinstance(other, ScanRecord):
            return NotImplemented
        same_gnss = (self.gnss is None and other.gnss is None) or (
            self.gnss is not None and other.gnss is not None
            and np.array_equal(self.gnss, other.gnss)
        )
        same_v2f = (self.v2f is None and other.v2f is None) or (
            self.v2f is not None and other.v2f is not None
            and np.array_equal(self.v2f, other.v2f)
        )
        return (self.time_step == other.time_step and self.vehicle_id == other.vehicle_id
                and same_gnss and same_v2f
                and self.origins == other.origins)

    __hash__ = None
