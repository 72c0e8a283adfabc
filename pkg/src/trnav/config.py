"""Flat key=value config files and experiment configuration."""

from __future__ import annotations

import importlib.resources
import os
from dataclasses import dataclass, field


def parse_kv_text(text: str) -> dict:
    """Parse flat key=value text; '#' starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_kv(path) -> dict:
    with open(path, "r") as fh:
        return parse_kv_text(fh.read())


def write_kv(path, items: dict, header: str = ""):
    lines = []
    if header:
        lines.append(f"# {header}")
    for key, value in items.items():
        if isinstance(value, float):
            lines.append(f"{key} = {value!r}")
        else:
            lines.append(f"{key} = {value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def packaged_default(name: str) -> dict:
    """Load one of the shipped default config files from package data."""
    text = importlib.resources.files("trnav").joinpath(f"data/{name}").read_text()
    return parse_kv_text(text)


@dataclass
class ExperimentConfig:
    """Everything a teach or repeat experiment needs, with shipped defaults."""

    world_seed: int = 7
    profile: str = "indoor"
    teach_path: str = "loop"        # loop | scurve | figure8 | path to waypoint csv
    path_length: float = 70.0
    speed: float = 0.35             # commanded max linear speed (m/s)
    dt_plant: float = 1e-3
    ctrl_period: float = 0.02       # 50 Hz controller / camera
    trials: int = 5
    out_dir: str = "out"
    dist_threshold: float = 0.1     # keyframe recording distance, m
    angle_threshold_deg: float = 5.0
    divergence_dist: float = 2.0    # m, stability classifier bound
    saturation_limit: float = 2.0   # s of continuous dual saturation
    vehicle_file: str = ""          # empty -> packaged nominal
    gains_file: str = ""
    planner_file: str = ""
    profile_file: str = ""

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        n = self.ctrl_period / self.dt_plant
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("dt_plant must divide the controller period")

    @property
    def substeps(self) -> int:
        return int(round(self.ctrl_period / self.dt_plant))

    @classmethod
    def from_file(cls, path, **overrides):
        kv = load_kv(path)
        kwargs = {}
        for f in cls.__dataclass_fields__.values():
            if f.name in kv:
                raw = kv[f.name]
                if f.type in ("int",):
                    kwargs[f.name] = int(raw)
                elif f.type in ("float",):
                    kwargs[f.name] = float(raw)
                else:
                    kwargs[f.name] = raw
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)
