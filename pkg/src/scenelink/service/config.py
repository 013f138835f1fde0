"""Service configuration: YAML file with environment-variable overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..meshdist import DEFAULT_TAU_MM, WorkspaceSlab


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    storage_root: str = "./scenelink-data"
    privacy_filter: bool = True
    tau_mm: float = DEFAULT_TAU_MM
    slab_z_min_offset: float = -20.0
    slab_z_max_offset: float = 5.0
    slab_xy_margin: float = 100.0
    rms_warn_mm: float = 5.0
    max_workers: int = 2

    def workspace_slab(self) -> WorkspaceSlab:
        return WorkspaceSlab(self.slab_z_min_offset, self.slab_z_max_offset,
                             self.slab_xy_margin)

    @staticmethod
    def load(path: str | Path | None = None, env: dict | None = None
             ) -> "ServiceConfig":
        """File values first, then SCENELINK_* environment overrides."""
        values: dict = {}
        if path is not None:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ValueError(f"config file {path} must hold a mapping")
            values.update(loaded)
        env = os.environ if env is None else env
        casts = {f.name: f.type for f in ServiceConfig.__dataclass_fields__.values()}
        for name in list(casts):
            env_key = f"SCENELINK_{name.upper()}"
            if env_key in env:
                values[name] = env[env_key]
        known = set(ServiceConfig.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = ServiceConfig()
        for name, value in values.items():
            current = getattr(cfg, name)
            if isinstance(current, bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            else:
                value = str(value)
            setattr(cfg, name, value)
        return cfg
