"""Run configuration: one JSON document, every key overridable from the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

PROFILE_K = {"indoor": 10, "outdoor": 6}
PROFILE_TE = {"indoor": 0.2, "outdoor": 0.5}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    ecdf_thresholds: list[float] = field(default_factory=lambda: [0.25, 0.30, 0.35, 0.40])
    profile: str = "indoor"
    graph: str = "sparse"
    k: int | None = None  # None -> profile default
    tau: float = 0.07
    kappa: float = 0.01
    ransac_iterations: int = 1024
    ipr_iterations: int = 512
    n_cap: int = 5000
    # overlap network
    overlap_width: int = 64
    lr_overlap: float = 0.01
    epochs_overlap: int = 1
    batch_overlap: int = 32
    overlap_samples: int = 10000
    # synchronisation network
    d: int = 64
    T: int = 4
    gamma: float = 0.8
    beta: float = 0.2
    lr_sync: float = 0.001
    epochs_sync: int = 15
    train_scenes: int = 2000
    train_n_min: int = 8
    train_n_max: int = 30
    head_mode: str = "residual"
    trans_scale: float = 5.0
    weight_decay: float = 0.0001
    seed: int = 0
    re_gate_deg: float = 15.0
    te_threshold: float | None = None  # None -> profile default
    out: str = "runs"
    overlap_checkpoint: str = "runs/overlap.mdgd"
    sync_checkpoint: str = "runs/sync.mdgd"
    dump_intermediates: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILE_K:
            raise ConfigError(f"profile must be one of {sorted(PROFILE_K)}")
        if self.graph not in ("full", "sparse"):
            raise ConfigError("graph must be 'full' or 'sparse'")
        if len(self.ecdf_thresholds) != 4 or any(e <= 0 for e in self.ecdf_thresholds):
            raise ConfigError("need four positive eCDF thresholds")
        for name in ("tau", "kappa", "trans_scale", "lr_overlap", "lr_sync", "re_gate_deg"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.head_mode not in ("absolute", "residual"):
            raise ConfigError("head_mode must be 'absolute' or 'residual'")

    @property
    def k_eff(self) -> int:
        return PROFILE_K[self.profile] if self.k is None else self.k

    @property
    def te_eff(self) -> float:
        return PROFILE_TE[self.profile] if self.te_threshold is None else self.te_threshold

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def updated(self, **overrides) -> "RunConfig":
        data = asdict(self)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**data)
