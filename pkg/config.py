import os
import json
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional

from utils.errors import ConfigError

logger = logging.getLogger(__name__)


class Config:
    """Process-wide defaults, overridable through environment variables"""

    LOG_LEVEL = os.environ.get('STCORR_LOG', 'info').lower()
    DEFAULT_JOBS = int(os.environ.get('STCORR_JOBS', '1'))

    # learned matchers and the baselines default to 8x8x8, st-MATCH to 32x16x16
    DEFAULT_GRID = os.environ.get('STCORR_DEFAULT_GRID', '8x8x8')
    STMATCH_GRID = os.environ.get('STCORR_STMATCH_GRID', '32x16x16')

    DEFAULT_TEMPERATURE = float(os.environ.get('STCORR_TEMPERATURE', '0.05'))
    DEFAULT_LR = float(os.environ.get('STCORR_LR', '1.2e-4'))
    DEFAULT_ALPHA = 0.1
    DEFAULT_KS = (1, 3, 5)
    DEFAULT_MIN_SHARED = 3
    DEFAULT_CLIP_LEN = 64
    DEFAULT_OUT_SIZE = (128, 128)
    DEFAULT_CROP_PROB = 0.5
    NORMALIZE_FEATURES = os.environ.get('STCORR_NORMALIZE', '1') not in ('0', 'false', 'no')


@dataclass
class RunConfig:
    """Fields shared by every CLI subcommand; a JSON file supplies them, flags override"""
    grid: Optional[str] = None
    setup: str = "13+3"
    matcher: str = "st-match"
    temperature: float = Config.DEFAULT_TEMPERATURE
    alpha: float = Config.DEFAULT_ALPHA
    ks: List[int] = field(default_factory=lambda: list(Config.DEFAULT_KS))
    seed: int = 0
    seeds: List[int] = field(default_factory=list)
    min_shared: int = Config.DEFAULT_MIN_SHARED
    jobs: int = Config.DEFAULT_JOBS
    normalize: bool = Config.NORMALIZE_FEATURES
    layer_ids: Optional[List[int]] = None
    hyperpixel: Optional[str] = None
    interpolation: str = "trilinear"
    # ANTs
    n_layers: int = 2
    hidden_channels: int = 16
    lr: float = Config.DEFAULT_LR
    steps: int = 200
    # file paths
    data_dir: Optional[str] = None
    annotations: Optional[str] = None
    manifest: Optional[str] = None
    pairs: Optional[str] = None
    gt: Optional[str] = None
    predictions: Optional[str] = None
    params: Optional[str] = None
    out: Optional[str] = None

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def resolved_grid(self, matcher: Optional[str] = None) -> str:
        """The explicit grid, else the default of `matcher` (this config's matcher when omitted)"""
        if self.grid:
            return self.grid
        if (matcher or self.matcher) == 'st-match':
            return Config.STMATCH_GRID
        return Config.DEFAULT_GRID

    def override(self, **flags: Any) -> "RunConfig":
        """Return a copy with every non-None flag applied on top"""
        merged = asdict(self)
        merged.update({k: v for k, v in flags.items() if v is not None})
        return RunConfig(**merged)
