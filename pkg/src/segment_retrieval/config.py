"""Pipeline configuration: one JSON or TOML file with a section per stage."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .captioning import VlmClientConfig
from .core import SamplingConfig
from .encoder import TrainConfig
from .errors import InvalidInputError
from .segmentation import SegmentationConfig
from .trend_filter import SolverOptions

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["EvalConfig", "PipelineConfig", "load_config", "config_to_dict"]


@dataclass(frozen=True)
class EvalConfig:
    N_q: int = 100
    pool_sizes: tuple = (100, 1000, 10000)
    methods: tuple = ("lastr", "random")
    ks: tuple = (1, 5, 10)
    judgments_dir: str | None = None
    sentence_embeddings: str | None = None
    histogram_bins: int = 8
    figures: bool = True

    def __post_init__(self):
        if self.N_q < 1:
            raise InvalidInputError("N_q must be >= 1")
        if not self.pool_sizes or min(self.pool_sizes) < 1:
            raise InvalidInputError("pool_sizes must be positive")
        bad = set(self.methods) - {"lastr", "random"}
        if bad:
            raise InvalidInputError(f"unknown retrieval methods {sorted(bad)}")
        if not self.ks or min(self.ks) < 1:
            raise InvalidInputError("ks must be positive")

    @property
    def K(self):
        return max(self.ks)


@dataclass(frozen=True)
class PipelineConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    # cap on training pairs (seeded subsample); None keeps all
    train_pairs: int | None = None
    captioner: str = "synthetic"
    vlm: VlmClientConfig = field(default_factory=VlmClientConfig)
    plot_svg: bool = False
    eval: EvalConfig = field(default_factory=EvalConfig)
    splits: dict | None = None

    def __post_init__(self):
        if self.captioner not in ("synthetic", "vlm"):
            raise InvalidInputError(f"unknown captioner {self.captioner!r}")

    @property
    def data_path(self):
        return Path(self.data_dir)

    @property
    def out_path(self):
        return Path(self.out_dir)

    def with_seed(self, seed):
        """Copy with ``seed`` applied to every seeded stage."""
        return dataclasses.replace(
            self, seed=seed,
            sampling=dataclasses.replace(self.sampling, rng_seed=seed),
            training=dataclasses.replace(self.training, rng_seed=seed),
        )


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidInputError(f"section [{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidInputError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"bad [{where}] section: {exc}") from None


def config_from_dict(data, base_dir=None):
    data = dict(data)
    seg = dict(data.pop("segmentation", None) or {})
    solver = _build(SolverOptions, seg.pop("solver", None) or {"method": "ipm"},
                    "segmentation.solver")
    kw = {
        "sampling": _build(SamplingConfig, data.pop("sampling", None), "sampling"),
        "segmentation": _build(SegmentationConfig, {**seg, "solver": solver}, "segmentation"),
        "training": _build(TrainConfig, data.pop("training", None), "training"),
        "vlm": _build(VlmClientConfig, data.pop("vlm", None), "vlm"),
        "eval": _build(EvalConfig, data.pop("eval", None), "eval"),
    }
    top = {f.name for f in dataclasses.fields(PipelineConfig)} - set(kw)
    unknown = set(data) - top
    if unknown:
        raise InvalidInputError(f"unknown top-level config keys: {sorted(unknown)}")
    kw.update(data)
    if base_dir is not None:
        for key in ("data_dir", "out_dir"):
            if key in kw and not Path(kw[key]).is_absolute():
                kw[key] = str(Path(base_dir) / kw[key])
    cfg = PipelineConfig(**kw)
    if "seed" in data:
        cfg = cfg.with_seed(int(data["seed"]))
    return cfg


def load_config(path):
    """Read a ``.json`` or ``.toml`` config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise InvalidInputError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)


def config_to_dict(cfg):
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=str))
