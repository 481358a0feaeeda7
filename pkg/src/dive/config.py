"""Run configuration: dataclasses, the flat key=value config file, hashing.

The config file is INI-style: flat sections of ``key = value`` lines, one
section per concern ([run], [model], [data], [train], [distill], [sample],
[bench]). Every CLI flag has a config equivalent; CLI values override file
values, which override the built-in defaults. The effective configuration
is hashed (sha256 of the canonical key=value listing) and that hash is
recorded in every metrics row.
"""

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields

from .backbone import BackboneConfig
from .rng import default_seed


def parse_resolution(text: str):
    """'16x28' (or '16×28') -> (16, 28)."""
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"bad resolution {text!r}, expected HxW")
    return int(parts[0]), int(parts[1])


def parse_buckets(text: str):
    return tuple(parse_resolution(p) for p in text.split(",") if p.strip())


def parse_stage_list(text: str):
    """'8x14:10,12x21:10,16x28:10' -> [(8, 14, 10), ...]."""
    stages = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        res, _, steps = part.partition(":")
        h, w = parse_resolution(res)
        stages.append((h, w, int(steps)))
    return stages


@dataclass
class ModelConfig:
    n_views: int = 3
    t_frames: int = 4
    c_latent: int = 4
    d_model: int = 32
    n_heads: int = 4
    n_blocks: int = 4
    sketch_cells: int = 2
    patch: int = 2
    mlp_ratio: int = 4
    t_max: int = 8
    n_text_tokens: int = 8
    n_labels: int = 6
    n_captions: int = 8
    fourier_bands: int = 4
    buckets: tuple = ((8, 14), (12, 21), (16, 28))

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            n_blocks=self.n_blocks,
            d_model=self.d_model,
            n_heads=self.n_heads,
            sketch_cells=self.sketch_cells,
            patch=self.patch,
            c_latent=self.c_latent,
            mlp_ratio=self.mlp_ratio,
            t_max=self.t_max,
            fourier_bands=self.fourier_bands,
        )

    @property
    def target_resolution(self):
        return self.buckets[-1]


@dataclass
class DataConfig:
    n_scenes: int = 96
    n_eval_scenes: int = 32
    path: str = "dataset.divk"


@dataclass
class TrainConfig:
    phase1_iters: int = 2000
    phase2_iters: int = 3000
    phase3_iters: int = 8000
    batch_low: int = 4
    batch_mid: int = 2
    batch_high: int = 1
    lr: float = 1e-4
    weight_decay: float = 0.0
    cond_dropout: float = 0.15
    checkpoint: str = "model.divm"


@dataclass
class DistillConfig:
    steps: int = 800
    lr: float = 1e-4
    strategy: str = "mixed"
    omega_min: float = 1.0
    omega_max: float = 8.0
    checkpoint: str = "model_mad.divm"


@dataclass
class SampleConfig:
    steps: int = 30
    guidance: str = "extended"
    scale: float = 2.0
    rps: str = ""
    extend: int = 0
    resolution: str = "16x28"
    night_auto: bool = True
    scenes: int = 4
    out_dir: str = "samples"


@dataclass
class BenchConfig:
    steps: int = 30
    scale: float = 2.0
    scenes: int = 4
    repeats: int = 1
    rps: str = "8x14:10,12x21:10,16x28:10"
    out: str = "metrics.csv"


@dataclass
class DiveConfig:
    seed: int = field(default_factory=default_seed)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_SECTIONS = ("model", "data", "train", "distill", "sample", "bench")


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return parse_buckets(raw)
    return raw


def _apply(section_obj, key: str, raw: str):
    current = getattr(section_obj, key)
    setattr(section_obj, key, _coerce(current, raw))


def load_config(path=None) -> DiveConfig:
    """Defaults, overridden by an INI file when given."""
    cfg = DiveConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key != "seed":
                    raise KeyError(f"unknown [run] key {key!r}")
                cfg.seed = int(raw)
            continue
        if section not in _SECTIONS:
            raise KeyError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        known = {f.name for f in fields(obj)}
        for key, raw in parser.items(section):
            if key not in known:
                raise KeyError(f"unknown key {key!r} in section [{section}]")
            _apply(obj, key, raw)
    return cfg


def config_lines(cfg: DiveConfig):
    """Canonical sorted key=value listing of the effective configuration."""
    lines = [f"run.seed={cfg.seed}"]
    for section in _SECTIONS:
        for key, val in sorted(asdict(getattr(cfg, section)).items()):
            if isinstance(val, tuple):
                val = ",".join(f"{h}x{w}" for h, w in val)
            lines.append(f"{section}.{key}={val}")
    return lines


def config_hash(cfg: DiveConfig) -> str:
    text = "\n".join(config_lines(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
