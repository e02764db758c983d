"""Run configuration: nested dataclasses loaded from TOML with dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from ..backbone import EncoderConfig
from ..fg_mask import IndicatorWeights
from ..scr import SCRConfig
from ..text_prompts import FusionWeights


@dataclass
class BackboneSection:
    kind: str = "clip"
    weights_path: str = ""
    seed: int | None = None  # None: use train.seed
    patch_grid_side: int = 24
    channel_width: int = 1024
    text_width: int = 768
    text_encoder_width: int | None = None
    tap_layers: list = field(default_factory=lambda: [6, 12, 18, 24])
    image_resolution: int = 336
    depth: int = 24
    context_length: int = 77


@dataclass
class PromptSection:
    context_length: int = 12
    init_std: float = 0.02


@dataclass
class TextSection:
    lambda_global: float = 1.0
    lambda_attn: float = 0.5
    lambda_eot: float = 0.5
    selector_hidden: int | None = None


@dataclass
class MaskSection:
    alpha_local: float = 0.3
    alpha_center: float = 0.3
    alpha_cls: float = 0.3
    alpha_temp: float = 0.1
    threshold: float = 0.5


@dataclass
class MVFBESection:
    sem_alpha: float = 0.6
    spa_kernel: int = 5
    heads: int = 8
    views: list = field(default_factory=lambda: ["ID", "SEM", "SPA"])
    per_group: bool = False
    kernel_backend: str = "auto"


@dataclass
class BSSection:
    alpha: float = 0.5
    candidate_fraction: str = "half"
    sort_by_mask: bool = False


@dataclass
class SCRSection:
    tau: float = 0.07
    gamma: float = 1.0
    lambda_: float = 0.15
    w_entropy: float = 1.0
    w_margin: float = 0.5
    source_group: str = "ID"


@dataclass
class ScoringSection:
    tau: float = 0.07
    sigma: float = 4.0
    weight_max: float = 0.5
    weight_global: float = 0.5


@dataclass
class TrainSection:
    optimizer: str = "adam"
    lr: float = 5e-5
    batch_size: int = 4
    epochs: int = 5
    max_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    w_image: float = 1.0
    w_pixel: float = 1.0
    log_every: int = 10


@dataclass
class DataSection:
    dataset: str = ""
    train_root: str = ""
    eval_root: str = ""
    layout: str = "mvtec"
    split: str = "test"
    preset: str = ""
    mvtec_root: str = ""
    visa_root: str = ""


# cross-dataset protocol: fine-tune on one corpus's test split, evaluate on the other
PRESETS = {
    "visa-to-mvtec": ("visa", "mvtec"),
    "mvtec-to-visa": ("mvtec", "visa"),
}

# config-file key -> dataclass field, where the key is a python keyword
_ALIASES = {"lambda": "lambda_"}


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    text: TextSection = field(default_factory=TextSection)
    mask: MaskSection = field(default_factory=MaskSection)
    mvfbe: MVFBESection = field(default_factory=MVFBESection)
    bs: BSSection = field(default_factory=BSSection)
    scr: SCRSection = field(default_factory=SCRSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    # -- typed views used by the modules ------------------------------------
    def encoder_config(self) -> EncoderConfig:
        b = self.backbone
        return EncoderConfig(
            patch_grid_side=b.patch_grid_side, channel_width=b.channel_width, text_width=b.text_width,
            tap_layers=tuple(b.tap_layers), image_resolution=b.image_resolution, depth=b.depth,
            text_encoder_width=b.text_encoder_width, context_length=b.context_length,
        )

    def fusion_weights(self) -> FusionWeights:
        return FusionWeights(self.text.lambda_global, self.text.lambda_attn, self.text.lambda_eot)

    def indicator_weights(self) -> IndicatorWeights:
        m = self.mask
        return IndicatorWeights(m.alpha_local, m.alpha_center, m.alpha_cls, m.alpha_temp)

    def scr_config(self) -> SCRConfig:
        s = self.scr
        return SCRConfig(s.tau, s.gamma, s.lambda_, s.w_entropy, s.w_margin)

    @property
    def backbone_seed(self) -> int:
        return self.train.seed if self.backbone.seed is None else self.backbone.seed

    @property
    def kernel_backend(self):
        return None if self.mvfbe.kernel_backend == "auto" else self.mvfbe.kernel_backend

    def resolve_preset(self) -> "RunConfig":
        if not self.data.preset:
            return self
        try:
            src, dst = PRESETS[self.data.preset]
        except KeyError:
            raise ValueError(f"unknown preset {self.data.preset!r}; have {sorted(PRESETS)}") from None
        cfg = self.copy()
        cfg.data.train_root = cfg.data.train_root or getattr(cfg.data, f"{src}_root")
        cfg.data.eval_root = cfg.data.eval_root or getattr(cfg.data, f"{dst}_root")
        cfg.data.dataset = cfg.data.dataset or dst
        return cfg

    # -- (de)serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {_key_name(k): v for k, v in section.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(d)
        return cfg

    def copy(self) -> "RunConfig":
        return RunConfig.from_dict(self.to_dict())

    def update(self, d: dict):
        for section, values in d.items():
            if not isinstance(values, dict):
                raise ValueError(f"config section {section!r} must be a table")
            for key, value in values.items():
                self.set(f"{section}.{key}", value)
        return self

    def set(self, dotted: str, value):
        try:
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ValueError(f"config key {dotted!r} must be section.key") from None
        if section not in {f.name for f in dataclasses.fields(self)}:
            raise ValueError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        name = _ALIASES.get(key, key)
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ValueError(f"unknown config key {dotted!r}")
        setattr(obj, name, value)

    def keys(self) -> list[str]:
        return [f"{s}.{k}" for s, sec in self.to_dict().items() for k in sec]

    @classmethod
    def synthetic(cls) -> "RunConfig":
        """Desk-scale preset for the synthetic backbone."""
        cfg = cls()
        cfg.update({
            "backbone": {"kind": "synthetic", "patch_grid_side": 8, "channel_width": 32, "text_width": 32,
                         "tap_layers": [2, 4], "image_resolution": 64, "depth": 4, "context_length": 24},
            "prompt": {"context_length": 4},
            "mvfbe": {"heads": 4},
            "scoring": {"sigma": 2.0},
            "train": {"lr": 1e-3, "batch_size": 4, "epochs": 25, "seed": 0},
            "data": {"dataset": "synthetic"},
        })
        return cfg


def _key_name(field_name: str) -> str:
    for k, v in _ALIASES.items():
        if v == field_name:
            return k
    return field_name


def load_config(path=None, overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Read a TOML config (``[section]`` tables of ``key = value``) over ``base``."""
    cfg = (base or RunConfig()).copy()
    if path is not None:
        with open(Path(path), "rb") as fh:
            data = tomllib.load(fh)
        preset = data.pop("preset", None)
        if preset == "synthetic":
            cfg = RunConfig.synthetic()
        elif preset is not None:
            raise ValueError(f"unknown base preset {preset!r}")
        cfg.update(data)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg
