from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field, validator, root_validator

from core.catalog import load_catalog
from utils.helpers import read_json

LEVEL_NAMES = ("L1", "L2", "L3", "L4")


class StrictModel(BaseModel):
    class Config:
        extra = "forbid"


class ModelConfig(StrictModel):
    image_size: int = 64
    patch_size: int = 8
    visual_dim: int = 96
    visual_heads: int = 4
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    adapter_dim: int = 16
    policy_hidden: int = 128
    max_context: int = 1024
    freeze_lm: bool = False
    dtype: str = "float32"

    @validator("image_size", "patch_size", "visual_dim", "visual_heads", "d_model", "n_layers",
               "n_heads", "adapter_dim", "policy_hidden", "max_context")
    def _positive(cls, v, field):
        if v <= 0:
            raise ValueError(f"{field.name} must be positive")
        return v

    @validator("dtype")
    def _known_dtype(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return v

    @root_validator(skip_on_failure=True)
    def _divisible(cls, values):
        if values["d_model"] % values["n_heads"]:
            raise ValueError("d_model must be divisible by n_heads")
        if values["visual_dim"] % values["visual_heads"]:
            raise ValueError("visual_dim must be divisible by visual_heads")
        if values["image_size"] % values["patch_size"]:
            raise ValueError("image_size must be divisible by patch_size")
        return values

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class LossConfig(StrictModel):
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_cls: float = 1.0
    lambda_coord: float = 5.0

    @validator("focal_alpha")
    def _alpha_range(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("focal_alpha must be in (0, 1]")
        return v

    @validator("focal_gamma", "lambda_cls", "lambda_coord")
    def _non_negative(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must be >= 0")
        return v


class OptimConfig(StrictModel):
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    schedule: str = "constant"
    warmup_steps: int = 0
    total_steps: int = 0

    @validator("lr", "weight_decay", "clip_norm", "warmup_steps", "total_steps")
    def _non_negative(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must be >= 0")
        return v

    @validator("beta1", "beta2")
    def _beta_range(cls, v, field):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"{field.name} must be in [0, 1)")
        return v

    @validator("schedule")
    def _known_schedule(cls, v):
        if v not in ("constant", "warmup_cosine"):
            raise ValueError("schedule must be 'constant' or 'warmup_cosine'")
        return v


class TrainConfig(StrictModel):
    """Flat training configuration file"""

    seed: int = 0
    level: str = "L1"
    templates: Optional[List[str]] = None
    dataset_dir: Optional[str] = None
    episodes: int = 100
    out_dir: str = "runs/train"

    # model
    image_size: int = 64
    patch_size: int = 8
    visual_dim: int = 96
    visual_heads: int = 4
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    adapter_dim: int = 16
    policy_hidden: int = 128
    max_context: int = 1024
    freeze_lm: bool = False
    dtype: str = "float32"

    # loss
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_cls: float = 1.0
    lambda_coord: float = 5.0

    # optimizer
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    schedule: str = "constant"
    warmup_steps: int = 0

    # loop
    epochs: int = 1
    batch_size: int = 1
    max_steps: Optional[int] = None
    checkpoint_every: int = 0

    # ablations
    no_future_state: bool = False
    no_multi_turn: bool = False

    @validator("level")
    def _known_level(cls, v):
        short = v.split("_")[0]
        if short not in LEVEL_NAMES:
            raise ValueError(f"level must be one of {LEVEL_NAMES}")
        return short

    @validator("templates")
    def _known_templates(cls, v):
        if v is None:
            return v
        known = load_catalog().template_ids
        unknown = [t for t in v if t not in known]
        if unknown:
            raise ValueError(f"unknown templates: {unknown}")
        if not v:
            raise ValueError("templates must not be empty")
        return v

    @validator("episodes", "epochs", "batch_size")
    def _positive(cls, v, field):
        if v <= 0:
            raise ValueError(f"{field.name} must be positive")
        return v

    @validator("max_steps")
    def _positive_steps(cls, v):
        if v is not None and v <= 0:
            raise ValueError("max_steps must be positive")
        return v

    @root_validator(skip_on_failure=True)
    def _views_validate(cls, values):
        # surface range errors of the derived views at load time
        ModelConfig(**{k: values[k] for k in ModelConfig.__fields__})
        LossConfig(**{k: values[k] for k in LossConfig.__fields__})
        OptimConfig(**{k: values[k] for k in OptimConfig.__fields__ if k in values})
        return values

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.__fields__})

    def loss_config(self) -> LossConfig:
        return LossConfig(**{k: getattr(self, k) for k in LossConfig.__fields__})

    def optim_config(self, total_steps: int = 0) -> OptimConfig:
        fields = {k: getattr(self, k) for k in OptimConfig.__fields__ if k in self.__fields__}
        return OptimConfig(total_steps=total_steps, **fields)


class Variant(StrictModel):
    name: str
    no_future_state: bool = False
    no_multi_turn: bool = False


DEFAULT_VARIANTS = [
    Variant(name="full"),
    Variant(name="no_future_state", no_future_state=True),
    Variant(name="no_multi_turn", no_multi_turn=True),
]


class AblationConfig(StrictModel):
    train: TrainConfig
    variants: List[Variant] = Field(default_factory=lambda: [v.copy() for v in DEFAULT_VARIANTS])
    levels: List[str] = Field(default_factory=lambda: ["L1", "L2"])
    eval_episodes: int = 50
    eval_seed: int = 1

    @validator("levels", each_item=True)
    def _known_level(cls, v):
        short = v.split("_")[0]
        if short not in LEVEL_NAMES:
            raise ValueError(f"level must be one of {LEVEL_NAMES}")
        return short

    @validator("variants")
    def _unique_names(cls, v):
        names = [x.name for x in v]
        if not v or len(set(names)) != len(names):
            raise ValueError("variants need distinct names")
        return v

    @validator("eval_episodes")
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("eval_episodes must be positive")
        return v


def load_train_config(path: Path) -> TrainConfig:
    return TrainConfig(**read_json(path))


def load_ablation_config(path: Path) -> AblationConfig:
    """Accepts an ablation file or a plain training file (default variants)"""
    data = read_json(path)
    if "train" in data:
        return AblationConfig(**data)
    return AblationConfig(train=TrainConfig(**data))
