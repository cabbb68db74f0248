import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.boxes import AnchorConfig
from src.errors import ConfigError
from src.layers import DeconvSpec
from src.losses import LossWeights


###############################################
# Process settings                            #
# Load environment variables from .env file   #
###############################################
load_dotenv()

DEFAULT_LOG_DIR = "log"
MAX_DEFAULT_THREADS = 8


def worker_count() -> int:
    """Worker cap from AFFKIT_THREADS; unset or 0 means min(8, cpu count)."""
    raw = os.getenv("AFFKIT_THREADS", "").strip()
    if not raw:
        value = 0
    else:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"AFFKIT_THREADS must be an integer, got {raw!r}")
        if value < 0:
            raise ConfigError(f"AFFKIT_THREADS must be >= 0, got {value}")
    if value == 0:
        value = min(MAX_DEFAULT_THREADS, os.cpu_count() or 1)
    return value


def log_dir_name() -> str:
    return os.getenv("AFFKIT_LOG_DIR", "").strip() or DEFAULT_LOG_DIR


#######################################################
#  Model, scene and evaluation configuration          #
#######################################################

# preset name -> ((stride, kernel, padding) per deconv stage, conv+ReLU layers per stage)
MASK_PRESETS: Dict[str, Tuple[Tuple[Tuple[int, int, int], ...], int]] = {
    "14": (((2, 4, 1),), 1),
    "28": (((4, 6, 1),), 1),
    "56": (((4, 6, 1), (2, 4, 1)), 1),
    "112": (((4, 6, 1), (2, 4, 1), (2, 4, 1)), 1),
    "244": (((4, 8, 1), (4, 8, 1), (2, 4, 1)), 1),
    "14_6conv": (((2, 4, 1),), 6),
}

# backbone conv indices followed by a 2x2 max-pool
BACKBONE_POOL_AFTER = (1, 3)

OBJECT_CLASS_NAMES = ["tool", "cup"]
AFFORDANCE_NAMES = ["grasp", "pound", "w-grasp", "contain"]


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RpnSettings(_Settings):
    conv_width: int = Field(default=32, ge=1)
    pos_iou: float = Field(default=0.7, ge=0, le=1)
    neg_iou: float = Field(default=0.3, ge=0, le=1)
    batch_size: int = Field(default=256, ge=1)
    pos_fraction: float = Field(default=0.5, gt=0, le=1)
    pre_nms_top_n: int = Field(default=6000, ge=1)
    nms_iou: float = Field(default=0.7, ge=0, le=1)
    min_size: float = Field(default=1.0, ge=0)


class HeadSettings(_Settings):
    k_train: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=128, ge=1)
    pos_ratio: float = Field(default=0.25, gt=0, le=1)
    iou_threshold: float = Field(default=0.5, ge=0, le=1)
    append_gt_boxes: bool = True
    max_mask_rois: Optional[int] = Field(default=None, ge=1)


class TrainSettings(_Settings):
    iterations: int = Field(default=500, ge=0)
    lr: float = Field(default=0.001, ge=0)
    lr_decay_at: Optional[int] = Field(default=None, ge=0)
    lr_decay_factor: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0005, ge=0)
    loss_weights: LossWeights = Field(default_factory=LossWeights)

    @property
    def decay_boundary(self) -> int:
        """lr_decay_at, or the last quarter of the run when unset."""
        if self.lr_decay_at is not None:
            return self.lr_decay_at
        return (3 * self.iterations) // 4

    def lr_at(self, iteration: int) -> float:
        """Constant lr, divided by 10 from the decay boundary onwards."""
        if iteration >= self.decay_boundary:
            return self.lr * self.lr_decay_factor
        return self.lr


class InferSettings(_Settings):
    k_infer: int = Field(default=1000, ge=1)
    score_gate: float = Field(default=0.9, gt=0, lt=1)
    nms_iou: float = Field(default=0.3, ge=0, le=1)


class ModelConfig(_Settings):
    """
    Network architecture plus training and inference hyperparameters.

    mask_head, when given, overrides mask_preset; otherwise the preset's
    deconvolution chain is used. The chain is checked stage by stage at
    construction.
    """

    num_object_classes: int = Field(default=2, ge=1)
    num_affordance_classes: int = Field(default=4, ge=1)
    backbone_widths: List[int] = Field(default=[32, 32, 32, 32], min_length=4, max_length=4)
    roialign_output: Tuple[int, int] = (7, 7)
    mask_preset: Optional[str] = "244"
    mask_head: Optional[List[DeconvSpec]] = None
    mask_convs_per_stage: Optional[int] = Field(default=None, ge=0)
    mask_width: int = Field(default=16, ge=1)
    fc_width: int = Field(default=256, ge=1)
    resize_images: bool = False
    anchors: AnchorConfig = Field(default_factory=AnchorConfig)
    rpn: RpnSettings = Field(default_factory=RpnSettings)
    head: HeadSettings = Field(default_factory=HeadSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    infer: InferSettings = Field(default_factory=InferSettings)

    @field_validator("mask_preset", mode="before")
    @classmethod
    def _preset_name(cls, value):
        if value is None:
            return None
        name = str(value)
        if name not in MASK_PRESETS:
            raise ValueError(f"unknown mask preset {name!r}; choose from {sorted(MASK_PRESETS)}")
        return name

    @field_validator("roialign_output")
    @classmethod
    def _positive_pool(cls, value):
        if value[0] < 1 or value[1] < 1:
            raise ValueError(f"roialign_output must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _resolve_mask_head(self):
        if self.mask_head is None:
            if self.mask_preset is None:
                raise ValueError("either mask_head or mask_preset must be set")
            stages, convs = MASK_PRESETS[self.mask_preset]
            self.mask_head = [DeconvSpec(stride=s, kernel_size=k, padding=d) for s, k, d in stages]
            if self.mask_convs_per_stage is None:
                self.mask_convs_per_stage = convs
        if not self.mask_head:
            raise ValueError("mask_head needs at least one deconvolution stage")
        if self.mask_convs_per_stage is None:
            self.mask_convs_per_stage = 1
        if self.roialign_output[0] != self.roialign_output[1]:
            raise ValueError("the mask head needs a square roialign_output")
        if self.anchors.stride != self.feature_stride:
            raise ValueError(
                f"anchors.stride {self.anchors.stride:g} does not match the backbone stride {self.feature_stride}"
            )
        self.mask_sizes()
        return self

    def mask_sizes(self) -> List[int]:
        """Spatial size after each mask-head stage, starting from the pooled size."""
        sizes = [self.roialign_output[0]]
        for spec in self.mask_head:
            sizes.append(spec.output_size(sizes[-1]))
        return sizes

    @property
    def mask_size(self) -> int:
        return self.mask_sizes()[-1]

    @property
    def feature_stride(self) -> int:
        """Backbone downsampling: 2 per 2x2 max-pool in BACKBONE_POOL_AFTER."""
        return 2 ** sum(1 for i in BACKBONE_POOL_AFTER if i < len(self.backbone_widths))

    @property
    def mask_label(self) -> str:
        return f"mask{self.mask_size}" if self.mask_convs_per_stage <= 1 else f"mask{self.mask_size}_{self.mask_convs_per_stage}conv"


class SceneSpec(_Settings):
    image_size: Tuple[int, int] = (96, 96)
    objects_per_scene: Tuple[int, int] = (1, 2)
    templates: List[str] = Field(default_factory=lambda: list(OBJECT_CLASS_NAMES), min_length=1)
    seed: int = 0
    max_retries: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self):
        low, high = self.objects_per_scene
        if low < 1 or high < low:
            raise ValueError(f"objects_per_scene must be 1 <= low <= high, got {self.objects_per_scene}")
        if self.image_size[0] < 16 or self.image_size[1] < 16:
            raise ValueError(f"image_size must be at least 16x16, got {self.image_size}")
        unknown = [t for t in self.templates if t not in OBJECT_CLASS_NAMES]
        if unknown:
            raise ValueError(f"unknown templates {unknown}; choose from {OBJECT_CLASS_NAMES}")
        return self


class EvalConfig(_Settings):
    beta_squared: float = Field(default=0.3, gt=0)
    class_names: List[str] = Field(default_factory=lambda: list(AFFORDANCE_NAMES))
    iou_threshold: float = Field(default=0.5, ge=0, le=1)
    priority: List[str] = Field(default_factory=list)


class PathSettings(_Settings):
    data: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Settings):
    model: ModelConfig = Field(default_factory=ModelConfig)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathSettings = Field(default_factory=PathSettings)
    seed: int = 0


#######################################################
#  Flat `key = value` config files                    #
#######################################################

def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse `key = value` lines into a nested dict. Dotted keys nest; `#`
    starts a comment line; values are JSON literals when they parse and
    bare strings otherwise.
    """
    tree: Dict[str, Any] = {}
    seen = set()
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"{source}:{number}: malformed key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        seen.add(key)

        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{source}:{number}: key {key!r} conflicts with a value set earlier")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"{source}:{number}: key {key!r} conflicts with nested keys set earlier")
        node[parts[-1]] = _parse_value(value)
    return tree


def _validation_message(error: ValidationError) -> str:
    details = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"])
        details.append(f"{location}: {item['msg']}" if location else item["msg"])
    return "; ".join(details)


def build_run_config(values: Dict[str, Any], source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_validation_message(e)}")


def load_run_config(path: Optional[Path]) -> RunConfig:
    """Read and fully validate a config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return build_run_config(parse_config_text(text, str(path)), str(path))


def _flatten(prefix: str, value: Any, lines: List[str]) -> None:
    if isinstance(value, dict):
        for key, child in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, child, lines)
    else:
        lines.append(f"{prefix} = {json.dumps(value)}")


def dump_run_config(config: RunConfig) -> str:
    """Inverse of parse_config_text for a validated config."""
    lines: List[str] = []
    _flatten("", config.model_dump(mode="json"), lines)
    return "\n".join(lines) + "\n"


def model_config_with_preset(config: ModelConfig, preset: str) -> ModelConfig:
    """Copy of config with its mask head rebuilt from a preset."""
    values = config.model_dump(mode="json")
    values.update({"mask_preset": preset, "mask_head": None, "mask_convs_per_stage": None})
    try:
        return ModelConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(_validation_message(e))
