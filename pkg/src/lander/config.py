"""Experiment configuration: typed defaults, named presets, YAML loading and
dotted-key overrides."""

import copy
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .client import LocalConfig
from .data import PartitionConfig
from .errors import InvalidValueError, ParseError, UnknownKeyError
from .generation import GenerationConfig
from .losses import LossWeights
from .lte import EmbedderSpec, PromptTemplate


@dataclass
class DatasetConfig:
    """Where the train/test images come from."""

    kind: str = "blobs"  # blobs | folder
    num_classes: int = 10
    per_class: int = 120  # training samples per class (blobs)
    test_per_class: int = 40
    image_shape: tuple = (3, 16, 16)
    data_seed: int = 7  # pins class appearance and sample noise
    path: str = None  # root directory for folder datasets
    normalize: bool = True  # map unit-interval pixels to (x - 0.5) / 0.25

    def __post_init__(self):
        if self.kind not in ("blobs", "folder"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.kind == "blobs" and (self.num_classes < 2 or self.per_class < 1):
            raise ValueError("blobs need num_classes >= 2 and per_class >= 1")
        if self.kind == "folder" and not self.path:
            raise ValueError("folder datasets need a path")


@dataclass
class LossesConfig:
    """Loss weights shared by client training and synthesis.

    ``lambda_ltc`` weighs the anchor term inside the generator objective;
    ``client_lambda_ltc`` is the (usually much smaller) weight of the bounding
    term in local training, where SGD with momentum tolerates far less
    curvature; it still has to be large enough that local training actually
    organizes features around the anchors, or later synthesis has no basins
    to aim for.  ``r`` is the bounding radius; the string ``"auto"`` resolves
    to half of the minimum pairwise squared anchor distance once the pool
    exists.
    """

    lambda_bn: float = 1.0
    lambda_oh: float = 0.5
    lambda_ltc: float = 5.0
    client_lambda_ltc: float = 0.2
    r: object = "auto"  # float >= 0, or "auto"
    kd_temperature: float = 1.0

    def __post_init__(self):
        for name in ("lambda_bn", "lambda_oh", "lambda_ltc", "client_lambda_ltc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if isinstance(self.r, str):
            if self.r != "auto":
                raise ValueError(f"r must be a number or 'auto', got {self.r!r}")
        else:
            self.r = float(self.r)
            if self.r < 0:
                raise ValueError("r must be non-negative")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")

    def resolve_radius(self, pool) -> float:
        if self.r == "auto":
            from .lte import min_pairwise_sq_distance

            return 0.5 * min_pairwise_sq_distance(pool)
        return float(self.r)

    def client_weights(self, pool) -> LossWeights:
        """Weights used by local client updates (bounding term only)."""
        return LossWeights(
            lambda_ltc=self.client_lambda_ltc,
            radius=self.resolve_radius(pool),
            kd_temperature=self.kd_temperature,
        )

    def generator_weights(self, pool) -> LossWeights:
        """Weights used by the synthesis objective."""
        return LossWeights(
            lambda_bn=self.lambda_bn,
            lambda_oh=self.lambda_oh,
            lambda_ltc=self.lambda_ltc,
            radius=self.resolve_radius(pool),
            kd_temperature=self.kd_temperature,
        )


@dataclass
class ExperimentConfig:
    """Fully resolved settings for one federated class-incremental run."""

    method: str = "lander"  # lander | finetune
    num_tasks: int = 2
    num_clients: int = 3
    rounds: int = 5  # communication rounds per task
    arch_id: str = "small_cnn"
    d_e: int = 16  # anchor / projector dimension
    alpha_cur: float = 0.2
    alpha_pre: float = 0.4
    aggregation: str = "weighted"  # weighted | uniform
    prompt_template: str = "p2"
    shuffle_task_classes: bool = False
    seed: int = 0
    parallel_clients: int = 1  # >1 runs client updates in a thread pool
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(
        default_factory=lambda: PartitionConfig(mode="dirichlet", beta=0.5)
    )
    local: LocalConfig = field(
        default_factory=lambda: LocalConfig(epochs=2, batch_size=16, lr=0.05)
    )
    losses: LossesConfig = field(default_factory=LossesConfig)
    generation: GenerationConfig = field(
        default_factory=lambda: GenerationConfig(
            rounds=4, steps=20, batch_size=64, image_shape=(3, 16, 16),
            final_bn=False,
        )
    )
    embedder: EmbedderSpec = field(
        default_factory=lambda: EmbedderSpec(kind="deterministic_test", dim=16)
    )

    def __post_init__(self):
        if self.method not in ("lander", "finetune"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.aggregation not in ("weighted", "uniform"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        for name in ("num_tasks", "num_clients", "rounds", "parallel_clients"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_e < 1:
            raise ValueError("d_e must be >= 1")
        PromptTemplate.parse(self.prompt_template)  # raises on junk
        if self.embedder.dim != self.d_e:
            raise ValueError(
                f"embedder dim {self.embedder.dim} must match d_e {self.d_e}"
            )


# Named presets.  "desk" is the default scale meant for CPU-minute runs;
# "cifar" carries the published full-scale values (ResNet18 backbone, CLIP
# text encoder, 256-image synthesis batches, 40x40 generation schedule).
_PRESETS = {
    "desk": {},
    "cifar": {
        "num_tasks": 5,
        "num_clients": 5,
        "rounds": 100,
        "arch_id": "resnet18_like",
        "d_e": 512,
        "alpha_cur": 0.2,
        "alpha_pre": 0.4,
        "dataset": {
            "kind": "folder",
            "num_classes": 100,
            "image_shape": [3, 32, 32],
            "path": "data/cifar100",
        },
        "local": {
            "epochs": 2,
            "batch_size": 128,
            "lr": 0.04,
            "synthetic_batch_size": 256,
        },
        "losses": {
            "lambda_bn": 1.0,
            "lambda_oh": 0.5,
            "lambda_ltc": 5.0,
            "client_lambda_ltc": 5.0,
            "r": 0.015,
        },
        "generation": {
            "rounds": 40,
            "steps": 40,
            "batch_size": 256,
            "image_shape": [3, 32, 32],
            "final_bn": True,
        },
        "embedder": {
            "kind": "external_text_encoder",
            "dim": 512,
            "identifier": "clip-ViT-B-32",
        },
    },
}

# One-key variants of the main study: each fragment flips exactly the switch
# that defines the variant and nothing else.
ABLATION_FRAGMENTS = {
    "none": {},
    "finetune": {"method": "finetune"},
    "woLTG": {"losses": {"lambda_ltc": 0.0}},
    "woNL": {"generation": {"noisy_input": False}},
    "r0": {"losses": {"r": 0.0}},
    "lds": {"generation": {"lds_mode": "lds"}},
    "tds": {"generation": {"lds_mode": "tds"}},
    "rds": {"generation": {"lds_mode": "rds"}},
    "nods": {"generation": {"lds_mode": "none"}},
}

_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "local": LocalConfig,
    "losses": LossesConfig,
    "generation": GenerationConfig,
    "embedder": EmbedderSpec,
}

_TUPLE_FIELDS = {"image_shape", "dataset_stats"}


def _field_names(cls) -> set:
    return {f.name for f in fields(cls)}


def _merge(base: dict, updates: dict, prefix: str = ""):
    """Merge ``updates`` into ``base`` in place, validating every key."""
    for key, value in updates.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise UnknownKeyError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidValueError(f"{path!r} expects a mapping of settings")
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value


def _defaults_dict() -> dict:
    return config_to_dict(ExperimentConfig())


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested plain-python dict, YAML-safe (tuples become lists)."""

    def convert(obj):
        if is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        if isinstance(obj, (list, dict, str, int, float, bool)) or obj is None:
            return obj
        return str(obj)

    return convert(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a plain nested dict."""
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            section_cls = _SECTION_TYPES[key]
            section_kwargs = {}
            for sub_key, sub_val in value.items():
                if sub_key in _TUPLE_FIELDS and isinstance(sub_val, list):
                    sub_val = tuple(sub_val)
                section_kwargs[sub_key] = sub_val
            try:
                kwargs[key] = section_cls(**section_kwargs)
            except (ValueError, TypeError) as exc:
                raise InvalidValueError(f"{key}: {exc}") from exc
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise InvalidValueError(str(exc)) from exc


def parse_override(text: str):
    """Split ``a.b.c=value`` into a key path and a YAML-parsed value."""
    if "=" not in text:
        raise ParseError(f"override {text!r} must look like key=value")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ParseError(f"override {text!r} is missing the key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ParseError(f"override value {raw!r} does not parse: {exc}") from exc
    return key.split("."), value


def _set_path(base: dict, keys, value, full: str):
    node = base
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise UnknownKeyError(f"unknown config key {full!r}")
        if i == len(keys) - 1:
            if isinstance(node[key], dict):
                raise InvalidValueError(f"{full!r} names a section, not a setting")
            node[key] = value
        else:
            node = node[key]


def load_config(path=None, overrides=(), preset=None) -> ExperimentConfig:
    """Resolve preset defaults, a YAML file, ablation fragments and overrides.

    Precedence (later wins): preset defaults < file contents < ablation
    fragment < ``--set`` overrides.  The file may itself pick ``preset:`` and
    ``ablation:``; unknown keys raise, invalid values raise with the key named.
    """
    file_data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read config file {path}: {exc}") from exc
        try:
            file_data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ParseError(f"config file {path} does not parse: {exc}") from exc
        if file_data is None:
            file_data = {}
        if not isinstance(file_data, dict):
            raise ParseError(f"config file {path} must hold a mapping at top level")

    preset_name = file_data.pop("preset", None) if preset is None else preset
    if preset is None and preset_name is None:
        preset_name = "desk"
    if preset is not None:
        file_data.pop("preset", None)
        preset_name = preset
    if preset_name not in _PRESETS:
        raise UnknownKeyError(
            f"unknown preset {preset_name!r}; choose from {sorted(_PRESETS)}"
        )

    ablation = file_data.pop("ablation", "none")
    if ablation not in ABLATION_FRAGMENTS:
        raise UnknownKeyError(
            f"unknown ablation {ablation!r}; choose from {sorted(ABLATION_FRAGMENTS)}"
        )

    base = _defaults_dict()
    _merge(base, copy.deepcopy(_PRESETS[preset_name]))
    _merge(base, file_data)
    _merge(base, copy.deepcopy(ABLATION_FRAGMENTS[ablation]))
    for item in overrides:
        keys, value = parse_override(item)
        _set_path(base, keys, value, ".".join(keys))
    return config_from_dict(base)


def save_config(cfg: ExperimentConfig, path):
    """Write the fully resolved config as YAML (round-trips via load_config)."""
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
