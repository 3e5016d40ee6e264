"""Neural architectures: classifier with penultimate-feature tap and linear
projector, the synthesis generator, the noisy input layer and learnable data
stats."""

import copy
import json
import math
import struct
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import spectral_norm

from .errors import BadShapeError, ShrinkingHeadError, UnknownArchError
from .seeding import derive_seed

GEN_LATENT_DIM = 256

_CKPT_MAGIC = b"LANDCKPT"


class _SmallCnnBackbone(nn.Module):
    """Three conv blocks with batch norm, a signed 1x1 feature head, global
    average pooled to 64 features.

    Batch-norm momentum is raised so running statistics track the data within
    a couple of short epochs (desk-scale runs take far fewer steps than the
    torch default momentum anticipates). The feature head deliberately ends
    in batch norm with no rectifier: zero-centered penultimate features keep
    class means spread across orthants instead of sharing one positive
    direction, which limits logit crosstalk when the head later grows.
    """

    feat_dim = 64

    def __init__(self, in_channels=3):
        super().__init__()
        widths = (16, 32, 64)
        layers = []
        prev = in_channels
        for wd in widths:
            layers += [
                nn.Conv2d(prev, wd, 3, padding=1, bias=False),
                nn.BatchNorm2d(wd, momentum=0.3),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = wd
        layers += [
            nn.Conv2d(prev, self.feat_dim, 1, bias=False),
            nn.BatchNorm2d(self.feat_dim, momentum=0.3),
        ]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class _ResNet18Backbone(nn.Module):
    """ResNet-18 laid out for small inputs (3x3 stem, no initial pooling)."""

    feat_dim = 512

    def __init__(self, in_channels=3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = 64
        for out_ch, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            stages += [_BasicBlock(in_ch, out_ch, stride), _BasicBlock(out_ch, out_ch)]
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)


_BACKBONES = {"small_cnn": _SmallCnnBackbone, "resnet18_like": _ResNet18Backbone}


class ClassifierModel(nn.Module):
    """Backbone + growing classifier head + linear projector onto anchor space.

    forward(x) returns (logits, penultimate feature).
    """

    def __init__(self, arch_id: str, num_classes: int, d_e: int, in_channels: int = 3):
        super().__init__()
        if arch_id not in _BACKBONES:
            raise UnknownArchError(f"unknown architecture {arch_id!r}")
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.d_e = d_e
        self.in_channels = in_channels
        self.backbone = _BACKBONES[arch_id](in_channels)
        self.feat_dim = self.backbone.feat_dim
        self.head = nn.Linear(self.feat_dim, num_classes)
        self.projector = nn.Linear(self.feat_dim, d_e)
        self.init_seed = None  # stamped by build_classifier

    def forward(self, x):
        feat = self.backbone(x)
        return self.head(feat), feat

    def project(self, feat):
        """Alignment map W from feature space onto the anchor embedding space."""
        return self.projector(feat)

    def bn_modules(self):
        """Batch-norm layers in deterministic module order."""
        return [m for m in self.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def running_bn_stats(self):
        return [(m.running_mean.clone(), m.running_var.clone()) for m in self.bn_modules()]


def build_classifier(
    arch_id: str, num_classes: int, d_e: int, seed: int = 0, in_channels: int = 3
) -> ClassifierModel:
    """Deterministically initialized classifier; same seed, same parameters."""
    torch.manual_seed(seed)
    model = ClassifierModel(arch_id, num_classes, d_e, in_channels)
    model.init_seed = seed
    return model


def extend_head(model: ClassifierModel, new_num_classes: int, seed=None) -> ClassifierModel:
    """Widen the classifier head, preserving logits for existing classes.

    Old head rows are copied verbatim; new rows take a fresh seeded init.
    """
    if new_num_classes <= model.num_classes:
        raise ShrinkingHeadError(
            f"cannot shrink head from {model.num_classes} to {new_num_classes}"
        )
    if seed is None:
        seed = derive_seed(model.init_seed or 0, "extend-head", new_num_classes)
    grown = copy.deepcopy(model)
    grown.num_classes = new_num_classes
    old_head = model.head
    new_head = nn.Linear(model.feat_dim, new_num_classes)
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(model.feat_dim)
    with torch.no_grad():
        new_head.weight.uniform_(-bound, bound, generator=gen)
        new_head.bias.uniform_(-bound, bound, generator=gen)
        new_head.weight[: model.num_classes] = old_head.weight
        new_head.bias[: model.num_classes] = old_head.bias
    grown.head = new_head
    return grown


class ModelSnapshot:
    """Immutable published model state: parameters, head, projector, BN stats."""

    def __init__(self, model: ClassifierModel):
        clone = copy.deepcopy(model)
        clone.eval()
        for p in clone.parameters():
            p.requires_grad_(False)
        self._model = clone

    @property
    def model(self) -> ClassifierModel:
        return self._model

    @property
    def head_width(self) -> int:
        return self._model.num_classes

    def forward(self, x):
        with torch.no_grad():
            return self._model(x)

    def state_dict(self):
        return self._model.state_dict()

    def state_bytes(self) -> bytes:
        """Canonical byte string for bitwise frozen-teacher checks."""
        chunks = []
        for name, tensor in sorted(self._model.state_dict().items()):
            chunks.append(name.encode())
            chunks.append(tensor.detach().cpu().numpy().tobytes())
        return b"".join(chunks)


class GeneratorModel(nn.Module):
    """Latent 256 -> image synthesis network.

    Linear+reshape to h/4 (or h/16 for the deep variant), spectral-normalized
    3x3 conv blocks with 2x upsampling, final conv + sigmoid and, by default,
    a trailing batch norm.
    """

    def __init__(self, image_shape, scale: str = "standard", final_bn: bool = True):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.scale = scale
        self.final_bn = final_bn
        if scale == "standard":
            down = 4
            mid_plan = [(128, 128), (128, 64)]
        elif scale == "deep":
            down = 16
            mid_plan = [(128, 128), (128, 128), (128, 64), (64, 64)]
        else:
            raise ValueError(f"unknown generator scale {scale!r}")
        if h % down or w % down:
            raise BadShapeError(f"image {h}x{w} must be divisible by {down}")
        self.h0, self.w0 = h // down, w // down

        self.stem = nn.Sequential(
            nn.Linear(GEN_LATENT_DIM, 128 * self.h0 * self.w0),
            nn.BatchNorm1d(128 * self.h0 * self.w0),
        )
        blocks = []
        for in_ch, out_ch in mid_plan:
            blocks += [
                spectral_norm(nn.Conv2d(in_ch, out_ch, 3, padding=1)),
                nn.BatchNorm2d(out_ch),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Upsample(scale_factor=2, mode="nearest"),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.to_image = spectral_norm(nn.Conv2d(mid_plan[-1][1], c, 3, padding=1))
        self.out_bn = nn.BatchNorm2d(c) if final_bn else nn.Identity()

    def forward(self, z, pre_bn: bool = False):
        x = self.stem(z).view(-1, 128, self.h0, self.w0)
        x = torch.sigmoid(self.to_image(self.blocks(x)))
        return x if pre_bn else self.out_bn(x)


def build_generator(
    image_shape, scale: str = "standard", seed: int = 0, final_bn: bool = True
) -> GeneratorModel:
    torch.manual_seed(seed)
    return GeneratorModel(image_shape, scale=scale, final_bn=final_bn)


class NoisyLayer(nn.Module):
    """Batch norm over the anchor embedding followed by a linear lift to the
    generator latent; reinitialized fresh every generation round."""

    def __init__(self, d_e: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(d_e)
        self.lift = nn.Linear(d_e, GEN_LATENT_DIM)

    def forward(self, e):
        return self.lift(self.bn(e))


def build_noisy_layer(d_e: int, seed: int = 0) -> NoisyLayer:
    torch.manual_seed(seed)
    return NoisyLayer(d_e)


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class LearnableDataStats(nn.Module):
    """Per-channel mean and positive scale normalizing generator output.

    sigma is parameterized through softplus so it stays positive under any
    number of gradient steps. Set trainable=False for the fixed-stat modes.
    """

    def __init__(self, channels: int, mu_init=0.5, sigma_init=0.25, trainable: bool = True):
        super().__init__()
        mu = torch.as_tensor(mu_init, dtype=torch.float32).expand(channels).clone()
        sig = torch.as_tensor(sigma_init, dtype=torch.float32).expand(channels).clone()
        if (sig <= 0).any():
            raise ValueError("sigma_init must be positive")
        self.mu = nn.Parameter(mu, requires_grad=trainable)
        self.rho = nn.Parameter(
            torch.log(torch.expm1(sig)), requires_grad=trainable
        )

    @property
    def sigma(self):
        return F.softplus(self.rho) + 1e-6

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return (x - self.mu.view(shape)) / self.sigma.view(shape)


class FixedDataStats(nn.Module):
    """Non-trainable per-channel normalization (x - mu) / sigma.

    Unlike LearnableDataStats there is no positivity reparameterization, so
    mu=0, sigma=1 normalizes bitwise-identically to no normalization.
    """

    def __init__(self, mu, sigma):
        super().__init__()
        import numpy as np

        mu = torch.from_numpy(np.array(mu, dtype=np.float32)).flatten()
        sigma = torch.from_numpy(np.array(sigma, dtype=np.float32)).flatten()
        if mu.numel() != sigma.numel():
            raise ValueError("mu and sigma must have matching channel counts")
        if (sigma <= 0).any():
            raise ValueError("sigma must be positive")
        self.register_buffer("mu", mu)
        self.register_buffer("sigma", sigma)

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return (x - self.mu.view(shape)) / self.sigma.view(shape)


def top_singular_value(conv: nn.Conv2d) -> float:
    """Largest singular value of a conv's effective (normalized) weight."""
    w = conv.weight.detach()
    return float(torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2))


# --- checkpoint file format -------------------------------------------------

_DTYPES = {"float32": "<f4", "int64": "<i8"}


def save_checkpoint(model: ClassifierModel, path, task_index: int = 0):
    """Manifest + named little-endian parameter blobs, batch-norm stats included."""
    state = model.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
            dtype = "float32"
        else:
            arr = arr.astype("<i8")
            dtype = "int64"
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {
            "arch_id": model.arch_id,
            "num_classes": model.num_classes,
            "d_e": model.d_e,
            "in_channels": model.in_channels,
            "seed": model.init_seed,
            "task_index": task_index,
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, task_index)."""
    import numpy as np

    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        model = build_classifier(
            header["arch_id"],
            header["num_classes"],
            header["d_e"],
            seed=header["seed"] or 0,
            in_channels=header.get("in_channels", 3),
        )
        state = {}
        for entry in header["tensors"]:
            dtype = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * np.dtype(dtype).itemsize)
            arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
            state[entry["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, header["task_index"]
