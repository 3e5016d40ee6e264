"""Label-text-embedding pool: built once, frozen, queried as class anchors."""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    EmbedderUnavailableError,
    MissingClassNameError,
    SingleClassError,
    UnknownLabelError,
)

_CACHE_MAGIC = b"LTEPOOL1"


class PromptTemplate(str, Enum):
    P1 = "class_of_name"
    P2 = "photo_of_name"
    P3 = "photo_of_index"

    @classmethod
    def parse(cls, value) -> "PromptTemplate":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        aliases = {"p1": cls.P1, "p2": cls.P2, "p3": cls.P3}
        if v in aliases:
            return aliases[v]
        for member in cls:
            if member.value == v:
                return member
        raise ValueError(f"unknown prompt template {value!r}")


def render_prompt(class_name_or_index, template) -> str:
    """Render the label prompt for one class.

    P1/P2 require the class name; P3 uses whatever identifier is given
    (normally the class index).
    """
    template = PromptTemplate.parse(template)
    if template is PromptTemplate.P3:
        return f"a photo of a {class_name_or_index}"
    if not isinstance(class_name_or_index, str):
        raise MissingClassNameError(
            f"template {template.value} needs a class name, got {class_name_or_index!r}"
        )
    if template is PromptTemplate.P1:
        return f"a class of a {class_name_or_index}"
    return f"a photo of a {class_name_or_index}"


@dataclass
class EmbedderSpec:
    """Which text encoder produces the anchors."""

    kind: str = "deterministic_test"  # external_text_encoder | deterministic_test
    dim: int = 64
    identifier: str = "hash-v1"
    seed: int = 0  # used by the deterministic test embedder only

    def __post_init__(self):
        if self.kind not in ("external_text_encoder", "deterministic_test"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("embedding dim must be positive")

    @property
    def fingerprint(self) -> str:
        if self.kind == "deterministic_test":
            return f"det:{self.identifier}:dim={self.dim}:seed={self.seed}"
        return f"ext:{self.identifier}:dim={self.dim}"


def deterministic_test_embedding(prompt: str, dim: int, global_seed: int = 0) -> np.ndarray:
    """Offline-testable embedder: prompt hash seeds a normal draw, L2-normalized."""
    digest = hashlib.sha256(f"{global_seed}\x1f{prompt}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def resolve_embedder(spec: EmbedderSpec):
    """Return a callable prompt -> vector for the spec.

    External encoders are optional dependencies; failure to load raises
    EmbedderUnavailableError so callers can fall back to the deterministic
    test embedder or a cached pool.
    """
    if spec.kind == "deterministic_test":
        return lambda prompt: deterministic_test_embedding(prompt, spec.dim, spec.seed)
    try:
        from sentence_transformers import SentenceTransformer

        model = SentenceTransformer(spec.identifier)
    except Exception as exc:  # import error, missing weights, no network
        raise EmbedderUnavailableError(
            f"cannot load external text encoder {spec.identifier!r}: {exc}"
        ) from exc

    def embed(prompt: str) -> np.ndarray:
        vec = np.asarray(model.encode([prompt])[0], dtype=np.float32)
        if vec.shape != (spec.dim,):
            raise EmbedderUnavailableError(
                f"encoder {spec.identifier!r} returned dim {vec.shape}, expected {spec.dim}"
            )
        return vec

    return embed


@dataclass
class LtePool:
    """Frozen map class-id -> anchor embedding."""

    class_ids: tuple
    embeddings: np.ndarray  # (num_classes, dim), row order follows class_ids
    prompt_template: PromptTemplate
    embedder_fingerprint: str
    normalized: bool = True
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.class_ids):
            raise ValueError("embeddings must be one row per class id")
        self.embeddings.setflags(write=False)  # write-once
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __contains__(self, label) -> bool:
        return int(label) in self._index

    def query(self, label) -> np.ndarray:
        """Stored anchor for one class; read-only view, no mutation."""
        try:
            return self.embeddings[self._index[int(label)]]
        except KeyError:
            raise UnknownLabelError(f"label {label} not in pool") from None

    def query_batch(self, labels) -> np.ndarray:
        rows = [self._index.get(int(y)) for y in np.asarray(labels).ravel()]
        if any(r is None for r in rows):
            missing = [int(y) for y, r in zip(np.asarray(labels).ravel(), rows) if r is None]
            raise UnknownLabelError(f"labels {missing} not in pool")
        return self.embeddings[rows]


def query(pool: LtePool, label) -> np.ndarray:
    return pool.query(label)


def build_pool(
    class_names,
    embedder,
    template=PromptTemplate.P2,
    normalized: bool = True,
    class_ids=None,
) -> LtePool:
    """Embed one prompt per class and freeze the result.

    The embedder is invoked exactly once per class and never again afterwards.
    `embedder` may be an EmbedderSpec or a bare callable prompt -> vector.
    """
    class_names = list(class_names)
    if not class_names:
        raise ValueError("class_names must be non-empty")
    template = PromptTemplate.parse(template)
    if class_ids is None:
        class_ids = list(range(len(class_names)))
    if len(class_ids) != len(class_names):
        raise ValueError("class_ids and class_names disagree in length")

    if isinstance(embedder, EmbedderSpec):
        embed, fingerprint = resolve_embedder(embedder), embedder.fingerprint
    else:
        embed, fingerprint = embedder, getattr(embedder, "fingerprint", "custom")

    rows = []
    for cls_id, name in zip(class_ids, class_names):
        arg = cls_id if template is PromptTemplate.P3 else name
        vec = np.asarray(embed(render_prompt(arg, template)), dtype=np.float32)
        if normalized:
            norm = np.linalg.norm(vec)
            if norm == 0:
                raise ValueError(f"zero embedding for class {name!r}")
            vec = vec / norm
        rows.append(vec)
    return LtePool(
        class_ids=tuple(class_ids),
        embeddings=np.stack(rows),
        prompt_template=template,
        embedder_fingerprint=fingerprint,
        normalized=normalized,
    )


def min_pairwise_sq_distance(pool: LtePool) -> float:
    """Minimum squared L2 distance over all class pairs."""
    e = pool.embeddings.astype(np.float64)
    if len(e) < 2:
        raise SingleClassError("need at least two classes for pairwise distance")
    sq = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    sq[np.diag_indices(len(e))] = np.inf
    return float(sq.min())


def save_pool(pool: LtePool, path):
    """Cache format: magic, length-prefixed JSON manifest, raw LE float32 matrix."""
    manifest = {
        "embedder_fingerprint": pool.embedder_fingerprint,
        "template": pool.prompt_template.value,
        "dim": pool.dim,
        "class_ids": list(pool.class_ids),
        "normalized": pool.normalized,
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(pool.embeddings.astype("<f4").tobytes())


def load_pool(path) -> LtePool:
    with open(path, "rb") as f:
        if f.read(len(_CACHE_MAGIC)) != _CACHE_MAGIC:
            raise ValueError(f"{path} is not an LTE cache file")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen).decode())
        raw = f.read()
    n, dim = len(manifest["class_ids"]), manifest["dim"]
    matrix = np.frombuffer(raw, dtype="<f4").reshape(n, dim)
    return LtePool(
        class_ids=tuple(manifest["class_ids"]),
        embeddings=matrix,
        prompt_template=PromptTemplate.parse(manifest["template"]),
        embedder_fingerprint=manifest["embedder_fingerprint"],
        normalized=manifest["normalized"],
    )


def pool_cache_path(cache_dir, spec: EmbedderSpec, template, class_names, normalized=True) -> Path:
    """Cache file keyed by embedder fingerprint, template and class list."""
    template = PromptTemplate.parse(template)
    key = hashlib.sha256(
        "\x1f".join(
            [spec.fingerprint, template.value, str(bool(normalized))] + list(class_names)
        ).encode()
    ).hexdigest()[:16]
    return Path(cache_dir) / f"lte_{key}.pool"


def build_or_load_pool(
    class_names,
    spec: EmbedderSpec,
    template=PromptTemplate.P2,
    cache_dir=None,
    normalized: bool = True,
) -> LtePool:
    """Build the pool, consulting and refreshing the on-disk cache if given."""
    if cache_dir is not None:
        path = pool_cache_path(cache_dir, spec, template, class_names, normalized)
        if path.exists():
            return load_pool(path)
    pool = build_pool(class_names, spec, template, normalized=normalized)
    if cache_dir is not None:
        save_pool(pool, path)
    return pool
