"""Synthetic shared-latent multimodal data, client partitioning and feature files.

Feature file layout::

    b"FIMP1\\n"
    b"<n> <d_image> <d_text> <n_labels>\\n"           (ASCII decimals)
    per sample:
        1 byte modality mask (bit0 image, bit1 text)
        n_labels bytes, each 0 or 1
        image row (d_image x float64 LE) if bit0
        text row  (d_text  x float64 LE) if bit1
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FeatureFileError
from .rng import stream

MAGIC = b"FIMP1\n"
IMAGE_BIT = 1
TEXT_BIT = 2
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Sample:
    image: np.ndarray | None
    text: np.ndarray | None
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.image is None and self.text is None:
            raise ConfigurationError("a sample needs at least one modality")


@dataclass
class FeatureSet:
    """Column-major view of a sample list; absent rows are zero and masked out."""

    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.labels)
        if not (len(self.image) == len(self.text) == len(self.mask) == n):
            raise ConfigurationError("feature set columns have different lengths")
        if n and (self.mask == 0).any():
            raise ConfigurationError("every sample needs at least one modality")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d_image(self) -> int:
        return self.image.shape[1]

    @property
    def d_text(self) -> int:
        return self.text.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    @property
    def has_image(self) -> np.ndarray:
        return (self.mask & IMAGE_BIT).astype(bool)

    @property
    def has_text(self) -> np.ndarray:
        return (self.mask & TEXT_BIT).astype(bool)

    def subset(self, indices, keep_image: bool = True, keep_text: bool = True) -> FeatureSet:
        idx = np.asarray(indices, dtype=np.int64)
        mask = self.mask[idx].copy()
        image, text = self.image[idx].copy(), self.text[idx].copy()
        if not keep_image:
            mask &= ~np.uint8(IMAGE_BIT)
            image[:] = 0.0
        if not keep_text:
            mask &= ~np.uint8(TEXT_BIT)
            text[:] = 0.0
        return FeatureSet(image, text, self.labels[idx].copy(), mask)

    def samples(self) -> list[Sample]:
        out = []
        for i in range(len(self)):
            out.append(
                Sample(
                    self.image[i].copy() if self.mask[i] & IMAGE_BIT else None,
                    self.text[i].copy() if self.mask[i] & TEXT_BIT else None,
                    self.labels[i].copy(),
                )
            )
        return out

    @classmethod
    def from_samples(cls, samples: list[Sample], d_image: int, d_text: int, n_labels: int) -> FeatureSet:
        n = len(samples)
        image, text = np.zeros((n, d_image)), np.zeros((n, d_text))
        labels = np.zeros((n, n_labels), dtype=np.uint8)
        mask = np.zeros(n, dtype=np.uint8)
        for i, s in enumerate(samples):
            if len(s.labels) != n_labels:
                raise ConfigurationError(f"sample {i} has {len(s.labels)} labels, expected {n_labels}")
            labels[i] = s.labels
            if s.image is not None:
                image[i] = s.image
                mask[i] |= IMAGE_BIT
            if s.text is not None:
                text[i] = s.text
                mask[i] |= TEXT_BIT
        return cls(image, text, labels, mask)

    def equals(self, other: FeatureSet) -> bool:
        return (
            np.array_equal(self.mask, other.mask)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.text, other.text)
        )


def concat_sets(sets: list[FeatureSet]) -> FeatureSet:
    return FeatureSet(
        np.concatenate([s.image for s in sets]),
        np.concatenate([s.text for s in sets]),
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.mask for s in sets]),
    )


# -- generator -----------------------------------------------------------------------
@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 16
    d_image: int = 32
    d_text: int = 32
    n_labels: int = 5
    noise_sigma: float = 0.1
    modality_correlation: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.modality_correlation <= 1.0:
            raise ConfigurationError(f"modality_correlation must lie in [0, 1], got {self.modality_correlation}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        for name in ("latent_dim", "d_image", "d_text", "n_labels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class GeneratorParams:
    """The fixed random maps of one generator seed."""

    proj_image: np.ndarray
    proj_text: np.ndarray
    hyperplanes: np.ndarray


def generator_params(cfg: GeneratorConfig) -> GeneratorParams:
    k = cfg.latent_dim
    a_img = stream(cfg.seed, "generator", "proj_image").standard_normal((cfg.d_image, k))
    a_txt = stream(cfg.seed, "generator", "proj_text").standard_normal((cfg.d_text, k))
    u = stream(cfg.seed, "generator", "hyperplanes").normal(size=(cfg.n_labels, k))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return GeneratorParams(a_img, a_txt, u)


@dataclass
class Latents:
    shared: np.ndarray
    image: np.ndarray
    text: np.ndarray


def generate_samples(cfg: GeneratorConfig, n: int, return_latents: bool = False):
    """Draw ``n`` fully multimodal samples in generation order."""
    cfg.validate()
    if n < 1:
        raise ConfigurationError(f"need at least one sample, got n={n}")
    params = generator_params(cfg)
    rng = stream(cfg.seed, "generator", "samples")
    k, rho = cfg.latent_dim, cfg.modality_correlation
    shared = rng.standard_normal((n, k))
    private_img = rng.standard_normal((n, k))
    private_txt = rng.standard_normal((n, k))
    noise_img = rng.standard_normal((n, cfg.d_image))
    noise_txt = rng.standard_normal((n, cfg.d_text))
    resid = math.sqrt(max(0.0, 1.0 - rho * rho))
    z_img = rho * shared + resid * private_img
    z_txt = rho * shared + resid * private_txt
    image = np.tanh(z_img @ params.proj_image.T) + cfg.noise_sigma * noise_img
    text = np.tanh(z_txt @ params.proj_text.T) + cfg.noise_sigma * noise_txt
    labels = (shared @ params.hyperplanes.T > 0).astype(np.uint8)
    fs = FeatureSet(image, text, labels, np.full(n, IMAGE_BIT | TEXT_BIT, dtype=np.uint8))
    if return_latents:
        return fs, Latents(shared, z_img, z_txt)
    return fs


@dataclass
class Splits:
    train: FeatureSet
    val: FeatureSet
    test: FeatureSet


def split_dataset(fs: FeatureSet, seed: int) -> Splits:
    n = len(fs)
    perm = stream(seed, "split").permutation(n)
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n))
    return Splits(
        fs.subset(perm[:n_train]),
        fs.subset(perm[n_train : n_train + n_val]),
        fs.subset(perm[n_train + n_val :]),
    )


def generate_dataset(cfg: GeneratorConfig, n: int) -> Splits:
    return split_dataset(generate_samples(cfg, n), cfg.seed)


# -- client partitioning -------------------------------------------------------------
class Profile(str, enum.Enum):
    IMAGE_ONLY = "image_only"
    TEXT_ONLY = "text_only"
    MULTIMODAL = "multimodal"

    @property
    def has_image(self) -> bool:
        return self is not Profile.TEXT_ONLY

    @property
    def has_text(self) -> bool:
        return self is not Profile.IMAGE_ONLY


@dataclass
class ClientSpec:
    id: int
    profile: Profile
    sample_indices: np.ndarray
    label_skew: np.ndarray | None = field(default=None)

    @property
    def n_samples(self) -> int:
        return len(self.sample_indices)


def parse_partition(spec: str) -> tuple[int, int, int]:
    parts = str(spec).strip().split(":")
    if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
        raise ConfigurationError(f"partition {spec!r} is not of the form I:T:M with non-negative integers")
    counts = tuple(int(p) for p in parts)
    if sum(counts) < 1:
        raise ConfigurationError(f"partition {spec!r} has no clients")
    return counts  # type: ignore[return-value]


def partition_clients(
    train: FeatureSet,
    spec: str,
    per_client_n: int,
    heterogeneous: bool = False,
    seed: int = 0,
    alpha: float = 0.5,
) -> list[ClientSpec]:
    """Assign disjoint, equal-size shards; ids run image-only, text-only, multimodal."""
    n_img, n_txt, n_mm = parse_partition(spec)
    n_clients = n_img + n_txt + n_mm
    if per_client_n < 1:
        raise ConfigurationError(f"per_client_n must be positive, got {per_client_n}")
    if n_clients * per_client_n > len(train):
        raise ConfigurationError(
            f"partition {spec} needs {n_clients * per_client_n} samples, training split has {len(train)}"
        )
    profiles = [Profile.IMAGE_ONLY] * n_img + [Profile.TEXT_ONLY] * n_txt + [Profile.MULTIMODAL] * n_mm
    pool = stream(seed, "partition", "shuffle").permutation(len(train))
    if not heterogeneous:
        return [
            ClientSpec(cid, profile, np.sort(pool[cid * per_client_n : (cid + 1) * per_client_n]))
            for cid, profile in enumerate(profiles)
        ]

    # Multimodal shards stay i.i.d.; unimodal shards are drawn with label-skewed weights.
    shards: dict[int, ClientSpec] = {}
    cursor = 0
    for cid, profile in enumerate(profiles):
        if profile is Profile.MULTIMODAL:
            shards[cid] = ClientSpec(cid, profile, np.sort(pool[cursor : cursor + per_client_n]))
            cursor += per_client_n
    remaining = pool[cursor:]
    labels = train.labels.astype(np.float64)
    for cid, profile in enumerate(profiles):
        if profile is Profile.MULTIMODAL:
            continue
        rng = stream(seed, "partition", "dirichlet", cid)
        skew = rng.dirichlet(np.full(train.n_labels, alpha))
        weights = labels[remaining] @ skew + 1e-3
        chosen = rng.choice(len(remaining), size=per_client_n, replace=False, p=weights / weights.sum())
        shards[cid] = ClientSpec(cid, profile, np.sort(remaining[chosen]), skew)
        remaining = np.delete(remaining, chosen)
    return [shards[cid] for cid in range(n_clients)]


def client_data(train: FeatureSet, client: ClientSpec) -> FeatureSet:
    return train.subset(client.sample_indices, keep_image=client.profile.has_image, keep_text=client.profile.has_text)


# -- feature files -------------------------------------------------------------------
def save_feature_file(path: str | Path, fs: FeatureSet) -> None:
    n, d_i, d_t, n_labels = len(fs), fs.d_image, fs.d_text, fs.n_labels
    parts = [MAGIC, f"{n} {d_i} {d_t} {n_labels}\n".encode("ascii")]
    image = np.ascontiguousarray(fs.image, dtype="<f8")
    text = np.ascontiguousarray(fs.text, dtype="<f8")
    for i in range(n):
        m = int(fs.mask[i])
        parts.append(bytes([m]))
        parts.append(fs.labels[i].astype(np.uint8).tobytes())
        if m & IMAGE_BIT:
            parts.append(image[i].tobytes())
        if m & TEXT_BIT:
            parts.append(text[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_feature_file(path: str | Path) -> FeatureSet:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise FeatureFileError(f"{path}: malformed header (missing FIMP1 magic)")
    end = buf.find(b"\n", len(MAGIC))
    if end < 0:
        raise FeatureFileError(f"{path}: malformed header (no header line)")
    try:
        fields = [int(tok) for tok in buf[len(MAGIC) : end].decode("ascii").split()]
    except (UnicodeDecodeError, ValueError):
        raise FeatureFileError(f"{path}: malformed header line") from None
    if len(fields) != 4 or min(fields) < 0 or fields[3] < 1:
        raise FeatureFileError(f"{path}: header must hold 'n d_image d_text n_labels', got {fields}")
    n, d_i, d_t, n_labels = fields
    image, text = np.zeros((n, d_i)), np.zeros((n, d_t))
    labels = np.zeros((n, n_labels), dtype=np.uint8)
    mask = np.zeros(n, dtype=np.uint8)
    pos = end + 1

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(buf):
            raise FeatureFileError(f"{path}: truncated payload while reading {what}")
        chunk = buf[pos : pos + count]
        pos += count
        return chunk

    for i in range(n):
        m = take(1, f"mask of sample {i}")[0]
        if m not in (1, 2, 3):
            raise FeatureFileError(f"{path}: sample {i} has invalid modality mask {m}")
        lab = np.frombuffer(take(n_labels, f"labels of sample {i}"), dtype=np.uint8)
        if lab.max(initial=0) > 1:
            raise FeatureFileError(f"{path}: sample {i} has non-binary labels")
        mask[i], labels[i] = m, lab
        if m & IMAGE_BIT:
            image[i] = np.frombuffer(take(8 * d_i, f"image row of sample {i}"), dtype="<f8")
        if m & TEXT_BIT:
            text[i] = np.frombuffer(take(8 * d_t, f"text row of sample {i}"), dtype="<f8")
    if pos != len(buf):
        raise FeatureFileError(f"{path}: {len(buf) - pos} bytes beyond the {n} declared samples")
    return FeatureSet(image, text, labels, mask)


def with_seed(cfg: GeneratorConfig, seed: int) -> GeneratorConfig:
    return replace(cfg, seed=seed)
