"""Synthetic relational bags and the radiologist-score labeling rule.

In a generated bag every instance gets a latent key drawn uniformly from
``K`` symbols. An instance is positive iff another instance of the same bag
shares its key. Keys are i.i.d., so an instance's own payload carries no
information about its label; only the rest of the bag does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, InclusionCriteriaError
from .mil import InstanceBag

_EMBED_STREAM = 0xE3B0
_TEXTURE_AMPLITUDE = 0.8


@dataclass(frozen=True)
class SynthSpec:
    n_bags: int = 100
    n_min: int = 1
    n_max: int = 23
    n_keys: int = 8
    feature_dim: int = 64
    noise: float = 0.1
    mask_fraction: float = 0.46
    payload: str = "feature"
    edge: int = 8
    seed: int = 0
    #: seeds the key code matrix; kept apart from ``seed`` so that train and
    #: test sets drawn with different seeds share one embedding
    embed_seed: int = 0

    def __post_init__(self):
        if self.n_bags < 1:
            raise ConfigurationError(f"bag count must be >= 1, got {self.n_bags}")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigurationError(f"need 1 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if self.n_keys < 1:
            raise ConfigurationError(f"key alphabet size must be >= 1, got {self.n_keys}")
        if self.feature_dim < 1:
            raise ConfigurationError("feature width must be >= 1")
        if self.noise < 0:
            raise ConfigurationError("noise standard deviation must be >= 0")
        if not 0 <= self.mask_fraction < 1:
            raise ConfigurationError(f"mask fraction must lie in [0, 1), got {self.mask_fraction}")
        if self.payload not in ("feature", "voxel"):
            raise ConfigurationError(f"payload must be 'feature' or 'voxel', got {self.payload!r}")
        if self.edge < 2:
            raise ConfigurationError("voxel edge must be >= 2")


def key_embedding(spec: SynthSpec) -> np.ndarray:
    """(K, feature_dim) unit-norm key codes; orthonormal rows when K <= feature_dim."""
    rng = np.random.default_rng([spec.embed_seed, _EMBED_STREAM])
    a = rng.normal(size=(spec.feature_dim, spec.n_keys))
    if spec.n_keys <= spec.feature_dim:
        q, _ = np.linalg.qr(a)
        return q.T.copy()
    return (a / np.linalg.norm(a, axis=0)).T.copy()


def key_textures(spec: SynthSpec) -> np.ndarray:
    """(K, e, e, e) cosine gratings, one (axis, frequency, phase) per key."""
    e = spec.edge
    pos = (np.arange(e) + 0.5) / e
    grids = np.meshgrid(pos, pos, pos, indexing="ij")
    out = np.empty((spec.n_keys, e, e, e))
    for k in range(spec.n_keys):
        axis = k % 3
        freq = 1 + (k // 3) % max(1, e // 2)
        phase = 0.5 * np.pi * (k // (3 * max(1, e // 2)))
        out[k] = _TEXTURE_AMPLITUDE * np.cos(2 * np.pi * freq * grids[axis] + phase)
    return out


def labels_from_keys(keys: np.ndarray) -> np.ndarray:
    """1 where another element shares the key, else 0."""
    keys = np.asarray(keys)
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    return (counts[inverse] >= 2).astype(np.float64)


def generate_bags(spec: SynthSpec) -> list[InstanceBag]:
    """Deterministic in ``spec.seed``; bag i draws from the stream (seed, i)."""
    embed = key_embedding(spec) if spec.payload == "feature" else None
    textures = key_textures(spec) if spec.payload == "voxel" else None
    bags = []
    for i in range(spec.n_bags):
        rng = np.random.default_rng([spec.seed, i])
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        keys = rng.integers(0, spec.n_keys, size=n)
        labels = labels_from_keys(keys)
        if spec.payload == "feature":
            payload = embed[keys] + spec.noise * rng.normal(size=(n, spec.feature_dim))
        else:
            e = spec.edge
            payload = np.clip(textures[keys] + spec.noise * rng.normal(size=(n, e, e, e)), -1.0, 1.0)
        mask = (rng.random(n) >= spec.mask_fraction).astype(np.int64)
        bags.append(InstanceBag(f"bag{i:05d}", list(payload), labels, mask, keys))
    return bags


def analytic_positive_rate(spec: SynthSpec) -> float:
    """Expected fraction of positive instances, weighting bag sizes by instance count."""
    sizes = np.arange(spec.n_min, spec.n_max + 1)
    p_share = 1.0 - (1.0 - 1.0 / spec.n_keys) ** (sizes - 1)
    return float((sizes * p_share).sum() / sizes.sum())


# -- malignancy scores ------------------------------------------------------------


@dataclass(frozen=True)
class NoduleAnnotation:
    nodule_id: str
    scores: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(int(s) for s in self.scores))
        if any(not 1 <= s <= 5 for s in self.scores):
            raise InclusionCriteriaError(f"nodule {self.nodule_id!r}: malignancy scores must lie in [1, 5]")

    @property
    def s_avg(self) -> float:
        return float(np.mean(self.scores))


MALIGNANT, BENIGN, AMBIGUOUS = "malignant", "benign", "ambiguous"


def label_from_scores(ann: NoduleAnnotation) -> tuple[str, int | None, int]:
    """Return (category, label, mask). Ambiguous nodules get label None and mask 0."""
    if len(ann.scores) < 3:
        raise InclusionCriteriaError(
            f"nodule {ann.nodule_id!r} has {len(ann.scores)} readings; at least 3 are required"
        )
    total, n = sum(ann.scores), len(ann.scores)
    # exact comparison of the mean against 3
    if total > 3 * n:
        return MALIGNANT, 1, 1
    if total < 3 * n:
        return BENIGN, 0, 1
    return AMBIGUOUS, None, 0
