"""NoduleSAT: shared backbone, set attention over a bag, per-instance head.

Bags are processed in padded batches. ``batch_sets`` pads every bag to the
largest size in the batch and returns a validity mask; padded rows are
excluded from attention, from every batch statistic and from the loss, so a
bag's predictions do not depend on what it was batched with (in eval mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import SATConfig, SetAttentionTransformer
from .backbone import BackboneConfig, DenseNet3D
from .exceptions import ConfigurationError, ContractError, EmptySetError, StateError
from .nn import functional as F
from .nn.layers import Linear, Module
from .nn.optim import Adam
from .nn.tensor import Tensor, concat, no_grad

MAX_BAG_SIZE = 128
TRAIN_MODES = ("end-to-end", "frozen-backbone", "frozen-bn")


@dataclass
class InstanceBag:
    """One patient's set of instances.

    ``instances`` holds either 1-D feature vectors or cubic 3-D voxel patches.
    ``labels`` entries where ``mask == 0`` are never read and may be NaN.
    ``keys`` optionally carries the latent generator keys of synthetic bags.
    """

    bag_id: str
    instances: list
    labels: np.ndarray
    mask: np.ndarray
    keys: np.ndarray | None = None

    def __post_init__(self):
        self.instances = [np.asarray(p, dtype=np.float64) for p in self.instances]
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=np.int64).reshape(-1)
        n = len(self.instances)
        if len(self.labels) != n or len(self.mask) != n:
            raise ContractError(
                f"bag {self.bag_id!r}: {n} instances, {len(self.labels)} labels, {len(self.mask)} mask entries"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError(f"bag {self.bag_id!r}: mask entries must be 0 or 1")
        sup = self.labels[self.mask == 1]
        if not np.isin(sup, (0.0, 1.0)).all():
            raise ContractError(f"bag {self.bag_id!r}: supervised labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def payload_kind(self) -> str:
        kinds = {("feature" if p.ndim == 1 else "voxel" if p.ndim == 3 else "?") for p in self.instances}
        if "?" in kinds:
            raise ContractError(f"bag {self.bag_id!r}: payloads must be 1-D features or 3-D patches")
        if len(kinds) > 1:
            raise ContractError(f"bag {self.bag_id!r}: mixed payload kinds {sorted(kinds)}")
        if not kinds:
            raise EmptySetError(f"bag {self.bag_id!r} is empty")
        return kinds.pop()

    def subset(self, keep: np.ndarray) -> InstanceBag:
        keep = np.asarray(keep, dtype=bool)
        return InstanceBag(
            self.bag_id,
            [p for p, k in zip(self.instances, keep) if k],
            self.labels[keep],
            self.mask[keep],
            None if self.keys is None else self.keys[keep],
        )

    def permuted(self, perm: Sequence[int]) -> InstanceBag:
        perm = np.asarray(perm)
        return InstanceBag(
            self.bag_id,
            [self.instances[i] for i in perm],
            self.labels[perm],
            self.mask[perm],
            None if self.keys is None else self.keys[perm],
        )


@dataclass
class BagPrediction:
    bag_id: str
    logits: np.ndarray
    probabilities: np.ndarray = field(init=False)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.probabilities = F.sigmoid(Tensor(self.logits)).data


@dataclass
class SetBatch:
    """Padded view of a list of bags. ``valid`` is (B, Nmax) bool."""

    payload: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    supervised: np.ndarray
    sizes: np.ndarray
    kind: str


def check_bags(bags: Sequence[InstanceBag], max_size: int = MAX_BAG_SIZE) -> str:
    """Validate a batch; return the shared payload kind."""
    if len(bags) == 0:
        raise ContractError("need at least one bag")
    kinds = set()
    for bag in bags:
        if not isinstance(bag, InstanceBag):
            raise ContractError(f"expected InstanceBag, got {type(bag).__name__}")
        if len(bag) == 0:
            raise EmptySetError(f"bag {bag.bag_id!r} is empty")
        if len(bag) > max_size:
            raise ConfigurationError(f"bag {bag.bag_id!r} has {len(bag)} instances > max bag size {max_size}")
        kinds.add(bag.payload_kind)
    if len(kinds) > 1:
        raise ContractError(f"mixed payload kinds across bags: {sorted(kinds)}")
    shapes = {p.shape for bag in bags for p in bag.instances}
    if len(shapes) > 1:
        raise ContractError(f"payload shapes differ across instances: {sorted(shapes)}")
    return kinds.pop()


def batch_sets(bags: Sequence[InstanceBag], max_size: int = MAX_BAG_SIZE) -> SetBatch:
    kind = check_bags(bags, max_size)
    sizes = np.array([len(b) for b in bags])
    B, nmax = len(bags), int(sizes.max())
    item_shape = bags[0].instances[0].shape
    payload = np.zeros((B, nmax) + item_shape)
    valid = np.zeros((B, nmax), dtype=bool)
    labels = np.zeros((B, nmax))
    supervised = np.zeros((B, nmax), dtype=bool)
    for i, bag in enumerate(bags):
        n = len(bag)
        payload[i, :n] = np.stack(bag.instances)
        valid[i, :n] = True
        sup = bag.mask == 1
        supervised[i, :n] = sup
        labels[i, :n] = np.where(sup, np.nan_to_num(bag.labels), 0.0)
    return SetBatch(payload, valid, labels, supervised, sizes, kind)


def masked_bce(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean BCE-with-logits over entries where ``mask`` is 1.

    Uses softplus(z) - y*z. With no supervised entry the result is an exact 0
    whose gradient is 0 everywhere.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != logits.shape:
        raise ContractError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    y = np.where(mask, np.nan_to_num(np.asarray(labels, dtype=np.float64)), 0.0)
    count = int(mask.sum())
    if count == 0:
        return (logits * 0.0).sum()
    per = F.softplus(logits) - logits * Tensor(y)
    return (per * Tensor(mask.astype(np.float64))).sum() * (1.0 / count)


class NoduleSAT(Module):
    """Backbone (optional) -> input projection (when widths differ) -> SAT -> linear head."""

    def __init__(
        self,
        sat_config: SATConfig,
        feature_dim: int | None = None,
        backbone_config: BackboneConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sat_config = sat_config
        self.backbone_config = backbone_config
        if backbone_config is not None:
            self.backbone = DenseNet3D(backbone_config, rng)
            feature_dim = self.backbone.out_channels
        else:
            self.backbone = None
            if feature_dim is None:
                raise ConfigurationError("feature_dim is required when no backbone is configured")
        self.feature_dim = feature_dim
        self.proj = Linear(feature_dim, sat_config.H, rng) if feature_dim != sat_config.H else None
        self.sat = SetAttentionTransformer(sat_config, rng)
        self.head = Linear(sat_config.H, 1, rng)

    # -- forward --------------------------------------------------------------

    def embed(self, batch: SetBatch, backbone_grad: bool = True) -> Tensor:
        """Per-instance features, padded to (B, Nmax, F)."""
        if batch.kind == "feature":
            if batch.payload.shape[-1] != self.feature_dim:
                raise ConfigurationError(
                    f"feature width {batch.payload.shape[-1]} != model feature_dim {self.feature_dim}"
                )
            return Tensor(batch.payload)
        if self.backbone is None:
            raise ContractError("voxel payloads need a backbone")
        patches = batch.payload[batch.valid][:, None]  # (M, 1, d, d, d)
        if backbone_grad:
            feats = self.backbone(Tensor(patches))
        else:
            with no_grad():
                feats = self.backbone(Tensor(patches))
        m = feats.shape[0]
        index = np.full(batch.valid.shape, m)
        index[batch.valid] = np.arange(m)
        feats = concat([feats, Tensor(np.zeros((1, feats.shape[1])))], axis=0)
        return feats[index]

    def refine(self, feats: Tensor, valid: np.ndarray) -> Tensor:
        x = self.proj(feats) if self.proj is not None else feats
        if valid is not None and self.proj is not None:
            x = x * Tensor(valid[..., None].astype(np.float64))
        return self.sat(x, mask=valid)

    def forward_batch(self, batch: SetBatch, backbone_grad: bool = True) -> Tensor:
        """Logits of shape (B, Nmax); padded positions are 0."""
        feats = self.embed(batch, backbone_grad)
        z = self.head(self.refine(feats, batch.valid))
        z = z.reshape(z.shape[:-1])
        return z * Tensor(batch.valid.astype(np.float64))

    def forward(self, bags: Sequence[InstanceBag]) -> Tensor:
        return self.forward_batch(batch_sets(bags))

    def predict_bags(self, bags: Sequence[InstanceBag], batch_size: int = 64) -> list[BagPrediction]:
        out = []
        with no_grad():
            for start in range(0, len(bags), batch_size):
                chunk = list(bags[start : start + batch_size])
                batch = batch_sets(chunk)
                z = self.forward_batch(batch).data
                out.extend(BagPrediction(b.bag_id, z[i, : len(b)]) for i, b in enumerate(chunk))
        return out

    def backbone_batchnorms(self):
        if self.backbone is None:
            return []
        return self.backbone.batchnorms()


def nodulesat_forward(bag: InstanceBag, model: NoduleSAT, mode: str = "eval") -> BagPrediction:
    """Predict one bag; ``mode`` selects batch statistics ('train') or running ones ('eval')."""
    if len(bag) == 0:
        raise EmptySetError(f"bag {bag.bag_id!r} is empty")
    was = model.training
    model.train(mode == "train")
    try:
        with no_grad():
            z = model.forward_batch(batch_sets([bag])).data[0]
    finally:
        model.train(was)
    return BagPrediction(bag.bag_id, z)


def calibrate_backbone_bn(model: NoduleSAT, bags: Sequence[InstanceBag], batch_size: int = 16) -> None:
    """Populate empty backbone running statistics with one no-grad train-mode pass."""
    bns = model.backbone_batchnorms()
    if not bns or all(bn.running.populated for bn in bns):
        return
    was = model.training
    model.backbone.train()
    with no_grad():
        for start in range(0, len(bags), batch_size):
            model.embed(batch_sets(list(bags[start : start + batch_size])))
    model.train(was)


def train_bag_batch(
    bags: Sequence[InstanceBag],
    model: NoduleSAT,
    optimizer: Adam,
    mode: str = "end-to-end",
) -> float:
    """Forward every bag, average masked BCE over supervised instances, one Adam step.

    Modes:
      end-to-end       every parameter trains, BN in train mode
      frozen-backbone  backbone runs in eval mode without gradient
      frozen-bn        backbone BatchNorm statistics and affine terms are pinned
    """
    if mode not in TRAIN_MODES:
        raise ConfigurationError(f"unknown training mode {mode!r}; choose from {TRAIN_MODES}")
    batch = batch_sets(bags)
    model.train()
    bns = model.backbone_batchnorms()
    if mode in ("frozen-backbone", "frozen-bn") and bns:
        if not all(bn.running.populated for bn in bns):
            raise StateError(f"{mode} training needs populated backbone BatchNorm statistics")
    if mode == "frozen-bn":
        for bn in bns:
            bn.freeze(True)
    if mode == "frozen-backbone" and model.backbone is not None:
        model.backbone.eval()
    try:
        sup = batch.supervised & batch.valid
        if not sup.any():
            return 0.0
        logits = model.forward_batch(batch, backbone_grad=(mode != "frozen-backbone"))
        loss = masked_bce(logits, batch.labels, sup)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return loss.item()
    finally:
        if mode == "frozen-bn":
            for bn in bns:
                bn.freeze(False)
        if mode == "frozen-backbone" and model.backbone is not None:
            model.backbone.train()
