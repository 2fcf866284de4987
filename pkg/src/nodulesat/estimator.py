"""scikit-learn style wrappers around NoduleSAT and the preprocessing steps.

:class:`NoduleSATClassifier` consumes lists of :class:`~nodulesat.mil.InstanceBag`
rather than a 2-D design matrix: labels and masks travel inside the bags, so
``y`` is accepted for API symmetry and ignored. Instance-level outputs are
returned flattened in bag order, which keeps ``predict_proba`` two-dimensional
as scikit-learn expects. Use :meth:`NoduleSATClassifier.predict_bags` for
per-bag results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attention import SATConfig
from .backbone import BackboneConfig
from .exceptions import ConfigurationError, ContractError, EmptySetError, NumericDomainError
from .metrics import auc
from .mil import TRAIN_MODES, InstanceBag, NoduleSAT, batch_sets, calibrate_backbone_bn, check_bags, train_bag_batch
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import SCHEDULE_KINDS, Adam, LrSchedule
from .nn.tensor import no_grad
from .preprocess import AugmentSpec, Volume, augment, hu_normalize, resample_trilinear

# named substreams of the root seed
STREAM_INIT, STREAM_DATA, STREAM_AUGMENT = 1, 2, 3


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def validate_bags(bags) -> list[InstanceBag]:
    """Input check shared by fit and predict: a non-empty list of non-empty bags."""
    if isinstance(bags, InstanceBag):
        bags = [bags]
    bags = list(bags)
    for b in bags:
        if not isinstance(b, InstanceBag):
            raise ContractError(f"expected InstanceBag objects, got {type(b).__name__}")
        if len(b) == 0:
            raise EmptySetError(f"bag {b.bag_id!r} is empty")
    check_bags(bags)
    return bags


def jitter_bags(bags: Sequence[InstanceBag], rng: np.random.Generator, jitter: float, voxel_augment: bool):
    """Fresh per-step perturbation: Gaussian noise on feature payloads, random
    rotation/flip/shift on voxel payloads."""
    out = []
    for b in bags:
        if b.payload_kind == "feature":
            if jitter <= 0:
                out.append(b)
                continue
            inst = [p + jitter * rng.normal(size=p.shape) for p in b.instances]
        else:
            if not voxel_augment:
                out.append(b)
                continue
            inst = [augment(p, AugmentSpec.random(rng)) for p in b.instances]
        out.append(InstanceBag(b.bag_id, inst, b.labels, b.mask, b.keys))
    return out


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float


def train_epochs(
    model: NoduleSAT,
    optimizer: Adam,
    bags: Sequence[InstanceBag],
    schedule: LrSchedule,
    epochs: int,
    batch_bags: int = 32,
    mode: str = "end-to-end",
    jitter: float = 0.0,
    voxel_augment: bool = False,
    seed: int = 0,
    start_epoch: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> list[EpochRecord]:
    """Run epochs ``start_epoch .. epochs-1``; each epoch reshuffles the bags.

    The loss reported per epoch is the mean over its steps. A non-finite loss
    or a numeric failure inside a step aborts with :class:`NumericDomainError`
    naming the global step index.
    """
    history = []
    step = start_epoch * -(-len(bags) // batch_bags)
    for epoch in range(start_epoch, epochs):
        # per-epoch streams so a resumed run replays exactly the same epochs
        order = np.random.default_rng([seed, STREAM_DATA, epoch]).permutation(len(bags))
        aug_rng = np.random.default_rng([seed, STREAM_AUGMENT, epoch])
        optimizer.lr = schedule(epoch)
        losses = []
        for start in range(0, len(bags), batch_bags):
            chunk = [bags[i] for i in order[start : start + batch_bags]]
            chunk = jitter_bags(chunk, aug_rng, jitter, voxel_augment)
            try:
                loss = train_bag_batch(chunk, model, optimizer, mode=mode)
            except NumericDomainError as exc:
                raise NumericDomainError(f"{exc} at step {step} (epoch {epoch})") from exc
            if not np.isfinite(loss):
                raise NumericDomainError(f"non-finite loss {loss} at step {step} (epoch {epoch})")
            losses.append(loss)
            step += 1
        rec = EpochRecord(epoch, optimizer.lr, float(np.mean(losses)))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


class NoduleSATClassifier(ClassifierMixin, BaseEstimator):
    """Per-instance classifier over bags, with set attention across each bag.

    Parameters
    ----------
    L, H, g, sigma : SAT depth, width, group count and attention activation.
    backbone : optional :class:`BackboneConfig` for voxel payloads.
    epochs, batch_bags : training length and bags per optimizer step.
    lr, schedule, period, factor, milestones, ratio : optimizer and schedule.
    jitter : std of Gaussian noise added to feature payloads at every step.
    voxel_augment : random rotation/flip/shift of voxel payloads during training.
    mode : one of ``end-to-end``, ``frozen-backbone``, ``frozen-bn``.
    random_state : root seed; init, data order and augmentation use substreams.
    """

    def __init__(
        self,
        L=3,
        H=64,
        g=8,
        sigma="elu",
        backbone=None,
        epochs=100,
        batch_bags=32,
        lr=1e-2,
        schedule="halve-every-k",
        period=40,
        factor=0.2,
        milestones=(100, 130, 170),
        ratio=0.03,
        jitter=0.05,
        voxel_augment=False,
        mode="end-to-end",
        random_state=0,
        on_epoch=None,
    ):
        self.L = L
        self.H = H
        self.g = g
        self.sigma = sigma
        self.backbone = backbone
        self.epochs = epochs
        self.batch_bags = batch_bags
        self.lr = lr
        self.schedule = schedule
        self.period = period
        self.factor = factor
        self.milestones = milestones
        self.ratio = ratio
        self.jitter = jitter
        self.voxel_augment = voxel_augment
        self.mode = mode
        self.random_state = random_state
        self.on_epoch = on_epoch

    # -- construction ----------------------------------------------------------

    def _schedule(self) -> LrSchedule:
        return LrSchedule(
            self.schedule, self.lr, ratio=self.ratio, factor=self.factor,
            milestones=tuple(self.milestones), period=self.period,
        )

    def _validate_params(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}; choose from {TRAIN_MODES}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if int(self.epochs) < 0 or int(self.batch_bags) < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_bags >= 1")
        if self.backbone is not None and not isinstance(self.backbone, BackboneConfig):
            raise ConfigurationError("backbone must be a BackboneConfig or None")

    def _build(self, bags: Sequence[InstanceBag]) -> None:
        cfg = SATConfig(L=self.L, H=self.H, g=self.g, sigma=self.sigma)
        kind = check_bags(bags)
        rng = substream(self.random_state, STREAM_INIT)
        if kind == "voxel":
            if self.backbone is None:
                raise ConfigurationError("voxel payloads need a backbone configuration")
            self.model_ = NoduleSAT(cfg, backbone_config=self.backbone, rng=rng)
        else:
            self.model_ = NoduleSAT(cfg, feature_dim=bags[0].instances[0].shape[0], rng=rng)
        self.optimizer_ = Adam(self.model_.named_parameters(), lr=self.lr)
        self.payload_kind_ = kind
        self.n_features_in_ = self.model_.feature_dim
        self.classes_ = np.array([0, 1])
        self.epoch_ = 0
        self.history_ = []

    # -- fitting ---------------------------------------------------------------

    def fit(self, X, y=None):
        """Train from scratch on a list of bags. ``y`` is ignored."""
        self._validate_params()
        bags = validate_bags(X)
        self._build(bags)
        return self._run(bags)

    def partial_fit(self, X, y=None):
        """Continue training up to ``epochs`` from the stored epoch counter."""
        bags = validate_bags(X)
        if not hasattr(self, "model_"):
            return self.fit(bags)
        return self._run(bags)

    def _run(self, bags):
        if self.mode != "end-to-end":
            calibrate_backbone_bn(self.model_, bags)
        hist = train_epochs(
            self.model_, self.optimizer_, bags, self._schedule(), int(self.epochs),
            batch_bags=int(self.batch_bags), mode=self.mode, jitter=float(self.jitter),
            voxel_augment=bool(self.voxel_augment), seed=self.random_state,
            start_epoch=self.epoch_, on_epoch=self.on_epoch,
        )
        self.history_.extend(hist)
        self.epoch_ = max(self.epoch_, int(self.epochs))
        self.model_.eval()
        return self

    # -- inference -------------------------------------------------------------

    def predict_bags(self, X):
        check_is_fitted(self, "model_")
        self.model_.eval()
        return self.model_.predict_bags(validate_bags(X))

    def decision_function(self, X) -> np.ndarray:
        """Instance logits, flattened in bag order."""
        preds = self.predict_bags(X)
        return np.concatenate([p.logits for p in preds])

    def predict_proba(self, X) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def transform(self, X) -> np.ndarray:
        """Context-refined instance embeddings (n_instances, H)."""
        check_is_fitted(self, "model_")
        bags = validate_bags(X)
        self.model_.eval()
        rows = []
        with no_grad():
            for start in range(0, len(bags), 64):
                batch = batch_sets(bags[start : start + 64])
                h = self.model_.refine(self.model_.embed(batch), batch.valid).data
                rows.append(h[batch.valid])
        return np.concatenate(rows)

    def score(self, X, y=None, sample_weight=None) -> float:
        """AUC over the supervised instances of ``X``."""
        bags = validate_bags(X)
        z = self.decision_function(bags)
        labels = np.concatenate([b.labels for b in bags])
        sup = np.concatenate([b.mask for b in bags]).astype(bool)
        return auc(z[sup], labels[sup])

    # -- checkpoints -----------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        entries = dict(self.model_.state_dict())
        entries.update(self.optimizer_.state_dict())
        entries["train.epoch"] = np.array([self.epoch_], dtype=np.float64)
        save_checkpoint(path, entries)

    def load(self, path, bags: Sequence[InstanceBag]):
        """Restore weights, optimizer state and epoch counter saved by :meth:`save`.

        ``bags`` only fixes the payload kind and feature width of the model.
        """
        self._validate_params()
        self._build(validate_bags(bags))
        entries = load_checkpoint(path)
        self.model_.load_state_dict({k: v for k, v in entries.items() if not k.startswith(("adam.", "train."))})
        self.optimizer_.load_state_dict({k: v for k, v in entries.items() if k.startswith("adam.")})
        self.epoch_ = int(entries["train.epoch"][0]) if "train.epoch" in entries else 0
        self.model_.eval()
        return self


# -- preprocessing transformers ---------------------------------------------------


def _map_volumes(X, fn):
    if isinstance(X, (Volume, np.ndarray)):
        return fn(X)
    return [fn(v) for v in X]


class HUNormalizer(TransformerMixin, BaseEstimator):
    """Clip to the lung window and scale to [-1, 1]. Stateless."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        def one(v):
            if isinstance(v, Volume):
                return hu_normalize(v)
            return hu_normalize(Volume(np.asarray(v, dtype=np.float64), (1.0, 1.0, 1.0))).voxels

        return _map_volumes(X, one)


class IsotropicResampler(TransformerMixin, BaseEstimator):
    """Trilinear resampling of :class:`Volume` objects to ``spacing`` mm."""

    def __init__(self, spacing=(1.0, 1.0, 1.0)):
        self.spacing = spacing

    def fit(self, X, y=None):
        if len(tuple(self.spacing)) != 3 or min(self.spacing) <= 0:
            raise ConfigurationError(f"spacing must be three positive numbers, got {self.spacing}")
        return self

    def transform(self, X):
        def one(v):
            if not isinstance(v, Volume):
                raise ContractError("IsotropicResampler needs Volume inputs that carry their spacing")
            return resample_trilinear(v, tuple(self.spacing))

        return _map_volumes(X, one)
