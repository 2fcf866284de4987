"""Release-gate property suite: each property returns (passed, detail).

Used by ``nodulesat verify`` and ``nodulesat gradcheck``. Sizes are kept
small so the whole suite runs in well under a minute on one core.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import SATConfig, SetAttentionTransformer, gsa_forward, GSALayer, param_count_ratio, sat_forward
from .backbone import TINY_BACKBONE
from .metrics import Candidate, auc, froc
from .mil import InstanceBag, NoduleSAT, batch_sets, masked_bce, nodulesat_forward
from .nn.gradcheck import grad_check
from .nn.tensor import Tensor, no_grad
from .preprocess import Volume, hu_normalize, resample_trilinear

GRAD_TOL = 1e-4
EQUIV_TOL = 1e-6


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def prop_equivariance(trials: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    sat = SetAttentionTransformer(SATConfig(L=3, H=16, g=4), rng)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 33))
        x = rng.normal(size=(n, 16))
        perm = rng.permutation(n)
        with no_grad():
            a = sat_forward(Tensor(x[perm]), sat, mode="train").data
            b = sat_forward(Tensor(x), sat, mode="train").data[perm]
        worst = max(worst, float(np.abs(a - b).max()))
    return worst < EQUIV_TOL, f"max deviation {worst:.3e} over {trials} bags"


def prop_gsa_gradient(seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    layer = GSALayer(8, 2, rng)
    x = Tensor(rng.normal(size=(5, 8)))
    probe = Tensor(rng.normal(size=(5, 8)))
    err = grad_check(lambda *ps: (gsa_forward(x, layer, mode="train") * probe).sum(), [x] + layer.parameters())
    return err < GRAD_TOL, f"max relative error {err:.3e}"


def prop_sat_loss_gradient(seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = NoduleSAT(SATConfig(L=2, H=8, g=2), feature_dim=8, rng=rng)
    bag = InstanceBag("g", list(rng.normal(size=(3, 8))), [1, 0, 1], [1, 1, 1])
    batch = batch_sets([bag])
    model.train()
    err = grad_check(lambda *ps: masked_bce(model.forward_batch(batch), batch.labels, batch.supervised), model.parameters())
    return err < GRAD_TOL, f"max relative error {err:.3e}"


def prop_full_model_gradient(seed: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = NoduleSAT(SATConfig(L=2, H=8, g=2), backbone_config=TINY_BACKBONE, rng=rng)
    bag = InstanceBag("v", list(rng.normal(size=(3, 8, 8, 8))), [1, 0, 1], [1, 1, 0])
    batch = batch_sets([bag])
    model.train()
    err = grad_check(lambda *ps: masked_bce(model.forward_batch(batch), batch.labels, batch.supervised), model.parameters())
    return err < GRAD_TOL, f"max relative error {err:.3e}"


def prop_param_ratio() -> tuple[bool, str]:
    parts, ok = [], True
    for c, g in ((64, 1), (128, 4), (256, 8)):
        r = param_count_ratio(c, g)
        ok &= r == 4 * g
        parts.append(f"(c={c},g={g})->{r}")
    return ok, " ".join(parts)


def prop_padding_neutrality(seed: int = 4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = NoduleSAT(SATConfig(L=2, H=8, g=2), feature_dim=8, rng=rng)
    bags = [
        InstanceBag(f"b{i}", list(rng.normal(size=(n, 8))), np.zeros(n), np.ones(n)) for i, n in enumerate((1, 3, 6))
    ]
    model.train()
    with no_grad():
        model.forward_batch(batch_sets(bags))
    model.eval()
    together = model.predict_bags(bags)
    worst = max(
        float(np.abs(p.logits - nodulesat_forward(b, model, mode="eval").logits).max()) for p, b in zip(together, bags)
    )
    return worst < EQUIV_TOL, f"max batched-vs-solo deviation {worst:.3e}"


def prop_masked_loss(seed: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=12), requires_grad=True)
    mask = np.array([1, 0] * 6)
    masked_bce(z, rng.integers(0, 2, 12), mask).backward()
    leak = float(np.abs(z.grad[mask == 0]).max())
    z2 = Tensor(rng.normal(size=4), requires_grad=True)
    loss = masked_bce(z2, np.ones(4), np.zeros(4))
    loss.backward()
    ok = leak == 0.0 and loss.item() == 0.0 and not z2.grad.any()
    return ok, f"masked gradient {leak:g}, all-masked loss {loss.item():g}"


def _froc_oracle(cands, n_scans):
    """Enumerate every cutoff directly from the definition."""
    nodules = {c.nodule_id for c in cands if c.is_nodule}
    pts = []
    for t in sorted({c.score for c in cands}, reverse=True):
        hit = {c.nodule_id for c in cands if c.is_nodule and c.score >= t}
        fp = sum(1 for c in cands if not c.is_nodule and c.score >= t)
        pts.append((fp / n_scans, len(hit) / len(nodules)))
    sens = []
    for target in (0.125, 0.25, 0.5, 1, 2, 4, 8):
        ok = [p for p in pts if p[0] <= target]
        if not ok:
            sens.append(0.0)
            continue
        far = max(p[0] for p in ok)
        sens.append(max(s for f, s in ok if f == far))
    return sum(sens) / 7


def _auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def prop_metric_oracles(trials: int = 100, seed: int = 6) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        truth = rng.random(n) < 0.4
        truth[0] = True
        cands = [
            Candidate(f"s{i % 3}", (0.0, 0.0, 0.0), float(s), bool(t), f"n{rng.integers(0, 5)}" if t else None)
            for i, (s, t) in enumerate(zip(scores, truth))
        ]
        if froc(cands, 3).cpm != _froc_oracle(cands, 3):
            bad += 1
        labels = (rng.random(n) < 0.5).astype(int)
        labels[0], labels[1] = 0, 1
        if auc(scores, labels) != _auc_oracle(scores, labels):
            bad += 1
    return bad == 0, f"{bad} mismatches over {trials} random instances"


def prop_preprocessing() -> tuple[bool, str]:
    hu = hu_normalize(Volume(np.array([-1024.0, -312.0, 400.0, 2000.0]).reshape(1, 1, 4), (1, 1, 1))).voxels.ravel()
    ok_hu = np.allclose(hu, [-1, 0, 1, 1], atol=1e-12)
    i, j, k = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    # linear field in physical coordinates of voxel centres at (idx + 0.5) * spacing
    f = lambda x, y, z: 0.3 * x - 1.2 * y + 0.7 * z + 2.0
    src = Volume(f((i + 0.5) * 2, (j + 0.5) * 2, (k + 0.5) * 2), (2.0, 2.0, 2.0))
    out = resample_trilinear(src, (1.0, 1.0, 1.0))
    a, b, c = np.meshgrid(*(np.arange(8) + 0.5,) * 3, indexing="ij")
    interior = (slice(1, 7),) * 3  # edge clamp holds the field constant past the outer centres
    err = float(np.abs(out.voxels[interior] - f(a, b, c)[interior]).max())
    ok = ok_hu and out.voxels.shape == (8, 8, 8) and err <= 1e-10
    return ok, f"hu={hu.tolist()} shape={out.voxels.shape} linear-field error {err:.1e}"


PROPERTIES: dict[str, Callable[[], tuple[bool, str]]] = {
    "permutation-equivariance": prop_equivariance,
    "gsa-gradient": prop_gsa_gradient,
    "sat-loss-gradient": prop_sat_loss_gradient,
    "full-model-gradient": prop_full_model_gradient,
    "param-ratio": prop_param_ratio,
    "padding-neutrality": prop_padding_neutrality,
    "masked-loss": prop_masked_loss,
    "metric-oracles": prop_metric_oracles,
    "preprocessing": prop_preprocessing,
}
GRADIENT_PROPERTIES = ("gsa-gradient", "sat-loss-gradient", "full-model-gradient")


def run_properties(names=None) -> list[PropertyResult]:
    out = []
    for name in names or PROPERTIES:
        try:
            passed, detail = PROPERTIES[name]()
        except Exception as exc:  # a crash is a failure, reported on its own line
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(PropertyResult(name, bool(passed), detail))
    return out
