"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The learning experiments (criteria 2 and 3) take several minutes on one core.
"""

import time

import numpy as np
import pytest

from nodulesat.attention import SATConfig, SetAttentionTransformer, param_count_ratio, sat_forward
from nodulesat.backbone import TINY_BACKBONE
from nodulesat.estimator import NoduleSATClassifier
from nodulesat.metrics import Candidate, auc, froc
from nodulesat.mil import InstanceBag, NoduleSAT, batch_sets, masked_bce, nodulesat_forward, train_bag_batch
from nodulesat.nn import Adam, Tensor, grad_check, no_grad
from nodulesat.preprocess import Volume, hu_normalize, resample_trilinear
from nodulesat.synth import SynthSpec, generate_bags
from nodulesat.verify import _auc_oracle, _froc_oracle


def relational_split(seed_train, seed_test, mask_fraction):
    spec = dict(n_min=2, n_max=8, n_keys=8, feature_dim=64, noise=0.1, mask_fraction=mask_fraction)
    return (
        generate_bags(SynthSpec(n_bags=2000, seed=seed_train, **spec)),
        generate_bags(SynthSpec(n_bags=500, seed=seed_test, **spec)),
    )


def supervised_auc(est, bags):
    z = est.decision_function(bags)
    y = np.concatenate([b.labels for b in bags])
    m = np.concatenate([b.mask for b in bags]).astype(bool)
    return auc(z[m], y[m])


def verdict(ok):
    return "PASS" if ok else "FAIL"


def test_criterion_1_paper_scale(report_criterion):
    report_criterion(1, "N/A", "paper-scale CT results need the full corpora; substituted by criteria 2-9")
    pytest.skip("paper-scale results are out of reach at desk scale")


@pytest.mark.slow
def test_criterion_2_relational_gain(report_criterion):
    train, test = relational_split(1, 2, 0.0)
    baseline = NoduleSATClassifier(L=0, H=64, g=8, epochs=100, random_state=0).fit(train)
    base_auc = supervised_auc(baseline, test)
    t0 = time.perf_counter()
    model = NoduleSATClassifier(L=3, H=64, g=8, epochs=100, random_state=0).fit(train)
    minutes = (time.perf_counter() - t0) / 60
    sat_auc = supervised_auc(model, test)
    ok = base_auc <= 0.55 and sat_auc >= 0.90 and model.epoch_ <= 200 and minutes <= 15
    report_criterion(
        2, verdict(ok),
        f"solitary AUC {base_auc:.4f} (<=0.55), SAT AUC {sat_auc:.4f} (>=0.90), "
        f"{model.epoch_} epochs, {minutes:.1f} min (<=15)",
    )
    assert ok


@pytest.mark.slow
def test_criterion_3_masked_context(report_criterion):
    context, removed = [], []
    for seed in range(5):
        train, test = relational_split(100 + seed, 200 + seed, 0.4)
        est = NoduleSATClassifier(epochs=30, period=12, random_state=seed).fit(train)
        context.append(supervised_auc(est, test))
        strip = lambda bags: [b.subset(b.mask == 1) for b in bags if b.mask.any()]
        est = NoduleSATClassifier(epochs=30, period=12, random_state=seed).fit(strip(train))
        removed.append(supervised_auc(est, strip(test)))
    margin = float(np.mean(context) - np.mean(removed))
    ok = margin >= 0.03
    report_criterion(
        3, verdict(ok),
        f"context AUC {np.mean(context):.4f} vs removed {np.mean(removed):.4f}, "
        f"margin {margin:.4f} (>=0.03, 5 seeds; per seed {[round(c - r, 3) for c, r in zip(context, removed)]})",
    )
    assert ok


def test_criterion_4_permutation_equivariance(report_criterion):
    rng = np.random.default_rng(4)
    sat = SetAttentionTransformer(SATConfig(L=3, H=64, g=8), rng)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 33))
        x = rng.normal(size=(n, 64))
        perm = rng.permutation(n)
        with no_grad():
            a = sat_forward(Tensor(x[perm]), sat, mode="train").data
            b = sat_forward(Tensor(x), sat, mode="train").data[perm]
        worst = max(worst, float(np.abs(a - b).max()))
    ok = worst < 1e-6
    report_criterion(4, verdict(ok), f"max deviation {worst:.2e} over 100 bags (<1e-6)")
    assert ok


def test_criterion_5_gradient_fidelity(report_criterion):
    rng = np.random.default_rng(5)
    model = NoduleSAT(SATConfig(L=2, H=8, g=2), backbone_config=TINY_BACKBONE, rng=rng)
    bag = InstanceBag("v", list(rng.normal(size=(3, 8, 8, 8))), [1, 0, 1], [1, 1, 0])
    batch = batch_sets([bag])
    model.train()
    err = grad_check(lambda *ps: masked_bce(model.forward_batch(batch), batch.labels, batch.supervised), model.parameters())
    ok = err < 1e-4
    report_criterion(5, verdict(ok), f"max relative error {err:.2e} over {sum(p.size for p in model.parameters())} parameters (<1e-4)")
    assert ok


def test_criterion_6_parameter_ratio(report_criterion):
    ratios = {(c, g): param_count_ratio(c, g) for c, g in ((64, 1), (128, 4), (256, 8))}
    ok = all(r == 4 * g and r.denominator == 1 for (c, g), r in ratios.items())
    report_criterion(6, verdict(ok), " ".join(f"(c={c},g={g})->{r}" for (c, g), r in ratios.items()))
    assert ok


def test_criterion_7_metric_oracles(report_criterion):
    rng = np.random.default_rng(7)
    froc_bad = auc_bad = 0
    for _ in range(100):
        n = int(rng.integers(1, 51))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        truth = rng.random(n) < 0.4
        truth[0] = True
        cands = [
            Candidate(f"s{i % 4}", (0.0, 0.0, 0.0), float(s), bool(t), f"n{rng.integers(8)}" if t else None)
            for i, (s, t) in enumerate(zip(scores, truth))
        ]
        froc_bad += froc(cands, 4).cpm != _froc_oracle(cands, 4)
        labels = rng.integers(0, 2, max(n, 2))
        labels[:2] = [0, 1]
        s2 = np.round(rng.random(len(labels)), 1)
        auc_bad += auc(s2, labels) != _auc_oracle(s2, labels)
    worked = [
        Candidate("s0", (0, 0, 0), 0.9, True, "A"),
        Candidate("s1", (0, 0, 0), 0.4, True, "B"),
        Candidate("s0", (0, 0, 0), 0.8, False),
        Candidate("s1", (0, 0, 0), 0.6, False),
        Candidate("s0", (0, 0, 0), 0.3, False),
    ]
    worked_cpm = froc(worked, 2).cpm
    ok_worked = abs(worked_cpm - 0.6429) <= 1e-4
    ok = froc_bad == 0 and auc_bad == 0 and ok_worked
    report_criterion(
        7, verdict(ok),
        f"froc oracle mismatches {froc_bad}/100, auc mismatches {auc_bad}/100, "
        f"worked 2-scan cpm {worked_cpm:.4f} (target 0.6429 +-1e-4)",
    )
    assert ok


def test_criterion_8_preprocessing(report_criterion):
    hu = hu_normalize(Volume(np.array([-1024.0, -312.0, 400.0, 2000.0]).reshape(1, 1, 4))).voxels.ravel()
    f = lambda x, y, z: 2 * x - y + 0.5 * z
    axes = [(np.arange(4) + 0.5) * 2.0] * 3
    src = Volume(f(*np.meshgrid(*axes, indexing="ij")), (2.0, 2.0, 2.0))
    out = resample_trilinear(src, (1.0, 1.0, 1.0))
    pts = np.meshgrid(*[np.arange(8) + 0.5] * 3, indexing="ij")
    interior = (slice(1, 7),) * 3
    err = float(np.abs(out.voxels - f(*pts))[interior].max())
    ok_hu = np.allclose(hu, [-1, 0, 1, 1], rtol=0, atol=1e-12)
    ok = ok_hu and err <= 1e-10 and out.dims == (8, 8, 8) and out.spacing == (1.0, 1.0, 1.0)
    report_criterion(
        8, verdict(ok), f"hu {np.round(hu, 12).tolist()}, linear-field error {err:.1e} (<=1e-10), dims {out.dims}"
    )
    assert ok


def test_criterion_9_padding_and_masked_loss(report_criterion):
    rng = np.random.default_rng(9)
    model = NoduleSAT(SATConfig(L=2, H=16, g=4), feature_dim=12, rng=rng)
    bags = [
        InstanceBag(f"b{i}", list(rng.normal(size=(n, 12))), rng.integers(0, 2, n), rng.integers(0, 2, n))
        for i, n in enumerate((1, 4, 9, 2))
    ]
    model.train()
    with no_grad():
        model.forward_batch(batch_sets(bags))
    model.eval()
    together = model.predict_bags(bags)
    pad_dev = max(float(np.abs(p.logits - nodulesat_forward(b, model).logits).max()) for p, b in zip(together, bags))

    z = Tensor(rng.normal(size=16), requires_grad=True)
    mask = rng.integers(0, 2, 16)
    mask[0] = 1
    masked_bce(z, rng.integers(0, 2, 16), mask).backward()
    leak = float(np.abs(z.grad[mask == 0]).max()) if (mask == 0).any() else 0.0

    model.train()
    silent = [InstanceBag("q", list(rng.normal(size=(3, 12))), [1, 0, 1], [0, 0, 0])]
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = Adam(model.named_parameters(), lr=0.1)
    loss = train_bag_batch(silent, model, opt)
    unchanged = all(np.array_equal(before[k], v) for k, v in model.state_dict().items())

    ok = pad_dev < 1e-6 and leak == 0.0 and loss == 0.0 and unchanged
    report_criterion(
        9, verdict(ok),
        f"batched-vs-solo deviation {pad_dev:.1e} (<1e-6), masked-logit gradient {leak:g}, "
        f"all-masked loss {loss:g}, parameters unchanged {unchanged}",
    )
    assert ok
