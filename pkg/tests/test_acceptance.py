"""End-to-end acceptance criteria, one test per criterion.

Each test appends a single PASS/FAIL line to ``LINES``; conftest prints them
in the terminal summary so the verdicts appear in one block.
"""
import json
import math
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from conftest import gradient_check, tiny_config
from test_model import attention_oracle, pair_params
from test_preprocess import on_some_segment

from vsfusion import model as M
from vsfusion.cli import main
from vsfusion.data import SynthSpec, generate_dataset, make_split_plan
from vsfusion.preprocess import PrepConfig, adasyn, fit_pca, jacobi_eigh
from vsfusion.tensor import Tensor
from vsfusion.training import TrainConfig, cross_entropy_loss, fit, train_fold

LINES: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    LINES.append(line)
    print(line)


def fold0(spec: SynthSpec, template: M.ModelConfig, pconfig=None, max_epochs=100):
    """Train on fold 0 of the standard split and return the fold result."""
    ds = generate_dataset(spec)
    plan = make_split_plan(ds, 0.8, 5, spec.seed)
    tr, va = plan.folds[0]
    return ds, tr, train_fold(ds.subset(tr), ds.subset(va), ds.subset(plan.test), template,
                              TrainConfig(max_epochs=max_epochs), pconfig or PrepConfig(), 0, spec.seed)


SEEDS = (7, 8, 9)


def mean_test_accuracy(spec, modalities, ca):
    accs = [fold0(replace(spec, seed=s), M.ModelConfig(modalities=modalities, cross_attention=ca))[2]
            .test_report.accuracy for s in SEEDS]
    return float(np.mean(accs)), accs


# --- 1 ---------------------------------------------------------------------------------

def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    worst, checked = gradient_check(tiny_config(), seed=0)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    verdict(1, ok, f"{checked} parameter entries, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


# --- 2 ---------------------------------------------------------------------------------

def test_criterion_2_attention():
    rng = np.random.default_rng(11)
    # single key: every softmax row is [1], so each output row is the projected value row
    raw = pair_params(rng, H=3)
    q, kv = rng.standard_normal((5, 4)), rng.standard_normal((1, 4))
    out = M.mha(Tensor(q), Tensor(kv), {k: Tensor(v) for k, v in raw.items()}, "es").data
    value = np.concatenate([kv[0] @ raw["fuse.es.wv"][h] for h in range(3)]) @ raw["fuse.es.wo"] + raw["fuse.es.bo"]
    single = float(np.max(np.abs(out - value)))

    raw1 = pair_params(rng, H=1, dk=2)
    q, kv = rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
    got = M.mha(Tensor(q), Tensor(kv), {k: Tensor(v) for k, v in raw1.items()}, "es").data
    hand = float(np.max(np.abs(got - attention_oracle(q, kv, *raw1.values()))))

    P = {k: Tensor(v) for k, v in pair_params(rng, H=2).items()}
    q, kv = rng.standard_normal((7, 4)), rng.standard_normal((6, 4))
    base = M.pair_weight(Tensor(q), Tensor(kv), P, "es").data
    perm = max(float(np.max(np.abs(M.pair_weight(Tensor(q[rng.permutation(7)]), Tensor(kv[rng.permutation(6)]),
                                                 P, "es").data - base))) for _ in range(100))
    ok = single <= 1e-12 and hand <= 1e-12 and perm <= 1e-12
    verdict(2, ok, f"single-key {single:.1e}, H=1 oracle {hand:.1e}, 100 permutations {perm:.1e} (all <= 1e-12)")
    assert ok


# --- 3 ---------------------------------------------------------------------------------

def test_criterion_3_pca_oracle():
    rng = np.random.default_rng(3)
    worst, monotone = 0.0, True
    for _ in range(20):
        X = rng.standard_normal((50, 8)) @ rng.standard_normal((8, 8))
        model = fit_pca(X, 8)
        Xc = X - X.mean(axis=0)
        w, V = jacobi_eigh(Xc.T @ Xc / 49)
        for r in range(8):
            a, b = model.components[r], V[:, r]
            worst = max(worst, min(np.max(np.abs(a - b)), np.max(np.abs(a + b))))
        worst = max(worst, float(np.max(np.abs(model.explained_variance - w))))
        monotone &= bool(np.all(np.diff(model.explained_variance) <= 0))
    ok = worst <= 1e-8 and monotone
    verdict(3, ok, f"20 matrices 50x8, max deviation from Jacobi {worst:.1e} (<= 1e-8), "
                   f"variances non-increasing: {monotone}")
    assert ok


# --- 4 ---------------------------------------------------------------------------------

def test_criterion_4_adasyn():
    counts = [1451, 2723, 1761, 2275]
    rng = np.random.default_rng(4)
    centres = rng.standard_normal((4, 4)) * 2
    y = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    X = centres[y] + rng.standard_normal((y.size, 4))
    Xr, yr, rep = adasyn(X, y, k=5, beta=1.0, seed=4)
    after = np.bincount(yr, minlength=4)
    within = bool(np.all(after >= 0.9 * max(counts)))
    majority_kept = after[1] == 2723 and np.array_equal(Xr[:y.size], X)

    on_segment, total = 0, 0
    for trial in range(24):
        D = 1 + trial % 4
        sizes = [3 + trial % 5, 12, 7]
        yt = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
        Xt = rng.standard_normal((yt.size, D))
        Xs, ys, _ = adasyn(Xt, yt, k=3, seed=trial)
        for p, c in zip(Xs[yt.size:], ys[yt.size:]):
            total += 1
            on_segment += on_some_segment(p, Xt[yt == c])
    ok = within and majority_kept and total > 0 and on_segment == total
    verdict(4, ok, f"counts {counts} -> {after.tolist()} (within 10% of majority, majority unchanged: "
                   f"{bool(majority_kept)}); segment check {on_segment}/{total} at 1e-9")
    assert ok


# --- 5 ---------------------------------------------------------------------------------

def test_criterion_5_training_sanity():
    start = time.perf_counter()
    spec = SynthSpec(n_classes=4, samples_per_class=100, separation=3.0, seed=7)
    ds, tr, result = fold0(spec, M.ModelConfig(), max_epochs=200)
    train = ds.subset(tr)
    x = result.preprocessor.transform(train)
    train_acc = float(np.mean(np.argmax(M.predict_proba(result.params, x, result.model_config), axis=1)
                              == train.labels))
    held = result.test_report.accuracy
    elapsed = time.perf_counter() - start
    ok = train_acc >= 0.95 and held >= 0.85 and elapsed < 300 and len(result.record.epochs) <= 200
    verdict(5, ok, f"train acc {train_acc:.3f} (>= 0.95) after {len(result.record.epochs)} epochs, "
                   f"held-out {held:.3f} (>= 0.85), {elapsed:.0f}s (< 300s)")
    assert ok


# --- 6 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_ablation_direction():
    # semantic-informative: physiological polarity hinges on a context only the semantic block reveals
    informative = SynthSpec(separation=1.5, context_coupling=True, semantic_informative=True)
    rows = {"trimodal+CA": ("e,p,s", True), "trimodal-noCA": ("e,p,s", False),
            "EM+PPG": ("e,p", True), "EM+VSI": ("e,s", True), "PPG+VSI": ("p,s", True)}
    acc = {name: mean_test_accuracy(informative, *cfg)[0] for name, cfg in rows.items()}
    top = acc["trimodal+CA"]
    bimodal_ok = all(top >= acc[b] for b in ("EM+PPG", "EM+VSI", "PPG+VSI"))
    gap = top - acc["trimodal-noCA"]

    # semantic-uninformative: class-independent semantic block
    plain = SynthSpec(separation=1.5, samples_per_class=250, semantic_informative=False)
    with_sem = mean_test_accuracy(plain, "e,p,s", True)[0]
    without = mean_test_accuracy(plain, "e,p", True)[0]
    change = abs(with_sem - without)

    ok = bimodal_ok and gap >= 0.03 and change < 0.03
    table = ", ".join(f"{k} {v:.3f}" for k, v in acc.items())
    verdict(6, ok, f"informative: {table}; CA gap {gap * 100:.1f} pts (>= 3); uninformative: "
                   f"trimodal+CA {with_sem:.3f} vs EM+PPG {without:.3f}, change {change * 100:.1f} pts (< 3)")
    assert ok


# --- 7 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_imbalance():
    spec = SynthSpec(separation=0.5, class_counts=[200, 200, 200, 50])
    aucs = {}
    for on in (False, True):
        aucs[on] = float(np.mean([fold0(replace(spec, seed=s), M.ModelConfig(), PrepConfig(adasyn=on))[2]
                                  .test_report.auc(3) for s in SEEDS]))
    gain = aucs[True] - aucs[False]
    ok = gain >= 0.05
    verdict(7, ok, f"minority AUC without ADASYN {aucs[False]:.3f}, with {aucs[True]:.3f}, "
                   f"gain {gain:.3f} (>= 0.05)")
    assert ok


# --- 8 ---------------------------------------------------------------------------------

def test_criterion_8_protocol_fidelity():
    # a vanishing learning rate keeps the monitored loss flat from epoch 1
    ds = generate_dataset(SynthSpec(n_classes=3, samples_per_class=8, eye_dim=3, ppg_dim=2, semantic_dim=3,
                                    eye_len=2, ppg_len=2, semantic_len=2, seed=0))
    x = {m: ds.stack(m) for m in ("eye", "ppg", "semantic")}
    _, rec = fit(x, ds.labels, x, ds.labels, tiny_config(), TrainConfig(learning_rate=1e-300, max_epochs=50))
    lrs = rec.lr_history
    decay_ok = lrs[:6] == [1e-300] * 6 and lrs[6] == 1e-300 * 0.1
    stop_ok = len(rec.epochs) == 11 and rec.stop_reason == "early_stop"

    loss = cross_entropy_loss(Tensor(np.full((8, 4), 0.25)), np.arange(8) % 4).item()
    ln4 = abs(loss - math.log(4))

    counts = [37, 81, 52, 66]
    imb = generate_dataset(SynthSpec(class_counts=counts, eye_len=1, ppg_len=1, semantic_len=1, semantic_dim=4))
    plan = make_split_plan(imb, 0.8, 5, 7)
    label = dict(zip(imb.ids, imb.labels))
    train = set(id_ for fold in plan.folds for id_ in fold[1])
    partition = (train | set(plan.test) == set(imb.ids) and not train & set(plan.test)
                 and sum(len(v) for _, v in plan.folds) == len(train))
    strat = True
    per_class = Counter(label[i] for i in train)
    for tr, va in plan.folds:
        partition &= not set(tr) & set(va) and set(tr) | set(va) == train
        got = Counter(label[i] for i in va)
        strat &= all(abs(got[c] - per_class[c] / 5) <= 1 for c in per_class)
    ok = decay_ok and stop_ok and ln4 <= 1e-9 and partition and strat
    verdict(8, ok, f"decay after 5 stagnant epochs x0.1: {decay_ok}; early stop at epoch {len(rec.epochs)}: "
                   f"{stop_ok}; |loss - ln 4| = {ln4:.1e}; folds partition {partition}, stratified +-1 {strat}")
    assert ok


# --- 9 ---------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "data"), "--per-class", "20"]) == 0
    manifest = capsys.readouterr().out.strip()
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifest": manifest, "train": {"max_epochs": 3}, "cv": {"k": 3}}))
    runs = []
    for out in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
        runs.append(capsys.readouterr().out.strip())
    blobs = [open(f"{r}/aggregate.json", "rb").read() for r in runs]
    ok = blobs[0] == blobs[1]
    verdict(9, ok, f"two train runs -> aggregate.json {len(blobs[0])} bytes, byte-identical: {ok}")
    assert ok
