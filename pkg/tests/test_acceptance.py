"""Acceptance suite: every binding criterion with its stated tolerance.

Each test prints one PASS line on success (run with `pytest -v -s` to watch
them stream); thresholds and instance seeds are frozen here, not tuned at
run time. The end-to-end thresholds ride on synthetic streams whose
separability ceiling is ~1.0 by construction.
"""

import time

import numpy as np
import pytest

from protostream.data import synth_stream
from protostream.evaluation import hungarian
from protostream.classifier import (
    ClassCenters,
    align_loss,
    init_projector,
    joint_table,
)
from protostream.memory import old_loss, sep_loss
from protostream.prototypes import PrototypeSet, log_posterior, proto_loss
from protostream.sinkhorn import sinkhorn_balanced
from protostream.trainer import TrainConfig, grad_check, load_checkpoint, run_stream

from conftest import unit_rows
from oracles import (
    align_loss_loops,
    hungarian_brute,
    old_loss_loops,
    proto_loss_loops,
    sep_loss_loops,
    sinkhorn_reference,
)


def report(name, detail=""):
    print(f"ACCEPTANCE {name}: PASS {detail}")


def test_gradient_oracle():
    start = time.time()
    worst = 0.0
    for seed in range(20):
        result = grad_check(seed)
        assert result["passed"], f"seed {seed}: {result['errors']}"
        worst = max(worst, max(result["errors"].values()))
    elapsed = time.time() - start
    assert elapsed < 30.0
    report("gradient-oracle", f"(20 instances, max rel err {worst:.2e}, {elapsed:.1f}s)")


def test_sinkhorn_correctness():
    start = time.time()
    for seed in range(50):
        rng = np.random.default_rng(seed)
        r = int(rng.integers(2, 30))
        n = int(rng.integers(2, 60))
        log_p = rng.uniform(-30, 0, size=(r, n))
        plan = sinkhorn_balanced(log_p, 0.05, 3)
        np.testing.assert_allclose(plan.q.sum(axis=0), 1.0 / n, rtol=1e-12)
        devs = [sinkhorn_balanced(log_p, 0.05, iters).max_row_dev for iters in range(1, 8)]
        assert all(b <= a + 1e-12 for a, b in zip(devs, devs[1:]))
    rng = np.random.default_rng(99)
    for r in range(1, 5):
        for n in range(1, 5):
            log_p = rng.uniform(-5, 0, size=(r, n))
            plan = sinkhorn_balanced(log_p, 0.5, 1000)
            np.testing.assert_allclose(plan.q, sinkhorn_reference(log_p, 0.5, 1000), atol=1e-5)
    elapsed = time.time() - start
    assert elapsed < 10.0
    report("sinkhorn-correctness", f"({elapsed:.1f}s)")


def test_hungarian_optimality():
    start = time.time()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 8))
        cost = rng.uniform(0, 10, size=(k, k))
        perm = hungarian(cost)
        total = float(cost[np.arange(k), perm].sum())
        best, _ = hungarian_brute(cost)
        assert total == pytest.approx(best, abs=1e-9)
    elapsed = time.time() - start
    assert elapsed < 10.0
    report("hungarian-optimality", f"(100 instances, {elapsed:.1f}s)")


def test_loss_oracles():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, r, k_old, k_new, d, m = 8, 5, 2, 3, 8, 4
        z = unit_rows(rng, n, d)
        protos = PrototypeSet(mu=unit_rows(rng, r, d),
                              log_sigma=rng.uniform(np.log(0.5), np.log(1.5), size=r))
        w_target = rng.dirichlet(np.ones(r), size=n)
        log_p = log_posterior(z, protos)
        assert proto_loss(w_target, log_p) == pytest.approx(
            proto_loss_loops(w_target, log_p), abs=1e-6)

        y = rng.dirichlet(np.ones(k_new), size=n)
        joint = joint_table(w_target, y)
        assert align_loss(joint, 4.0) == pytest.approx(align_loss_loops(joint.j, 4.0), abs=1e-6)

        proj = init_projector(d, 8, m, rng.integers(2**32))
        centers = ClassCenters(c=unit_rows(rng, k_old + k_new, m), counts=[k_old, k_new], tau=0.1)
        y_old = rng.integers(0, k_old, size=n)
        assert old_loss(z, y_old, proj, centers) == pytest.approx(
            old_loss_loops(z, y_old, proj, centers), abs=1e-6)
        assert sep_loss(z, proj, centers) == pytest.approx(
            sep_loss_loops(z, proj, centers), abs=1e-6)
    report("loss-oracles", "(10 seeded instances, 4 losses, tol 1e-6)")


def test_end_to_end_discovery(tmp_path):
    start = time.time()
    result = synth_stream(tmp_path, tasks=1, classes_per_task=5, dim=128,
                          train_per_class=200, test_per_class=50, spread=0.03, seed=7)
    _, reports = run_stream(result.manifest, TrainConfig.desk_profile(seed=1))
    elapsed = time.time() - start
    assert reports[-1].acc_overall >= 0.95
    assert elapsed < 180.0
    report("end-to-end-discovery", f"(acc {reports[-1].acc_overall:.4f}, {elapsed:.0f}s)")


def test_end_to_end_continual(tmp_path):
    start = time.time()
    result = synth_stream(tmp_path, tasks=5, classes_per_task=5, dim=128,
                          train_per_class=200, test_per_class=50, spread=0.03, seed=7)
    _, reports = run_stream(result.manifest, TrainConfig.desk_profile(seed=1))
    elapsed = time.time() - start
    final = reports[-1]
    assert final.acc_overall >= 0.90
    assert final.forgetting <= 0.05
    assert elapsed < 900.0
    report("end-to-end-continual",
           f"(acc {final.acc_overall:.4f}, forgetting {final.forgetting:.4f}, {elapsed:.0f}s)")


def test_ablation_granularity(tmp_path):
    # one prototype per class versus 10x: fine-grained must win on average
    coarse, fine = [], []
    for i in range(5):
        result = synth_stream(tmp_path / f"s{i}", tasks=1, classes_per_task=5, dim=32,
                              train_per_class=200, test_per_class=50, spread=0.25, seed=100 + i)
        for pnum, sink in [(5, coarse), (50, fine)]:
            cfg = TrainConfig.desk_profile(seed=i, pnum=pnum)
            _, reports = run_stream(result.manifest, cfg)
            sink.append(reports[-1].acc_overall)
    assert np.mean(coarse) < np.mean(fine)
    report("ablation-granularity",
           f"(pnum=k mean {np.mean(coarse):.3f} < pnum=10k mean {np.mean(fine):.3f}, 5 seeds)")


def test_ablation_replay(tmp_path):
    diffs = []
    for i in range(5):
        result = synth_stream(tmp_path / f"s{i}", tasks=5, classes_per_task=5, dim=128,
                              train_per_class=200, test_per_class=50, spread=0.03, seed=300 + i)
        forgetting = {}
        for enabled in (True, False):
            cfg = TrainConfig.desk_profile(
                seed=i, replay_enabled=enabled, lambda_old=10.0 if enabled else 0.0)
            _, reports = run_stream(result.manifest, cfg)
            forgetting[enabled] = reports[-1].forgetting
        diffs.append(forgetting[False] - forgetting[True])
    assert np.mean(diffs) >= 0.10
    report("ablation-replay", f"(mean forgetting increase {np.mean(diffs):.3f}, 5 seeds)")


def test_ablation_fixed_sigma(tmp_path):
    outcomes = []
    for i in range(5):
        result = synth_stream(tmp_path / f"s{i}", tasks=1, classes_per_task=5, dim=32,
                              train_per_class=200, test_per_class=50, spread=0.18, seed=200 + i)
        acc = {}
        for trainable in (True, False):
            cfg = TrainConfig.desk_profile(seed=i, sigma_trainable=trainable)
            _, reports = run_stream(result.manifest, cfg)
            acc[trainable] = reports[-1].acc_overall
        outcomes.append(acc[False] <= acc[True])
    assert sum(outcomes) >= 3
    report("ablation-fixed-sigma", f"(fixed <= trainable on {sum(outcomes)}/5 seeds)")


def test_determinism_and_checkpoint_fidelity(tmp_path):
    result = synth_stream(tmp_path / "data", tasks=2, classes_per_task=3, dim=32,
                          train_per_class=60, test_per_class=30, spread=0.03, seed=13)
    cfg = TrainConfig.desk_profile(seed=3, pnum=20, epochs=10, batch_size=64,
                                   proj_hidden=64, proj_out=16)

    state_a, _ = run_stream(result.manifest, cfg)
    state_b, _ = run_stream(result.manifest, cfg)
    assert state_a.metrics == state_b.metrics
    assert state_a.centers.c.tobytes() == state_b.centers.c.tobytes()
    assert state_a.projector.w1.tobytes() == state_b.projector.w1.tobytes()

    out = tmp_path / "run"
    run_stream(result.manifest, cfg, out, stop_after=1)
    resumed, cfg_loaded = load_checkpoint(out / "checkpoint.psck")
    state_c, _ = run_stream(result.manifest, cfg_loaded, resume=resumed)
    assert state_a.metrics == state_c.metrics
    assert state_a.centers.c.tobytes() == state_c.centers.c.tobytes()
    assert state_a.projector.w1.tobytes() == state_c.projector.w1.tobytes()
    for s_a, s_c in zip(state_a.memory.stats, state_c.memory.stats):
        assert s_a.mean.tobytes() == s_c.mean.tobytes()
        assert s_a.var.tobytes() == s_c.var.tobytes()
    report("determinism-and-checkpoint", "(bit-identical repeat and resume)")
