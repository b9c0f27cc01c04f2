"""Acceptance suite: one test per criterion, each printing a PASS line.

The desk-scale experiment (criteria 7 and 8) trains the full mode grid on
a self-contained synthetic dataset; its runs are shared through a session
fixture and executed in parallel worker processes.
"""

import concurrent.futures
import dataclasses
import json
import time

import numpy as np
import pytest

from admt.autodiff import (
    Tape,
    Tensor,
    add,
    add_const,
    backward,
    conv2d,
    div,
    log,
    mul,
    mul_const,
    relu,
    scale,
    softmax_channels,
    sub,
    sum_all,
    sum_axes,
)
from admt.cli import main, run_train
from admt.config import config_from_dict
from admt.data import generate_dataset
from admt.metrics import dice_jaccard, surface_distances
from admt.model import SegModel, ema_update, sgd_step
from admt.training import RpaState, Trainer, ccm_fuse, dice_ce_loss
from oracles import all_pairs_surface, ccm_pixel, finite_difference, rel_err


def ok(criterion, detail):
    print(f"PASS criterion {criterion}: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: gradient suite


def _fd_many(make_case, n_cases, tol, step=1e-5):
    worst = 0.0
    for i in range(n_cases):
        build, params = make_case(np.random.default_rng(1000 + i))
        tape, loss = build()
        backward(tape, loss)
        for t in params:
            num = finite_difference(lambda: build()[1].item(), t.data, step=step)
            worst = max(worst, float(rel_err(t.grad, num).max()))
    assert worst <= tol, f"worst rel err {worst:.2e} > {tol}"
    return worst


def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = {}

    def conv_case(rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        k = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        w = rng.standard_normal((1, 2, 3, 3))

        def build():
            with Tape() as tape:
                loss = sum_all(mul_const(conv2d(x, k, b), w))
            return tape, loss

        return build, [x, k, b]

    results["conv2d"] = _fd_many(conv_case, 20, 1e-5)

    def relu_case(rng):
        # keep values off the kink
        x = Tensor(np.sign(rng.standard_normal(16)) * (0.3 + rng.random(16)), requires_grad=True)
        w = rng.standard_normal(16)

        def build():
            with Tape() as tape:
                loss = sum_all(mul_const(relu(x), w))
            return tape, loss

        return build, [x]

    results["relu"] = _fd_many(relu_case, 20, 1e-5)

    def softmax_case(rng):
        x = Tensor(rng.standard_normal((1, 3, 2, 2)) * 2, requires_grad=True)
        w = rng.standard_normal((1, 3, 2, 2))

        def build():
            with Tape() as tape:
                loss = sum_all(mul_const(softmax_channels(x), w))
            return tape, loss

        return build, [x]

    results["softmax"] = _fd_many(softmax_case, 20, 1e-5)

    def elementwise_case(rng):
        a = Tensor(rng.random(10) + 0.5, requires_grad=True)
        b = Tensor(rng.random(10) + 0.5, requires_grad=True)

        def build():
            with Tape() as tape:
                y = add(mul(a, b), div(a, b))
                y = sub(add_const(scale(y, 0.7), 0.1), log(a))
                loss = sum_all(mul(y, y))
            return tape, loss

        return build, [a, b]

    results["elementwise"] = _fd_many(elementwise_case, 20, 1e-5)

    def sum_axes_case(rng):
        x = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        w = rng.standard_normal(3)

        def build():
            with Tape() as tape:
                loss = sum_all(mul_const(sum_axes(x, (0, 2, 3)), w))
            return tape, loss

        return build, [x]

    results["sum_axes"] = _fd_many(sum_axes_case, 20, 1e-5)

    def composite_case(rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        k1 = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.6, requires_grad=True)
        b1 = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        k2 = Tensor(rng.standard_normal((3, 3, 3, 3)) * 0.4, requires_grad=True)
        b2 = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        targets = rng.integers(0, 3, (1, 4, 4))
        valid = rng.random((1, 4, 4)) < 0.85

        def build():
            with Tape() as tape:
                h = relu(conv2d(x, k1, b1))
                probs = softmax_channels(conv2d(h, k2, b2))
                loss = dice_ce_loss(probs, targets, valid)
            return tape, loss

        return build, [x, k1, b1, k2, b2]

    results["dice_ce_composite"] = _fd_many(composite_case, 20, 1e-3)

    elapsed = time.time() - t0
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items())
    ok(1, f"20 FD instances per op in {elapsed:.1f}s; worst rel err: {detail}")


# ---------------------------------------------------------------------------
# criterion 2: CCM oracle


def test_criterion_2_ccm_bit_identical_to_oracle():
    rng = np.random.default_rng(2024)
    total = 0
    branches = {"conflict": 0, "agree": 0, "student": 0, "ensemble": 0,
                "valid": 0, "invalid": 0}
    for tau in (0.3, 0.5, 0.7, 0.9, 0.95):
        raw = rng.random((1, 4, 20, 50)) ** 2 + 1e-9
        half = raw / raw.sum(axis=1, keepdims=True)
        q1 = np.concatenate([half, half], axis=3)  # right half repeats the left
        raw2 = rng.random(q1.shape) ** 2 + 1e-9
        q2 = raw2 / raw2.sum(axis=1, keepdims=True)
        q2[0, :, :, 50:] = q1[0, :, :, 50:]  # forced agreement region
        raws = rng.random(q1.shape) ** 3 + 1e-9
        qs = raws / raws.sum(axis=1, keepdims=True)

        plb = ccm_fuse(q1, q2, qs, tau)
        conflict = np.argmax(q1, axis=1) != np.argmax(q2, axis=1)
        for m in range(q1.shape[0]):
            for i in range(q1.shape[2]):
                for j in range(q1.shape[3]):
                    hard, valid, source = ccm_pixel(
                        q1[m, :, i, j], q2[m, :, i, j], qs[m, :, i, j], tau
                    )
                    assert plb.hard[m, i, j] == hard
                    assert bool(plb.valid[m, i, j]) == valid
                    assert plb.source[m, i, j] == source
                    total += 1
                    branches["conflict" if conflict[m, i, j] else "agree"] += 1
                    branches["student" if source else "ensemble"] += 1
                    branches["valid" if valid else "invalid"] += 1
    assert total >= 10_000
    assert all(v > 0 for v in branches.values()), branches
    ok(2, f"{total} pixel cases bit-identical; branch counts {branches}")


# ---------------------------------------------------------------------------
# criterion 3: EMA / optimizer exactness


def test_criterion_3_ema_and_sgd_recurrences():
    rng = np.random.default_rng(33)
    dim = 17

    # EMA: 100 scripted steps against a per-element scalar recurrence
    decay = 0.99
    teacher = rng.standard_normal(dim)
    ref = teacher.astype(float).tolist()
    for _ in range(100):
        student = rng.standard_normal(dim)
        teacher = ema_update(teacher, student, decay)
        ref = [decay * r + (1.0 - decay) * s for r, s in zip(ref, student)]
    assert np.abs(teacher - np.array(ref)).max() <= 1e-12

    t = rng.standard_normal(dim)
    s = rng.standard_normal(dim)
    assert np.array_equal(ema_update(t, s, 0.0), s)
    assert np.array_equal(ema_update(t, s, 1.0), t)

    # SGD: 100 scripted steps against the scalar recurrence
    lr, mom, wd = 0.03, 0.9, 1e-4
    params = rng.standard_normal(dim)
    vel = np.zeros(dim)
    p_ref = params.astype(float).tolist()
    v_ref = [0.0] * dim
    for _ in range(100):
        grads = rng.standard_normal(dim)
        sgd_step(params, grads, vel, lr, mom, wd)
        for i in range(dim):
            v_ref[i] = mom * v_ref[i] + (grads[i] + wd * p_ref[i])
            p_ref[i] = p_ref[i] - lr * v_ref[i]
    assert np.abs(params - np.array(p_ref)).max() <= 1e-12
    assert np.abs(vel - np.array(v_ref)).max() <= 1e-12
    ok(3, "100-step EMA and SGD sequences match recurrences to 1e-12; decay 0/1 exact")


# ---------------------------------------------------------------------------
# criterion 4: RPA distribution


def test_criterion_4_rpa_distribution():
    state = RpaState.fresh(20, np.random.default_rng(4))
    periods = []
    while len(periods) < 10_000:
        periods.append(state.iters_remaining)
        for _ in range(state.iters_remaining):
            state.tick()
    periods = np.array(periods[:10_000])
    observed = set(periods.tolist())
    assert observed == set(range(1, 21)), f"missing periods: {set(range(1,21)) - observed}"
    se = np.sqrt((20.0**2 - 1.0) / 12.0 / len(periods))
    assert abs(periods.mean() - 10.5) <= 3.0 * se

    state = RpaState.fresh(1, np.random.default_rng(5))
    seq = [state.tick()[0] for _ in range(400)]
    assert seq == [1, 2] * 200
    ok(4, f"10^4 periods cover 1..20, mean {periods.mean():.3f} within 3 SE of 10.5; "
          "t_max=1 alternates strictly")


# ---------------------------------------------------------------------------
# criterion 5: metric oracles


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(55)
    n_checked = 0
    for case in range(100):
        p = rng.uniform(0.1, 0.5)
        pred = rng.random((16, 16)) < p
        gt = rng.random((16, 16)) < p
        dice, jacc = dice_jaccard(pred, gt)
        # independent set arithmetic
        inter = int(np.logical_and(pred, gt).sum())
        union = int(np.logical_or(pred, gt).sum())
        np_, ng = int(pred.sum()), int(gt.sum())
        if np_ == 0 and ng == 0:
            assert (dice, jacc) == (100.0, 100.0)
        else:
            assert dice == 100.0 * (2 * inter) / (np_ + ng)
            assert jacc == 100.0 * inter / union
        d, j = dice / 100.0, jacc / 100.0
        assert abs(j - d / (2.0 - d)) <= 1e-12

        got = surface_distances(pred, gt)
        want = all_pairs_surface(pred, gt)
        if np.isnan(want[0]):
            assert np.isnan(got[0]) and np.isnan(got[1])
        else:
            assert abs(got[0] - want[0]) <= 1e-9
            assert abs(got[1] - want[1]) <= 1e-9
            n_checked += 1

    # degenerate cases
    empty = np.zeros((16, 16), bool)
    some = empty.copy()
    some[5, 5] = True
    assert dice_jaccard(empty, empty) == (100.0, 100.0)
    assert dice_jaccard(empty, some) == (0.0, 0.0)
    assert surface_distances(empty, empty) == (0.0, 0.0)
    assert np.isnan(surface_distances(empty, some)[0])
    assert np.isnan(surface_distances(some, empty)[1])
    ok(5, f"dice/jaccard exact and {n_checked} distance pairs within 1e-9 of the "
          "all-pairs oracle; identity jaccard=dice/(2-dice) held on all 100")


# ---------------------------------------------------------------------------
# criterion 6: stop-gradient and complementarity over a scripted run


def test_criterion_6_stop_gradient_and_complementarity():
    from admt.data import BatchSampler, BatchSpec

    samples = generate_dataset(6, 40, 32, 3)
    by_id = {s.id: s for s in samples}
    labeled_ids = [s.id for s in samples[:4]]
    unlabeled_ids = [s.id for s in samples[4:34]]  # pool of 30
    spec = BatchSpec(2, 2)
    sampler = BatchSampler(labeled_ids, unlabeled_ids, spec, 17)
    model = SegModel(1, 3)
    trainer = Trainer(
        model, 17, mode="admt_full", crop_size=24, max_iters=200,
        ramp_iters=20, t_max_iters=4, tau=0.8,
    )
    consumed = []
    turn_of = []
    updates = {1: 0, 2: 0}
    for it in range(200):
        lab, unl = sampler.next_batches()
        t1_before = trainer.teacher1.copy()
        t2_before = trainer.teacher2.copy()
        report = trainer.step([by_id[i] for i in lab], [by_id[i] for i in unl], it)
        active = report.active_teacher
        updates[active] += 1
        # the inactive teacher is bit-identical; the active one is exactly EMA
        if active == 1:
            assert np.array_equal(trainer.teacher2, t2_before)
            expected = 0.99 * t1_before + (1.0 - 0.99) * trainer.student
            assert np.array_equal(trainer.teacher1, expected)
        else:
            assert np.array_equal(trainer.teacher1, t1_before)
            expected = 0.99 * t2_before + (1.0 - 0.99) * trainer.student
            assert np.array_equal(trainer.teacher2, expected)
        consumed.extend(unl)
        turn_of.extend([active] * len(unl))
    assert updates[1] + updates[2] == 200

    # complementarity: within each pass over the pool, every id exactly once,
    # and therefore in exactly one teacher's turn
    pool = len(unlabeled_ids)
    full_epochs = len(consumed) // pool
    for e in range(full_epochs):
        epoch_ids = consumed[e * pool : (e + 1) * pool]
        assert sorted(epoch_ids) == sorted(unlabeled_ids)
        turns = {}
        for sid, teacher in zip(epoch_ids, turn_of[e * pool : (e + 1) * pool]):
            turns.setdefault(sid, set()).add(teacher)
        assert all(len(t) == 1 for t in turns.values())
    ok(6, f"200 iterations: teachers changed only via EMA on the active one "
          f"({updates[1]}+{updates[2]}=200); {full_epochs} epochs complementary")


# ---------------------------------------------------------------------------
# criteria 7 and 8: the desk-scale experiment

DESK_SEEDS = (0, 1, 2)

# regression bands pinned from the first verified build (mean test dice
# over the three seeds); orderings and margins are asserted separately
PINNED_MEAN_DICE = {
    "sup_only": None,
    "mt_single_t1": None,
    "mt_single_t2": None,
    "admt_rpa_only": None,
    "admt_full": None,
    "drop": None,
    "avg": None,
    "entropy": None,
}
PIN_TOLERANCE = 2.5


def _desk_config(dataset_dir):
    return {
        "dataset": str(dataset_dir),
        "labeled_fraction": 0.05,
        "batch_size": 2,
        "unlabeled_ratio": 2,
        "crop_size": 48,
        "max_iters": 600,
        "mode": "admt_full",
    }


def _train_cell(job):
    doc, out_dir = job
    cfg = config_from_dict(doc)
    report = run_train(cfg, out_dir, quiet=True)
    return (doc["mode"], doc.get("ensembling", ""), doc["seed"], report.mean_dice)


@pytest.fixture(scope="session")
def desk_results(tmp_path_factory):
    """Train the full mode grid and the ensembling sweep, 3 seeds each."""
    root = tmp_path_factory.mktemp("desk")
    ds = root / "ds"
    assert main(["generate", "--out", str(ds), "--n", "250", "--size", "64",
                 "--classes", "4", "--seed", "7"]) == 0
    base = _desk_config(ds)
    jobs = []
    plan = [("sup_only", ""), ("mt_single_t1", ""), ("mt_single_t2", ""),
            ("admt_rpa_only", ""), ("admt_full", "ccm"),
            ("admt_full", "drop"), ("admt_full", "avg"), ("admt_full", "entropy")]
    for mode, ens in plan:
        for seed in DESK_SEEDS:
            doc = dict(base)
            doc["mode"] = mode
            doc["ensembling"] = ens
            doc["seed"] = seed
            jobs.append((doc, str(root / f"{mode}_{ens or 'x'}_{seed}")))
    with concurrent.futures.ProcessPoolExecutor(max_workers=2) as pool:
        rows = list(pool.map(_train_cell, jobs))
    results = {}
    for mode, ens, seed, dice in rows:
        key = ens if mode == "admt_full" and ens != "ccm" else mode
        results.setdefault(key, {})[seed] = dice
    return results


def _mean(results, key):
    return float(np.mean([results[key][s] for s in DESK_SEEDS]))


def test_criterion_7_desk_experiment(desk_results):
    means = {k: _mean(desk_results, k) for k in
             ("sup_only", "mt_single_t1", "mt_single_t2", "admt_rpa_only", "admt_full")}
    single_best = max(means["mt_single_t1"], means["mt_single_t2"])
    assert means["admt_full"] > means["admt_rpa_only"], means
    assert means["admt_rpa_only"] > single_best, means
    assert single_best > means["sup_only"], means
    assert means["admt_full"] - means["sup_only"] >= 5.0, means
    assert means["admt_full"] - means["admt_rpa_only"] >= 0.3, means
    for key, pinned in PINNED_MEAN_DICE.items():
        if pinned is not None and key in means:
            assert abs(means[key] - pinned) <= PIN_TOLERANCE, (key, means[key], pinned)
    ok(7, "mean dice " + " ".join(f"{k}={v:.2f}" for k, v in means.items()))


def test_criterion_8_ensembling_ordering(desk_results):
    means = {k: _mean(desk_results, k) for k in ("drop", "avg", "entropy", "admt_full")}
    ccm = means.pop("admt_full")
    assert means["drop"] < means["avg"], means
    assert means["avg"] <= means["entropy"], means
    assert means["entropy"] <= ccm, means
    for key in ("drop", "avg", "entropy"):
        pinned = PINNED_MEAN_DICE[key]
        if pinned is not None:
            assert abs(means[key] - pinned) <= PIN_TOLERANCE, (key, means[key], pinned)
    ok(8, f"ordering drop {means['drop']:.2f} < avg {means['avg']:.2f} "
          f"<= entropy {means['entropy']:.2f} <= ccm {ccm:.2f}")


# ---------------------------------------------------------------------------
# criterion 9: end-to-end determinism


def test_criterion_9_end_to_end_determinism(tmp_path):
    ds = tmp_path / "ds"
    assert main(["generate", "--out", str(ds), "--n", "30", "--size", "32",
                 "--classes", "3", "--seed", "2"]) == 0
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "dataset": str(ds), "labeled_fraction": 0.2, "batch_size": 2,
        "unlabeled_ratio": 2, "crop_size": 24, "max_iters": 20,
        "mode": "admt_full", "seed": 9,
    }))
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--out",
                     str(tmp_path / name), "--quiet"]) == 0
    log_a = (tmp_path / "a/train_log.csv").read_bytes()
    log_b = (tmp_path / "b/train_log.csv").read_bytes()
    ckpt_a = (tmp_path / "a/checkpoints/student_final.ckpt").read_bytes()
    ckpt_b = (tmp_path / "b/checkpoints/student_final.ckpt").read_bytes()
    assert log_a == log_b
    assert ckpt_a == ckpt_b
    ok(9, "two cmd_train runs byte-identical (train_log.csv and final checkpoint)")
