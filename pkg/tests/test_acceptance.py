"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured values and
then asserts. The lines are repeated in the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest

from seqsplat import autograd as ag
from seqsplat.lift import FeatureMap, lift_features, lift_pipeline, procedural_featureize
from seqsplat.metrics import auc, evaluate, iou, mae, sequential_metrics, sim
from seqsplat.model import SeqSplatNet, gold_output_ids
from seqsplat.raster import (
    WEIGHT_CUTOFF, Camera, WeightRecords, default_view_ring, render_weights,
)
from seqsplat.scene import GaussianScene
from seqsplat.train import (
    TrainConfig, build_vocabulary, reconstruction_miou, run_ablation, run_pretrain, run_train,
)

from conftest import ACCEPTANCE_LINES, random_camera, random_scene
from oracles import (
    brute_auc, brute_iou, brute_lift, brute_mae, brute_sequential, brute_sim, brute_weights,
    gradcheck_suite,
)

# tolerances and budgets
GRAD_REL_ERR = 1e-5
GRAD_MIN_CASES = 100
GRAD_BUDGET_S = 60.0
CONSERVATION_ATOL = 1e-6
CONSERVATION_CASES = 50
LIFT_ATOL = 1e-6
METRIC_FLOAT_ATOL = 1e-12  # SIM and MAE sum floats in a different order than the oracle
RANDOM_METRIC_CASES = 1000
PRETRAIN_MIOU = 0.90
PRETRAIN_BUDGET_S = 600.0
TOKEN_ACC = 0.95
SEG_MATCH = 0.95
OVERFIT_SIOU = 0.90
TRAIN_BUDGET_S = 1800.0
# overfit run: the default lr 1e-4 stalls short of the thresholds within 50 epochs
OVERFIT_CONFIG = TrainConfig(lr=3e-4, lr_min=3e-5)


def report(capsys, criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  C{criterion:<2d} {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- 1. autograd --------------------------------------------------------------------------
def test_c1_gradcheck(capsys):
    t0 = time.perf_counter()
    results = list(gradcheck_suite(range(4)))
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r[2])
    ok = len(results) >= GRAD_MIN_CASES and worst[2] < GRAD_REL_ERR and seconds < GRAD_BUDGET_S
    report(capsys, 1, ok, f"gradcheck cases={len(results)} ops={len({r[0] for r in results})} "
           f"max_rel_err={worst[2]:.2e} ({worst[0]}) time={seconds:.1f}s")


# -- 2. rasterizer conservation -----------------------------------------------------------
def _two_coincident():
    pos = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 3.0]])
    rot = np.tile([1.0, 0, 0, 0], (2, 1))
    scene = GaussianScene(pos, rot, np.full((2, 3), 0.2), np.array([0.5, 0.5]), np.zeros((2, 3)))
    cam = Camera(np.eye(3), np.zeros(3), 20.0, 20.0, 10.0, 10.0, 21, 21, near=0.1, far=50.0)
    rec = render_weights(scene, cam)
    at = rec.pixel_index == 10 * 21 + 10
    return rec.gaussian[at].tolist(), rec.weight[at].tolist()


def test_c2_conservation(capsys):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(CONSERVATION_CASES):
        scene = random_scene(rng, int(rng.integers(1, 60)), spread=0.8, scale=(0.03, 0.4),
                             opacity=(0.05, 1.0))
        cam = random_camera(rng, int(rng.integers(8, 40)), int(rng.integers(8, 40)))
        rec = render_weights(scene, cam, cutoff=0.0)
        total = np.bincount(rec.pixel_index, weights=rec.weight, minlength=cam.width * cam.height)
        worst = max(worst, np.abs(total - (1.0 - rec.transmittance.ravel())).max())
    ids, w = _two_coincident()
    example = ids == [0, 1] and w == [0.5, 0.25]
    ok = worst <= CONSERVATION_ATOL and example
    report(capsys, 2, ok, f"conservation cases={CONSERVATION_CASES} max_err={worst:.2e} "
           f"two-gaussian weights={w}")


# -- 3. lifting oracle --------------------------------------------------------------------
def _brute_pipeline(scene, m, resolution):
    """Ring of views, dense per-pixel weights, cutoff, image, features, triple loop."""
    maps, dense = [], []
    for v, cam in enumerate(default_view_ring(scene, m, resolution)):
        w, tfinal = brute_weights(scene, cam)
        w = np.where(w > WEIGHT_CUTOFF, w, 0.0)
        image = np.einsum("hwn,nc->hwc", w, scene.rgb())  # black background
        maps.append(procedural_featureize(image, v).data)
        dense.append(w)
    ref, den = brute_lift(scene.n, maps, dense)
    return ref, den, maps, dense


def _convex_ok(bank, maps, dense):
    lo = np.full(bank.shape, np.inf)
    hi = np.full(bank.shape, -np.inf)
    for fmap, w in zip(maps, dense):
        for i in range(bank.shape[0]):
            hit = w[..., i] > 0
            if hit.any():
                lo[i] = np.minimum(lo[i], fmap[hit].min(axis=0))
                hi[i] = np.maximum(hi[i], fmap[hit].max(axis=0))
    cov = np.isfinite(lo[:, 0])
    slack = 1e-12
    return bool(np.all(bank[cov] >= lo[cov] - slack) and np.all(bank[cov] <= hi[cov] + slack))


def _scaled(rec, c):
    return WeightRecords(rec.pixel_x, rec.pixel_y, rec.gaussian, rec.weight * c, rec.width,
                         rec.height, rec.transmittance)


@pytest.mark.parametrize("n,m", [(40, 1), (120, 2), (200, 4)])
def test_c3_lifting_oracle(capsys, n, m):
    rng = np.random.default_rng(n)
    scene = random_scene(rng, n, spread=0.6, scale=(0.03, 0.2))
    res = (32, 32)
    bank = lift_pipeline(scene, m, resolution=res)
    ref, den, maps, dense = _brute_pipeline(scene, m, res)
    err = np.abs(bank.data - ref).max()
    convex = _convex_ok(bank.data, maps, dense)
    # scaling every record of every view by the same c leaves the bank unchanged
    cams = default_view_ring(scene, m, res)
    fmaps = [FeatureMap(d, v) for v, d in enumerate(maps)]
    recs = [render_weights(scene, c) for c in cams]
    base = lift_features(scene, cams, fmaps, recs).data
    scale_err = max(np.abs(lift_features(scene, cams, fmaps, [_scaled(r, c) for r in recs]).data
                           - base).max() for c in (1e-3, 7.0, 250.0))
    covered = int((den > 0).sum())
    ok = err <= LIFT_ATOL and convex and scale_err <= LIFT_ATOL and covered > 0
    report(capsys, 3, ok, f"lift N={n} m={m} covered={covered} max_err={err:.2e} "
           f"convex={convex} scale_err={scale_err:.2e}")


# -- 4. metrics oracle --------------------------------------------------------------------
def _compare_step(p, g, worst):
    exact = iou(p, g) == brute_iou(p, g) and auc(p, g) == brute_auc(p, g)
    worst[0] = max(worst[0], abs(sim(p, g) - brute_sim(p, g)), abs(mae(p, g) - brute_mae(p, g)))
    return exact


def _compare_seq(pred, gt, worst):
    got = sequential_metrics(pred, gt).as_tuple()
    ref = brute_sequential(pred, gt)
    exact = got[0] == ref[0] and got[1] == ref[1]
    worst[0] = max(worst[0], abs(got[2] - ref[2]), abs(got[3] - ref[3]))
    return exact


def test_c4_metrics_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = [0.0]
    exact, cases = True, 0
    for n in range(1, 13):
        masks = [np.array(b, dtype=float) for b in itertools.product([0, 1], repeat=n)]
        if n <= 5:
            pairs = list(itertools.product(masks, masks))
        else:
            # every gt mask against a tie-heavy soft prediction and a shifted binary one
            pairs = []
            for g in masks:
                pairs.append((np.round(rng.uniform(size=n), 1), g))
                pairs.append((np.roll(g, 1), g))
        for p, g in pairs:
            exact &= _compare_step(p, g, worst)
        for k in range(0, len(masks) - 2, max(1, len(masks) // 64)):
            exact &= _compare_seq(masks[k:k + 2], masks[k + 1:k + 2], worst)
            exact &= _compare_seq([masks[k]], masks[k:k + 3], worst)
        cases += len(pairs)
    exhaustive_worst = worst[0]
    for _ in range(RANDOM_METRIC_CASES):
        n = int(rng.integers(1, 257))
        p = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        g = (rng.uniform(size=n) < rng.uniform(0.05, 0.9)).astype(float)
        exact &= _compare_step(p, g, worst)
        pred = [np.round(rng.uniform(size=n), 2) for _ in range(rng.integers(0, 5))]
        gt = [(rng.uniform(size=n) < 0.4).astype(float) for _ in range(rng.integers(1, 5))]
        exact &= _compare_seq(pred, gt, worst)
    ok = exact and worst[0] <= METRIC_FLOAT_ATOL
    report(capsys, 4, ok, f"metrics exhaustive_pairs={cases} random={RANDOM_METRIC_CASES} "
           f"iou/auc exact={exact} sim/mae max_err={max(worst[0], exhaustive_worst):.1e}")


# -- 5. sequence-length penalty -----------------------------------------------------------
def test_c5_length_penalty(capsys):
    rng = np.random.default_rng(5)
    lowered, cases, worst_gap = 0, 0, np.inf
    for _ in range(500):
        n = int(rng.integers(2, 40))
        t = int(rng.integers(1, 6))
        gt = [(rng.uniform(size=n) < 0.5).astype(float) for _ in range(t)]
        for g in gt:
            g[rng.integers(n)] = 1.0
        # predictions that overlap their gt step, so the truncated score is positive
        pred = [np.clip(g + rng.normal(0, 0.3, n), 0, 1) for g in gt]
        # unmatched steps are nonempty once binarized
        extra = [rng.uniform(size=n) for _ in range(int(rng.integers(1, 4)))]
        for e in extra:
            e[rng.integers(n)] = 1.0
        mismatched = [(pred + extra, gt), (pred, gt + [e.round() for e in extra])]
        if t > 1:
            mismatched.append((pred[:int(rng.integers(1, t))], gt))
        for a, b in mismatched:
            k = min(len(a), len(b))
            truncated = sequential_metrics(a[:k], b[:k]).siou
            full = sequential_metrics(a, b).siou
            if truncated == 0:
                continue
            cases += 1
            lowered += full < truncated
            worst_gap = min(worst_gap, truncated - full)
    ok = cases > 0 and lowered == cases
    report(capsys, 5, ok, f"length penalty lowered={lowered}/{cases} min_gap={worst_gap:.3f}")


# -- 6. causality and equivariance --------------------------------------------------------
def test_c6_causality_and_equivariance(capsys, default_dataset):
    vocab = build_vocabulary(default_dataset)
    model = SeqSplatNet(vocab, seed=0)
    rng = np.random.default_rng(6)
    seq = default_dataset[0].sequences[0]
    ids = vocab.encode(seq.instruction) + [1] + gold_output_ids(vocab, seq.texts)
    h, _ = model.planner(ids)
    causal = True
    for t in range(len(ids) - 1):
        changed = ids[:t + 1] + rng.integers(5, len(vocab), len(ids) - t - 1).tolist()
        causal &= np.array_equal(model.planner(changed)[0].data[:t + 1], h.data[:t + 1])
    worst = {"encoder": 0.0, "reconstruction": 0.0, "decoder": 0.0}
    for trial in range(3):
        scene = random_scene(rng, 150)
        perm = rng.permutation(scene.n)
        f = model.encode_scene(scene)
        fp = model.encode_scene(scene.subset(perm))
        worst["encoder"] = max(worst["encoder"], np.abs(fp.data - f.data[perm]).max())
        mask = (rng.uniform(size=scene.n) < 0.3).astype(float)
        mask[0] = 1.0
        r = model.reconstruct_mask(model.encode_mask(mask, f), f).data
        rp = model.reconstruct_mask(model.encode_mask(mask[perm], fp), fp).data
        worst["reconstruction"] = max(worst["reconstruction"], np.abs(rp - r[perm]).max())
        sem = rng.normal(size=(scene.n, model.cfg.decoder.d_sem))
        q = ag.Tensor(rng.normal(size=(3, model.cfg.planner.d_model)))
        o = model.decode_affordance(q, f, sem).data
        op = model.decode_affordance(q, fp, sem[perm]).data
        worst["decoder"] = max(worst["decoder"], np.abs(op - o[:, perm]).max())
    ok = causal and max(worst.values()) == 0.0
    report(capsys, 6, ok, f"causal prefixes={len(ids) - 1} exact={causal} equivariance max_err "
           + " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# -- 7. pre-training ----------------------------------------------------------------------
def test_c7_pretraining(capsys, default_dataset, default_pretrain):
    result, seconds = default_pretrain
    miou = reconstruction_miou(result.model, default_dataset)
    ok = miou >= PRETRAIN_MIOU and seconds < PRETRAIN_BUDGET_S
    report(capsys, 7, ok, f"pretrain epochs={len(result.epoch_losses)} mIoU={miou:.4f} "
           f"final_loss={result.epoch_losses[-1]:.4f} time={seconds:.1f}s")


# -- 8. end-to-end overfit ----------------------------------------------------------------
@pytest.fixture(scope="module")
def overfit(default_dataset, default_pretrain):
    t0 = time.perf_counter()
    res = run_train(default_dataset, OVERFIT_CONFIG, init=default_pretrain[0], features=True)
    return res, time.perf_counter() - t0


def _token_accuracy(model, samples):
    right = total = 0
    for s in samples:
        for seq in s.sequences:
            gold = gold_output_ids(model.vocab, seq.texts)
            seg = model.plan_teacher_forced(model.vocab.encode(seq.instruction), gold)
            right += int((seg.token_logits.data.argmax(axis=1) == np.asarray(gold)).sum())
            total += len(gold)
    return right / total


def test_c8_overfit(capsys, overfit, train_samples):
    res, seconds = overfit
    acc = _token_accuracy(res.model, train_samples)
    rep = evaluate(res.model, train_samples, "seq", banks=res.banks)
    gt_counts = [seq.T for s in train_samples for seq in s.sequences]
    pred_counts = [len(steps) for _, _, steps in rep.predictions]
    match = float(np.mean([a == b for a, b in zip(pred_counts, gt_counts)]))
    ok = (len(res.log) <= 50 and acc >= TOKEN_ACC and match >= SEG_MATCH
          and rep.siou >= OVERFIT_SIOU and seconds < TRAIN_BUDGET_S)
    report(capsys, 8, ok, f"overfit epochs={len(res.log)} token_acc={acc:.4f} "
           f"seg_match={match:.4f} seq_sIoU={rep.siou:.4f} time={seconds:.1f}s")


# -- 9. ablation direction ----------------------------------------------------------------
def test_c9_ablation(capsys, default_dataset, default_pretrain, tmp_path):
    with_pre, without = [], []
    for seed in range(3):
        cfg = TrainConfig(seed=seed)
        pre = default_pretrain[0] if seed == 0 else run_pretrain(default_dataset, cfg)
        for init, out in ((pre, with_pre), (None, without)):
            res = run_train(default_dataset, cfg, init=init, stop_after=1)
            out.append(res.log[0][2])
    # the grid itself with a short schedule; it only has to run and emit four rows
    grid_cfg = TrainConfig(epochs=2, pretrain_epochs=2, lift_views=4, lift_resolution=(64, 64))
    rows = run_ablation(default_dataset, grid_cfg, tmp_path)
    lines = (tmp_path / "ablation.tsv").read_text().splitlines()
    structure = len(rows) == 4 and len(lines) == 5
    ok = structure and np.mean(with_pre) < np.mean(without)
    report(capsys, 9, ok, "ablation epoch1_mask_loss pretrain="
           + ",".join(f"{v:.3f}" for v in with_pre) + f" (mean {np.mean(with_pre):.3f}) random="
           + ",".join(f"{v:.3f}" for v in without) + f" (mean {np.mean(without):.3f}) "
           f"grid_rows={len(rows)}")


# -- 10. evaluation-setting ordering ------------------------------------------------------
def test_c10_setting_order(capsys, overfit, train_samples):
    res, _ = overfit
    seq_gt = evaluate(res.model, train_samples, "seq_gt", banks=res.banks)
    seq = evaluate(res.model, train_samples, "seq", banks=res.banks)
    ok = seq_gt.siou >= seq.siou
    report(capsys, 10, ok, f"settings seq_gt_sIoU={seq_gt.siou:.4f} >= seq_sIoU={seq.siou:.4f}")
