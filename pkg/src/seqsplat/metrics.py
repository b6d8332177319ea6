"""Per-step and sequential affordance metrics.

Sequences are compared position by position after padding the shorter one
with all-zero masks, so a wrong step count always costs score.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


@dataclass
class StepScores:
    iou: float
    auc: float
    sim: float
    mae: float

    def as_tuple(self):
        return (self.iou, self.auc, self.sim, self.mae)


@dataclass
class SequenceScores:
    siou: float
    sauc: float
    ssim: float
    smae: float
    aligned_length: int

    def as_tuple(self):
        return (self.siou, self.sauc, self.ssim, self.smae)


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: pred {p.size} vs gt {g.size}")
    return p, g


def iou(pred, gt, threshold=0.5):
    p, g = _pair(pred, gt)
    pb = p >= threshold
    gb = g >= 0.5
    union = np.count_nonzero(pb | gb)
    if union == 0:
        return 1.0
    return np.count_nonzero(pb & gb) / union


def auc(pred, gt, threshold=0.5):
    """ROC-AUC as the normalized Mann-Whitney U, ties counted half."""
    p, g = _pair(pred, gt)
    gb = g >= 0.5
    n_pos = int(gb.sum())
    n_neg = gb.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 1.0 if np.array_equal(p >= threshold, gb) else 0.0
    order = np.argsort(p, kind="mergesort")
    sorted_p = p[order]
    # average ranks over ties
    ranks = np.empty(p.size)
    uniq, start, counts = np.unique(sorted_p, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    u = ranks[gb].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sim(pred, gt):
    """Histogram intersection of the two sum-normalized maps."""
    p, g = _pair(pred, gt)
    if np.any(p < 0) or np.any(g < 0):
        raise ValueError("sim needs nonnegative inputs")
    sp, sg = p.sum(), g.sum()
    if sp == 0 and sg == 0:
        return 1.0
    if sp == 0 or sg == 0:
        return 0.0
    return float(np.minimum(p / sp, g / sg).sum())


def mae(pred, gt):
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


def step_scores(pred, gt, threshold=0.5):
    return StepScores(iou(pred, gt, threshold), auc(pred, gt, threshold), sim(pred, gt),
                      mae(pred, gt))


def align_sequences(pred, gt):
    pred = [np.asarray(m, dtype=np.float64).reshape(-1) for m in pred]
    gt = [np.asarray(m, dtype=np.float64).reshape(-1) for m in gt]
    sizes = {m.size for m in pred + gt}
    if len(sizes) > 1:
        raise ValueError(f"masks disagree on N: {sorted(sizes)}")
    if not sizes:
        return [], []
    n = sizes.pop()
    length = max(len(pred), len(gt))
    pred = pred + [np.zeros(n) for _ in range(length - len(pred))]
    gt = gt + [np.zeros(n) for _ in range(length - len(gt))]
    return pred, gt


def sequential_metrics(pred_seq, gt_seq, threshold=0.5):
    pred, gt = align_sequences(pred_seq, gt_seq)
    if not gt:
        raise ValueError("cannot score two empty sequences")
    per = [step_scores(p, g, threshold) for p, g in zip(pred, gt)]
    k = len(per)
    return SequenceScores(sum(s.iou for s in per) / k, sum(s.auc for s in per) / k,
                          sum(s.sim for s in per) / k, sum(s.mae for s in per) / k, k)


def mean_scores(rows):
    """Column means of StepScores/SequenceScores tuples, in input order."""
    arr = np.array([r.as_tuple() for r in rows], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no samples to aggregate")
    return tuple(float(x) for x in arr.mean(axis=0))


# -- model evaluation ---------------------------------------------------------------------
SETTINGS = ("single", "seq_gt", "seq")


@dataclass
class EvalReport:
    """Means over a split; in the ``single`` setting the four columns are step metrics."""

    setting: str
    split: str
    n_samples: int
    siou: float
    sauc: float
    ssim: float
    smae: float
    details: list
    predictions: list = None  # (scene_id, instruction, [(step text, probabilities)])

    def header(self):
        if self.setting == "single":
            return ["setting", "split", "N_samples", "mIoU", "AUC", "SIM", "MAE"]
        return ["setting", "split", "N_samples", "sIoU", "sAUC", "sSIM", "sMAE"]

    def row(self):
        return [self.setting, self.split, str(self.n_samples)] + [
            f"{v:.6f}" for v in (self.siou, self.sauc, self.ssim, self.smae)]

    def to_tsv(self):
        return "\t".join(self.header()) + "\n" + "\t".join(self.row()) + "\n"

    def details_tsv(self):
        lines = ["scene\tinstruction\tstep\tpred_steps\tgt_steps\tiou\tauc\tsim\tmae"]
        for d in self.details:
            lines.append("\t".join(str(d[k]) if not isinstance(d[k], float) else f"{d[k]:.6f}"
                                   for k in ("scene", "instruction", "step", "pred_steps",
                                             "gt_steps", "iou", "auc", "sim", "mae")))
        return "\n".join(lines) + "\n"


def _probs(logits):
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def evaluate(checkpoint, dataset, setting, banks=None, features=None, out_dir=None,
             lift_views=8, lift_resolution=(256, 256), cache_dir=None):
    """Score a trained model on ``dataset`` (a list of scene samples).

    ``checkpoint`` is a model object or a path accepted by ``train.load_trained``.
    single: each gold step scored on its own under teacher forcing.
    seq_gt: teacher-forced gold steps, scored as sequences.
    seq: greedy planning end to end, scored as sequences.
    """
    from .lift import FeatureBank, lift_pipeline
    from .model import SEG
    from .train import load_trained

    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; choose from {', '.join(SETTINGS)}")
    model = load_trained(checkpoint) if isinstance(checkpoint, (str, bytes)) or hasattr(
        checkpoint, "__fspath__") else checkpoint
    samples = list(dataset)
    if not any(s.sequences for s in samples):
        raise ValueError("cannot evaluate on an empty dataset")
    if features is None:
        features = getattr(model, "uses_features", False)
    splits = sorted({getattr(s, "split", "train") for s in samples})
    rows, details, predictions = [], [], []
    for s in samples:
        if banks is not None and s.scene_id in banks:
            sem = banks[s.scene_id]
        elif features:
            sem = lift_pipeline(s.scene, lift_views, resolution=lift_resolution,
                                cache_dir=cache_dir).data
        else:
            sem = FeatureBank.zeros(s.scene.n, model.cfg.decoder.d_sem).data
        f_geo = model.encode_scene(s.scene)
        for seq in s.sequences:
            gt = [m.scores for m in seq.masks]
            if setting == "seq":
                out, logits = model.forward_sequence(seq.instruction, s.scene, sem, mode="greedy",
                                                     max_steps=max(8, len(gt)), f_geo=f_geo)
                texts, cur = [], []
                for tok in out.output_ids:
                    if tok == SEG:
                        texts.append(model.vocab.decode(cur))
                        cur = []
                    else:
                        cur.append(tok)
            else:
                _, logits = model.forward_sequence(seq.instruction, s.scene, sem, mode="teacher",
                                                   gold_steps=seq.texts, f_geo=f_geo)
                texts = list(seq.texts)
            pred = [_probs(lg) for lg in logits]
            predictions.append((s.scene_id, seq.instruction, list(zip(texts, pred))))
            base = {"scene": s.scene_id, "instruction": seq.instruction,
                    "pred_steps": len(pred), "gt_steps": len(gt)}
            if setting == "single":
                for t, (p, g) in enumerate(zip(pred, gt)):
                    sc = step_scores(p, g)
                    rows.append(sc)
                    details.append(dict(base, step=t, iou=sc.iou, auc=sc.auc, sim=sc.sim,
                                        mae=sc.mae))
            else:
                sc = sequential_metrics(pred, gt)
                rows.append(sc)
                details.append(dict(base, step="all", iou=sc.siou, auc=sc.sauc, sim=sc.ssim,
                                    mae=sc.smae))
    means = mean_scores(rows)
    report = EvalReport(setting, "+".join(splits), len(rows), *means, details, predictions)
    if out_dir is not None:
        from .autograd.checkpoint import atomic_write_bytes

        os.makedirs(out_dir, exist_ok=True)
        atomic_write_bytes(os.path.join(out_dir, f"eval_{setting}.tsv"), report.to_tsv().encode())
        atomic_write_bytes(os.path.join(out_dir, f"eval_{setting}_details.tsv"),
                           report.details_tsv().encode())
    return report
