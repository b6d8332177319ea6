"""Reconstruction pre-training and end-to-end sequential training.

Both loops are deterministic for a fixed seed: data order comes from a named
RNG stream, and parameters are float64 throughout.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Adam, cosine_lr, rng_stream
from .autograd.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .lift import FeatureBank, lift_pipeline
from .model import (ModelConfig, SeqSplatNet, Vocabulary, gold_output_ids)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 50
    pretrain_epochs: int = 10
    lr: float = 1e-4
    lr_min: float = 1e-5
    lambda_mask: float = 1.0
    batch_size: int = 4
    pretrain_batch_size: int = 1
    weight_decay: float = 0.01
    lift_views: int = 8
    lift_resolution: tuple = (256, 256)

    def __post_init__(self):
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ValueError("epochs must be positive")
        if self.lr <= 0 or self.lr_min < 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_mask < 0:
            raise ValueError("lambda_mask must be nonnegative")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        self.lift_resolution = tuple(self.lift_resolution)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        out = asdict(self)
        out["lift_resolution"] = list(self.lift_resolution)
        return out


# -- losses -------------------------------------------------------------------------------
def _scores(gt):
    return np.asarray(getattr(gt, "scores", gt), dtype=np.float64).reshape(-1)


def mask_loss(logits, gt):
    """BCE + Dice between mask logits and a ground-truth mask."""
    target = _scores(gt)
    if logits.shape != target.shape:
        raise ValueError(f"logits have {logits.shape[0]} entries, mask has {target.size}")
    return ag.bce_with_logits(logits, target) + ag.dice_loss(ag.sigmoid(logits), target)


def total_loss(token_logits, gold_ids, mask_logits_list, gt_masks, lambda_mask=1.0):
    """Language loss plus lambda_mask times the summed per-step mask losses."""
    if len(mask_logits_list) != len(gt_masks):
        raise ValueError(f"{len(mask_logits_list)} predicted masks for {len(gt_masks)} gold steps")
    lang = ag.cross_entropy(token_logits, np.asarray(gold_ids, dtype=np.int64))
    if not gt_masks:
        return lang
    masks = mask_loss(mask_logits_list[0], gt_masks[0])
    for lg, gt in zip(mask_logits_list[1:], gt_masks[1:]):
        masks = masks + mask_loss(lg, gt)
    return lang + masks * float(lambda_mask)


# -- helpers ------------------------------------------------------------------------------
def _train_samples(dataset):
    samples = [s for s in dataset if getattr(s, "split", "train") == "train"]
    return samples


def build_vocabulary(dataset):
    texts = []
    for s in _train_samples(dataset):
        for seq in s.sequences:
            texts.append(seq.instruction)
            texts.extend(seq.texts)
    return Vocabulary.build(texts)


def feature_banks(dataset, config: TrainConfig, features, cache_dir=None):
    """scene_id -> (N, d_sem) array; zeros when features are off."""
    banks = {}
    for s in dataset:
        if features:
            bank = lift_pipeline(s.scene, config.lift_views, resolution=config.lift_resolution,
                                 cache_dir=cache_dir)
        else:
            bank = FeatureBank.zeros(s.scene.n, 16)
        banks[s.scene_id] = bank.data
    return banks


def _write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _write_tsv(path, header, rows):
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


@dataclass
class PretrainResult:
    model: SeqSplatNet
    epoch_losses: list
    checkpoint_path: str = None


@dataclass
class TrainResult:
    model: SeqSplatNet
    log: list = field(default_factory=list)   # (epoch, lang, mask, total, seconds)
    checkpoint_path: str = None
    banks: dict = field(default_factory=dict)


# -- pre-training -------------------------------------------------------------------------
def pretrain_pairs(dataset):
    """Every mask of every training sequence as a (sample index, mask) pair."""
    samples = _train_samples(dataset)
    pairs = [(k, m) for k, s in enumerate(samples) for seq in s.sequences for m in seq.masks]
    return samples, pairs


def run_pretrain(dataset, config: TrainConfig = None, out_dir=None, model_config=None,
                 log=None):
    """Reconstruction pre-training of the scene encoder, mask encoder and head."""
    config = config or TrainConfig()
    samples, pairs = pretrain_pairs(dataset)
    if not pairs:
        raise ValueError("pre-training needs at least one training mask")
    model = SeqSplatNet(Vocabulary([]), model_config, seed=config.seed)
    params = {k: p for k, p in model.named_parameters().items()
              if k.startswith(model.perception_prefixes())}
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    order_rng = rng_stream(config.seed, "pretrain-order")
    losses = []
    bs = config.pretrain_batch_size
    for epoch in range(config.pretrain_epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(pairs))
        total, steps = 0.0, 0
        for b in range(0, len(order), bs):
            batch = [pairs[i] for i in order[b:b + bs]]
            opt.zero_grad()
            f_geo = {}
            loss = None
            for k, mask in batch:
                if k not in f_geo:
                    f_geo[k] = model.encode_scene(samples[k].scene)
                logits = model.reconstruct_mask(model.encode_mask(mask, f_geo[k]), f_geo[k])
                term = mask_loss(logits, mask)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        losses.append(total / steps)
        if log:
            log(f"pretrain epoch {epoch + 1}\tloss {losses[-1]:.6f}\t"
                f"{time.perf_counter() - t0:.1f}s")
    path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "pretrain.ssck")
        save_checkpoint(perception_state(model), path)
        _write_tsv(os.path.join(out_dir, "pretrain_log.tsv"), ["epoch", "mask_loss"],
                   [(i + 1, v) for i, v in enumerate(losses)])
    return PretrainResult(model, losses, path)


def perception_state(model):
    prefixes = model.perception_prefixes()
    return {k: v for k, v in model.state_dict().items() if k.startswith(prefixes)}


def reconstruction_miou(model, dataset):
    from .metrics import iou

    samples, pairs = pretrain_pairs(dataset)
    scores, cache = [], {}
    for k, mask in pairs:
        if k not in cache:
            cache[k] = model.encode_scene(samples[k].scene)
        logits = model.reconstruct_mask(model.encode_mask(mask, cache[k]), cache[k]).data
        scores.append(iou(_sigmoid(logits), mask.scores))
    return float(np.mean(scores))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- end-to-end training ------------------------------------------------------------------
def _init_state(init):
    if init is None:
        return None
    if isinstance(init, PretrainResult):
        return perception_state(init.model)
    if isinstance(init, dict):
        return init
    return load_checkpoint(init)


def run_train(dataset, config: TrainConfig = None, init=None, features=False, out_dir=None,
              model_config=None, cache_dir=None, log=None, banks=None, stop_after=None):
    """Teacher-forced end-to-end training on the train split.

    ``init`` may be a pre-training checkpoint path, a state dict or a
    :class:`PretrainResult`; only the perception parameters are taken from it.
    ``stop_after`` ends the run early without changing the lr schedule.
    """
    config = config or TrainConfig()
    samples = _train_samples(dataset)
    seqs = [(k, seq) for k, s in enumerate(samples) for seq in s.sequences]
    if not seqs:
        raise ValueError("training needs at least one training sequence")
    vocab = build_vocabulary(dataset)
    model = SeqSplatNet(vocab, model_config, seed=config.seed)
    model.uses_features = bool(features)
    state = _init_state(init)
    if state is not None:
        model.load_state_dict(state, strict=False)
    if banks is None:
        banks = feature_banks(samples, config, features, cache_dir)
    encoded = [(k, vocab.encode(seq.instruction), gold_output_ids(vocab, seq.texts), seq.masks)
               for k, seq in seqs]
    ctx = model.cfg.planner.context
    for _, ins, gold, _ in encoded:
        if len(ins) + 1 + len(gold) - 1 > ctx:
            raise ValueError(f"training sequence of {len(ins) + len(gold)} tokens exceeds "
                             f"the planner context {ctx}")
    opt = Adam(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    order_rng = rng_stream(config.seed, "train-order")
    bs = config.batch_size
    steps_per_epoch = -(-len(encoded) // bs)
    total_steps = steps_per_epoch * config.epochs
    step = 0
    rows = []
    for epoch in range(config.epochs if stop_after is None else min(stop_after, config.epochs)):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(encoded))
        sums = np.zeros(3)
        for b in range(0, len(order), bs):
            batch = [encoded[i] for i in order[b:b + bs]]
            opt.zero_grad()
            f_geo = {}
            loss = None
            parts = np.zeros(3)
            for k, ins, gold, masks in batch:
                if k not in f_geo:
                    f_geo[k] = model.encode_scene(samples[k].scene)
                seg = model.plan_teacher_forced(ins, gold)
                sem = ag.Tensor(banks[samples[k].scene_id])
                mask_logits = model.decode_affordance(seg.seg_matrix(), f_geo[k], sem)
                per_step = [mask_logits[t] for t in range(len(masks))]
                lang = ag.cross_entropy(seg.token_logits, np.asarray(gold, dtype=np.int64))
                mloss = None
                for lg, m in zip(per_step, masks):
                    term = mask_loss(lg, m)
                    mloss = term if mloss is None else mloss + term
                seq_loss = lang + mloss * config.lambda_mask
                loss = seq_loss if loss is None else loss + seq_loss
                parts += (lang.item(), mloss.item(), seq_loss.item())
            loss = loss * (1.0 / len(batch))
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, config.lr, config.lr_min))
            step += 1
            sums += parts
        mean = sums / len(encoded)
        rows.append((epoch + 1, float(mean[0]), float(mean[1]), float(mean[2]),
                     float(time.perf_counter() - t0)))
        if log:
            log("epoch {}\tlang {:.4f}\tmask {:.4f}\ttotal {:.4f}\t{:.1f}s".format(*rows[-1]))
    path = None
    if out_dir is not None:
        path = save_trained(model, out_dir, features=features)
        _write_tsv(os.path.join(out_dir, "train_log.tsv"),
                   ["epoch", "lang_loss", "mask_loss", "total_loss", "seconds"], rows)
    return TrainResult(model, rows, path, banks)


def save_trained(model, out_dir, features=False):
    """Full checkpoint plus the vocabulary and model config next to it."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "model.ssck")
    save_checkpoint(model.state_dict(), path)
    _write_json(os.path.join(out_dir, "vocab.json"), model.vocab.to_list())
    _write_json(os.path.join(out_dir, "model_config.json"),
                dict(model.cfg.to_dict(), features=bool(features)))
    return path


def load_trained(path):
    """Rebuild a model from a checkpoint file or the directory holding it."""
    folder = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
    ckpt = os.path.join(path, "model.ssck") if os.path.isdir(path) else path
    with open(os.path.join(folder, "vocab.json")) as fh:
        vocab = Vocabulary.from_list(json.load(fh))
    cfg_path = os.path.join(folder, "model_config.json")
    cfg, features = None, False
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            raw = json.load(fh)
        features = bool(raw.pop("features", False))
        cfg = ModelConfig.from_dict(raw)
    model = SeqSplatNet(vocab, cfg)
    model.load_state_dict(load_checkpoint(ckpt))
    model.uses_features = features
    return model


# -- ablation -----------------------------------------------------------------------------
ABLATION_HEADER = ["pretrain", "feature", "sIoU", "sAUC", "sSIM", "sMAE", "epoch1_mask_loss"]


def run_ablation(dataset, config: TrainConfig = None, out_dir=None, setting="seq", split="val",
                 model_config=None, cache_dir=None, log=None):
    """2x2 grid over pre-training and feature injection, scored with sequential metrics."""
    from .metrics import evaluate

    config = config or TrainConfig()
    pre = run_pretrain(dataset, config, model_config=model_config, log=log)
    init = perception_state(pre.model)
    rows = []
    bank_cache = {}
    eval_set = [s for s in dataset if s.split == split] or _train_samples(dataset)
    for use_pre in (False, True):
        for feats in (False, True):
            if feats not in bank_cache:
                bank_cache[feats] = feature_banks(dataset, config, feats, cache_dir)
            res = run_train(dataset, config, init=init if use_pre else None, features=feats,
                            model_config=model_config, log=log, banks=bank_cache[feats])
            report = evaluate(res.model, eval_set, setting, banks=bank_cache[feats])
            rows.append(("yes" if use_pre else "no", "yes" if feats else "no",
                         report.siou, report.sauc, report.ssim, report.smae, res.log[0][2]))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_tsv(os.path.join(out_dir, "ablation.tsv"), ABLATION_HEADER, rows)
    return rows
