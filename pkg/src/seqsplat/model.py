"""SeqSplatNet at desk scale.

Four learnable pieces share the autograd engine:

* ``SceneEncoder`` - flat PointNet over per-Gaussian geometry -> F_geo (N, d)
* ``MaskEncoder`` + ``ReconstructionHead`` - reconstruction pre-training
* ``Planner`` - causal transformer emitting text and ``<SEG>`` tokens
* ``AffordanceDecoder`` - one query per ``<SEG>``, cross-attending to point
  features with the lifted semantic bank added at every scale
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import MLP, Embedding, LayerNorm, Linear, Module, Parameter, rng_stream

PAD, BOS, EOS, UNK, SEG = 0, 1, 2, 3, 4
SPECIAL = ("<PAD>", "<BOS>", "<EOS>", "<UNK>", "<SEG>")
_WORD = re.compile(r"<seg>|\w+|[^\w\s]")


def tokenize(text):
    return _WORD.findall(text.lower())


class ContextOverflow(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens):
        self.itos = list(SPECIAL) + [t for t in tokens if t not in SPECIAL]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @classmethod
    def build(cls, texts):
        counts = Counter(t for text in texts for t in tokenize(text) if t != "<seg>")
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ranked)

    def encode(self, text):
        return [SEG if t == "<seg>" else self.stoi.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids):
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))

    def to_list(self):
        return list(self.itos)

    @classmethod
    def from_list(cls, itos):
        if tuple(itos[:5]) != SPECIAL:
            raise ValueError("vocabulary must start with the reserved tokens")
        return cls(itos[5:])


def gold_output_ids(vocab, step_texts):
    """Step texts each followed by ``<SEG>``, then ``<EOS>``."""
    ids = []
    for text in step_texts:
        ids.extend(vocab.encode(text))
        ids.append(SEG)
    ids.append(EOS)
    return ids


# -- configs -------------------------------------------------------------------------
@dataclass
class EncoderConfig:
    d_model: int = 128
    point_widths: tuple = (64, 128)
    head_hidden: int = 256


@dataclass
class PlannerConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 128
    context: int = 96
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


@dataclass
class DecoderConfig:
    d_model: int = 128
    scales: int = 2
    d_sem: int = 16


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {"encoder", "planner", "decoder"}
        if unknown:
            raise ValueError(f"unknown model config sections: {sorted(unknown)}")

        def build(kind, values):
            values = dict(values or {})
            bad = set(values) - set(kind.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown {kind.__name__} keys: {sorted(bad)}")
            if "point_widths" in values:
                values["point_widths"] = tuple(values["point_widths"])
            return kind(**values)

        return cls(build(EncoderConfig, d.get("encoder")), build(PlannerConfig, d.get("planner")),
                   build(DecoderConfig, d.get("decoder")))


# -- geometry ------------------------------------------------------------------------------
def geometry_inputs(scene):
    """Per-Gaussian 10-vector: unit-sphere position, sign-fixed quaternion, log scale."""
    center, radius = scene.bounding_sphere()
    radius = radius if radius > 0 else 1.0
    pos = (scene.positions - center) / radius
    q = scene.rotations * np.where(scene.rotations[:, :1] < 0, -1.0, 1.0)
    logs = (np.log(scene.scales / radius) + 5.0) / 1.5
    return np.concatenate([pos, q, logs], axis=1)


class SceneEncoder(Module):
    """Shared point MLP, global max-pool, then a per-point head on [local; global]."""

    def __init__(self, cfg: EncoderConfig, rng):
        w = (10,) + tuple(cfg.point_widths)
        self.point = [Linear(a, b, rng) for a, b in zip(w[:-1], w[1:])]
        self.head = MLP((2 * w[-1], cfg.head_hidden, cfg.d_model), rng)
        self.ln = LayerNorm(cfg.d_model)
        self.d_model = cfg.d_model

    def __call__(self, scene):
        x = ag.Tensor(geometry_inputs(scene))
        for layer in self.point:
            x = ag.gelu(layer(x))
        pooled = ag.max_(x, axis=0, keepdims=True)
        glob = ag.broadcast_to(pooled, x.shape)
        return self.ln(self.head(ag.concat([x, glob], axis=1)))


class MaskEncoder(Module):
    """Score-weighted mean of F_geo over the mask, then a residual MLP."""

    def __init__(self, d, rng):
        self.mlp = MLP((d, d, d), rng)

    def __call__(self, scores, f_geo):
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        total = s.sum()
        if total <= 0:
            raise ValueError("cannot embed an empty mask")
        pooled = ag.set_pool(ag.Tensor((s / total)[None, :]), f_geo)
        # the skip keeps the query aligned with the pooled features from step 0
        return pooled + self.mlp(pooled)


class ReconstructionHead(Module):
    """Single-query attention over F_geo, then a per-point MLP.

    The MLP sees [F_geo_i; fused; (F_geo_i - fused)^2]. The squared gap lets a
    near-linear first layer express "close to the concept", which the plain
    concatenation only learns slowly.
    """

    def __init__(self, d, rng):
        self.mlp = MLP((3 * d, d, 1), rng)

    def __call__(self, e_mask, f_geo):
        fused = ag.set_attention(e_mask, f_geo, f_geo)
        glob = ag.broadcast_to(fused, f_geo.shape)
        gap = f_geo - glob
        return ag.reshape(self.mlp(ag.concat([f_geo, glob, gap * gap], axis=1)), (-1,))


# -- planner ------------------------------------------------------------------------------
class Block(Module):
    def __init__(self, cfg: PlannerConfig, rng):
        d = cfg.d_model
        self.heads = cfg.heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP((d, cfg.mlp_ratio * d, d), rng)

    def __call__(self, x, mask):
        L, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = ag.transpose(ag.reshape(self.qkv(self.ln1(x)), (L, 3, h, dh)), (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ag.attention(q, k, v, mask)                      # (h, L, dh)
        att = ag.reshape(ag.transpose(att, (1, 0, 2)), (L, d))
        x = x + self.proj(att)
        return x + self.mlp(self.ln2(x))


class Planner(Module):
    def __init__(self, cfg: PlannerConfig, vocab_size, rng):
        self.cfg = cfg
        self.tok = Embedding(vocab_size, cfg.d_model, rng)
        self.pos = Embedding(cfg.context, cfg.d_model, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, vocab_size, rng)

    def hidden(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) > self.cfg.context:
            raise ContextOverflow(f"sequence of {len(ids)} tokens exceeds context {self.cfg.context}")
        x = self.tok(ids) + self.pos(np.arange(len(ids)))
        mask = ag.causal_mask(len(ids))
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x)

    def __call__(self, ids):
        h = self.hidden(ids)
        return h, self.head(h)


@dataclass
class SegOutput:
    token_logits: object          # Tensor (L, V) over the output positions
    seg_states: list              # Tensors (1, d), one per <SEG>
    seg_positions: list
    output_ids: list = field(default_factory=list)
    text: str = ""

    def seg_matrix(self):
        if not self.seg_states:
            return None
        return ag.concat(self.seg_states, axis=0)


# -- decoder ------------------------------------------------------------------------------
class DecoderScale(Module):
    def __init__(self, d, d_sem, rng):
        self.sem = Linear(d_sem, d, rng, bias=False)
        self.ln_q = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.ln_m = LayerNorm(d)
        self.mlp = MLP((d, 2 * d, d), rng)
        self.point_mlp = MLP((d, d, d), rng)

    def point_features(self, pf, f_sem):
        """Additive semantic fusion, then a residual per-point refinement."""
        fused = pf if f_sem is None else pf + self.sem(f_sem)
        return fused, fused + self.point_mlp(fused)

    def refine(self, q, fused):
        k, v = self.wk(fused), self.wv(fused)
        q = q + self.wo(ag.set_attention(self.wq(self.ln_q(q)), k, v))
        return q + self.mlp(self.ln_m(q))


class AffordanceDecoder(Module):
    def __init__(self, cfg: DecoderConfig, d_geo, d_plan, rng):
        d = cfg.d_model
        self.query = Linear(d_plan, d, rng)
        self.geo = Linear(d_geo, d, rng)
        self.scales = [DecoderScale(d, cfg.d_sem, rng) for _ in range(cfg.scales)]
        self.mask_proj = Linear(d, d, rng)
        self.d = d

    def __call__(self, h_seg, f_geo, f_sem=None):
        """Mask logits (T, N) for T query vectors (T, d_plan)."""
        if f_sem is not None and f_sem.shape[0] != f_geo.shape[0]:
            raise ValueError(f"semantic bank has {f_sem.shape[0]} rows, scene has {f_geo.shape[0]}")
        q = self.query(h_seg)
        pf = self.geo(f_geo)
        for scale in self.scales:
            fused, pf = scale.point_features(pf, f_sem)
            q = scale.refine(q, fused)
        keys = self.mask_proj(pf)
        return ag.matmul(q, ag.transpose(keys)) * (1.0 / np.sqrt(self.d))


# -- whole model --------------------------------------------------------------------------
class SeqSplatNet(Module):
    def __init__(self, vocab: Vocabulary, cfg: ModelConfig = None, seed=0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.vocab = vocab
        rng = rng_stream(seed, "init")
        d = cfg.encoder.d_model
        self.encoder = SceneEncoder(cfg.encoder, rng)
        self.mask_encoder = MaskEncoder(d, rng)
        self.recon = ReconstructionHead(d, rng)
        self.planner = Planner(cfg.planner, len(vocab), rng)
        self.decoder = AffordanceDecoder(cfg.decoder, d, cfg.planner.d_model, rng)

    # perception
    def encode_scene(self, scene):
        return self.encoder(scene)

    def encode_mask(self, mask, f_geo):
        scores = getattr(mask, "scores", mask)
        return self.mask_encoder(scores, f_geo)

    def reconstruct_mask(self, e_mask, f_geo):
        return self.recon(e_mask, f_geo)

    # planning
    def _prompt(self, instruction_ids):
        return list(instruction_ids) + [BOS]

    def plan_teacher_forced(self, instruction_ids, gold_output_ids):
        prompt = self._prompt(instruction_ids)
        ids = prompt + list(gold_output_ids)
        # the last gold token is only ever a target
        h, logits = self.planner(ids[:-1])
        start = len(prompt) - 1
        out_logits = logits[start:]
        positions = [i for i in range(len(prompt), len(ids) - 1) if ids[i] == SEG]
        states = [h[i:i + 1] for i in positions]
        return SegOutput(out_logits, states, positions, list(gold_output_ids))

    def plan_greedy(self, instruction_ids, max_steps=8, max_tokens=96):
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        ids = self._prompt(instruction_ids)
        out, logits_rows, states, positions = [], [], [], []
        limit = min(max_tokens, self.cfg.planner.context)
        while True:
            h, logits = self.planner(ids)
            if out and out[-1] == SEG:
                # hidden state at the <SEG> position itself
                states.append(h[len(ids) - 1:len(ids)])
                positions.append(len(ids) - 1)
                if len(states) >= max_steps:
                    break
            if len(ids) >= limit:
                break
            row = logits.data[-1]
            nxt = int(np.flatnonzero(row == row.max())[0])
            logits_rows.append(logits[len(ids) - 1:len(ids)])
            out.append(nxt)
            if nxt == EOS:
                break
            ids.append(nxt)
        token_logits = ag.concat(logits_rows, axis=0) if logits_rows else None
        return SegOutput(token_logits, states, positions, out, self.vocab.decode(out))

    def decode_affordance(self, h_seg, f_geo, f_sem=None):
        if isinstance(f_sem, np.ndarray):
            f_sem = ag.Tensor(f_sem)
        return self.decoder(h_seg, f_geo, f_sem)

    def forward_sequence(self, instruction, scene, f_sem=None, mode="teacher", gold_steps=None,
                         max_steps=8, f_geo=None):
        """Token logits and one mask-logit vector per emitted ``<SEG>``."""
        ins = self.vocab.encode(instruction) if isinstance(instruction, str) else list(instruction)
        if f_geo is None:
            f_geo = self.encode_scene(scene)
        if mode == "teacher":
            if gold_steps is None:
                raise ValueError("teacher mode needs the gold step texts")
            seg = self.plan_teacher_forced(ins, gold_output_ids(self.vocab, gold_steps))
        elif mode == "greedy":
            seg = self.plan_greedy(ins, max_steps=max_steps)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if not seg.seg_states:
            return seg, []
        sem = None if f_sem is None else getattr(f_sem, "data", f_sem)
        logits = self.decode_affordance(seg.seg_matrix(), f_geo,
                                        None if sem is None else ag.Tensor(sem))
        return seg, [logits[t] for t in range(len(seg.seg_states))]

    # parameter groups
    def perception_prefixes(self):
        return ("encoder.", "mask_encoder.", "recon.")

    def decoder_prefixes(self):
        return ("decoder.",)
