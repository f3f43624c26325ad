"""Tiny causal transformer decoder with adapter pairs on each fused QKV projection.

GPT-2-shaped at desk scale: learned token and position embeddings, pre-norm
blocks of causal self-attention plus a 4x GELU feed-forward, a final layer
norm, and a language-model head tied to the token table. The single fused
projection that emits query/key/value together (d_model in, 3*d_model out) is
the only adapted site; everything else is plain backbone.

An optional scene prefix stands in for perceptual grounding: each sample may
carry a scene id that selects one learned embedding row, prepended to the token
sequence, so answers can condition on something beyond the question text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import MoLoraLayer, RankVector
from .autodiff import GradTape, Node, Param, entropy_nats, rng_stream, softmax_rows

MODE_FROZEN = "frozen-backbone"
MODE_FULL = "full"
MODE_EVAL = "eval"
_MODES = (MODE_FROZEN, MODE_FULL, MODE_EVAL)


@dataclass(frozen=True)
class DecoderConfig:
    vocab: int
    blocks: int = 12
    d_model: int = 64
    heads: int = 4
    max_seq: int = 128
    scenes: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if min(self.vocab, self.blocks, self.d_model, self.heads, self.max_seq) < 1:
            raise ValueError("config dimensions must be positive")
        if self.scenes < 0:
            raise ValueError("scenes must be >= 0")

    @property
    def fused_dim(self) -> int:
        return 3 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class Block:
    ln1_gain: Param
    ln1_bias: Param
    qkv: MoLoraLayer
    qkv_bias: Param
    out_w: Param
    out_bias: Param
    ln2_gain: Param
    ln2_bias: Param
    fc1_w: Param
    fc1_bias: Param
    fc2_w: Param
    fc2_bias: Param

    def backbone_params(self) -> list[Param]:
        return [
            self.ln1_gain, self.ln1_bias, self.qkv.frozen, self.qkv_bias,
            self.out_w, self.out_bias, self.ln2_gain, self.ln2_bias,
            self.fc1_w, self.fc1_bias, self.fc2_w, self.fc2_bias,
        ]

    def adapter_params(self) -> list[Param]:
        return [self.qkv.lora.B, self.qkv.lora.A, self.qkv.mora.M]


@dataclass
class GenerationTrace:
    """Greedy decode record: emitted ids and the entropy of each predictive step."""

    tokens: list[int]
    entropies: list[float]
    text: str


class TinyDecoder:
    """See module docstring. Build through ``build_model`` for seeded init."""

    def __init__(self, config: DecoderConfig, r_l: RankVector, r_m: RankVector, seed: int):
        if len(r_l) != config.blocks or len(r_m) != config.blocks:
            raise ValueError(
                f"rank vectors have lengths {len(r_l)}/{len(r_m)}, model has {config.blocks} blocks"
            )
        for r in r_m:
            if r % 2 != 0:
                raise ValueError(f"mora ranks must be even, got {r}")
            if r >= config.fused_dim:
                raise ValueError(f"mora rank {r} must be below the fused width {config.fused_dim}")
        self.config = config
        self.r_l = r_l
        self.r_m = r_m
        self.seed = seed
        d, f = config.d_model, config.fused_dim
        rng = rng_stream(seed, "model-init")
        adapter_rng = rng_stream(seed, "adapter-init")

        def gauss(name, rows, cols, std=0.02):
            return Param(name, rng.normal(0.0, std, size=(rows, cols)))

        # Projections that write into the residual stream get their init
        # shrunk by 1/sqrt(2 * blocks); without this, deep stacks of random
        # blocks start far off-scale and small-step training is an init
        # lottery.
        res_std = 0.02 / math.sqrt(2 * config.blocks)
        self.wte = gauss("wte", config.vocab, d)
        self.wpe = gauss("wpe", config.max_seq, d)
        self.prefix = gauss("prefix", config.scenes, d) if config.scenes else None
        self.blocks: list[Block] = []
        for i in range(config.blocks):
            p = f"block{i}"
            self.blocks.append(Block(
                ln1_gain=Param(f"{p}.ln1.gain", np.ones((1, d))),
                ln1_bias=Param(f"{p}.ln1.bias", np.zeros((1, d))),
                qkv=MoLoraLayer.create(d=f, k=d, r_l=r_l[i], r_m=r_m[i], rng=rng,
                                       layer_index=i, name=f"{p}.qkv", adapter_rng=adapter_rng),
                qkv_bias=Param(f"{p}.qkv.bias", np.zeros((1, f))),
                out_w=gauss(f"{p}.attn_out.w", d, d, std=res_std),
                out_bias=Param(f"{p}.attn_out.bias", np.zeros((1, d))),
                ln2_gain=Param(f"{p}.ln2.gain", np.ones((1, d))),
                ln2_bias=Param(f"{p}.ln2.bias", np.zeros((1, d))),
                fc1_w=gauss(f"{p}.mlp.fc1.w", 4 * d, d),
                fc1_bias=Param(f"{p}.mlp.fc1.bias", np.zeros((1, 4 * d))),
                fc2_w=gauss(f"{p}.mlp.fc2.w", d, 4 * d, std=res_std),
                fc2_bias=Param(f"{p}.mlp.fc2.bias", np.zeros((1, d))),
            ))
        self.ln_f_gain = Param("ln_f.gain", np.ones((1, d)))
        self.ln_f_bias = Param("ln_f.bias", np.zeros((1, d)))

    # ---- parameter sets ---------------------------------------------------------

    def backbone_params(self) -> list[Param]:
        out = [self.wte, self.wpe]
        if self.prefix is not None:
            out.append(self.prefix)
        for b in self.blocks:
            out.extend(b.backbone_params())
        out.extend([self.ln_f_gain, self.ln_f_bias])
        return out

    def adapter_params(self) -> list[Param]:
        return [p for b in self.blocks for p in b.adapter_params()]

    def params(self) -> list[Param]:
        return self.backbone_params() + self.adapter_params()

    def trainable_params(self, mode: str) -> list[Param]:
        if mode == MODE_FROZEN:
            return self.adapter_params()
        if mode == MODE_FULL:
            return self.backbone_params()
        if mode == MODE_EVAL:
            return []
        raise ValueError(f"unknown mode {mode!r}")

    def copy(self) -> "TinyDecoder":
        """Deep copy sharing no arrays (for branching experiments)."""
        clone = TinyDecoder(self.config, self.r_l, self.r_m, self.seed)
        for mine, theirs in zip(self.params(), clone.params()):
            theirs.value[:] = mine.value
        return clone

    # ---- forward ---------------------------------------------------------------

    def forward(self, tape: GradTape, tokens, scene_id: int | None = None,
                mode: str = MODE_EVAL, use_adapters: bool = True) -> Node:
        """Logits for every position; one extra leading row when a scene prefix is set.

        Mode picks which parameter family can accumulate gradients:
        frozen-backbone trains only adapters, full trains only the backbone,
        eval trains nothing.
        """
        if mode not in _MODES:
            raise ValueError(f"unknown mode {mode!r}")
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.intp)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token sequence must be a non-empty 1-D id list")
        if ids.min() < 0 or ids.max() >= cfg.vocab:
            raise ValueError(f"unknown token id outside [0, {cfg.vocab})")
        rows = ids.size + (1 if scene_id is not None else 0)
        if rows > cfg.max_seq:
            raise ValueError(f"sequence of {rows} positions exceeds max_seq {cfg.max_seq}")

        backbone = mode == MODE_FULL
        adapters = mode == MODE_FROZEN

        wte = tape.parameter(self.wte, trainable=backbone)
        x = tape.embedding(wte, ids)
        if scene_id is not None:
            if self.prefix is None:
                raise ValueError("model was built without scene prefixes")
            if not 0 <= scene_id < cfg.scenes:
                raise ValueError(f"scene id {scene_id} outside [0, {cfg.scenes})")
            lead = tape.embedding(tape.parameter(self.prefix, trainable=backbone), [scene_id])
            x = tape.concat_rows([lead, x])
        pos = tape.embedding(tape.parameter(self.wpe, trainable=backbone), np.arange(rows))
        x = tape.add(x, pos)

        inv_sqrt_hd = 1.0 / math.sqrt(cfg.head_dim)
        for b in self.blocks:
            h = tape.layer_norm(x, tape.parameter(b.ln1_gain, backbone), tape.parameter(b.ln1_bias, backbone))
            qkv = b.qkv.apply(tape, h, adapters_trainable=adapters,
                              backbone_trainable=backbone, use_adapters=use_adapters)
            qkv = tape.add_bias(qkv, tape.parameter(b.qkv_bias, backbone))
            d = cfg.d_model
            q = tape.slice_cols(qkv, 0, d)
            k = tape.slice_cols(qkv, d, 2 * d)
            v = tape.slice_cols(qkv, 2 * d, 3 * d)
            heads = []
            for hidx in range(cfg.heads):
                lo, hi = hidx * cfg.head_dim, (hidx + 1) * cfg.head_dim
                qh = tape.slice_cols(q, lo, hi)
                kh = tape.slice_cols(k, lo, hi)
                vh = tape.slice_cols(v, lo, hi)
                scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_hd)
                probs = tape.softmax_rows(tape.causal_mask_fill(scores))
                heads.append(tape.matmul(probs, vh))
            attn = tape.concat_cols(heads)
            attn = tape.add_bias(tape.matmul(attn, tape.transpose(tape.parameter(b.out_w, backbone))),
                                 tape.parameter(b.out_bias, backbone))
            x = tape.add(x, attn)
            h = tape.layer_norm(x, tape.parameter(b.ln2_gain, backbone), tape.parameter(b.ln2_bias, backbone))
            m = tape.add_bias(tape.matmul(h, tape.transpose(tape.parameter(b.fc1_w, backbone))),
                              tape.parameter(b.fc1_bias, backbone))
            m = tape.gelu(m)
            m = tape.add_bias(tape.matmul(m, tape.transpose(tape.parameter(b.fc2_w, backbone))),
                              tape.parameter(b.fc2_bias, backbone))
            x = tape.add(x, m)

        x = tape.layer_norm(x, tape.parameter(self.ln_f_gain, backbone), tape.parameter(self.ln_f_bias, backbone))
        return tape.matmul(x, tape.transpose(wte))


def build_model(config: DecoderConfig, r_l: RankVector, r_m: RankVector, seed: int) -> TinyDecoder:
    """Deterministic construction: one adapter pair per block on the fused projection."""
    return TinyDecoder(config, r_l, r_m, seed)


def generate_greedy(model: TinyDecoder, prompt, max_new: int, stop_id: int,
                    scene_id: int | None = None, vocab=None) -> GenerationTrace:
    """Argmax decoding with per-step predictive entropy (nats).

    Emits until ``stop_id`` or ``max_new`` tokens; the stop token, when
    produced, is included in the trace. ``vocab`` (anything with a ``decode``
    taking an id list) renders the text field; without it the ids are joined
    as decimals.
    """
    prompt = list(int(t) for t in prompt)
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    lead = 1 if scene_id is not None else 0
    if lead + len(prompt) + max_new > model.config.max_seq:
        raise ValueError(
            f"prompt ({len(prompt)}) plus max_new ({max_new}) exceeds max_seq {model.config.max_seq}"
        )
    seq = list(prompt)
    out_ids: list[int] = []
    entropies: list[float] = []
    for _ in range(max_new):
        tape = GradTape()
        logits = model.forward(tape, seq, scene_id=scene_id, mode=MODE_EVAL)
        probs = softmax_rows(logits.value[-1])
        entropies.append(entropy_nats(probs))
        nxt = int(np.argmax(probs))
        out_ids.append(nxt)
        seq.append(nxt)
        if nxt == stop_id:
            break
    if vocab is not None:
        text = vocab.decode(out_ids)
    else:
        text = " ".join(str(t) for t in out_ids)
    return GenerationTrace(tokens=out_ids, entropies=entropies, text=text)
