"""Modality encoder: gated multi-view embedding, token assembly, transformer blocks.

A flattened clip is projected by several parallel linear maps ("views"), each
gated by a shared sigmoid gate and batch-normalized.  The resulting view
tokens are prepended with a learnable class token and extended with learnable
prompt tokens, shifted by positional and modality embeddings, and run through
pre-norm residual attention/FFN blocks.  The class-token output is the clip
feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


@dataclass
class EncoderConfig:
    input_dim: int
    n_views: int = 16
    embed_dim: int = 128
    n_heads: int = 4
    n_blocks: int = 2
    ffn_dim: int | None = None
    n_prompts: int = 4
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.embed_dim
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.n_views < 1 or self.n_blocks < 1:
            raise ValueError("n_views and n_blocks must be >= 1")

    @property
    def seq_len(self) -> int:
        return 1 + self.n_views + self.n_prompts


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d_head)) v for per-head tensors [..., T, d_head]."""
    d_head = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_head))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, w_out: Tensor, b_out: Tensor) -> Tensor:
    """Multi-head self-attention over projected sequences [B, T, D].

    Heads attend independently at scale 1/sqrt(d_head); their concatenated
    outputs are mixed by `w_out`.
    """
    batch, seq, dim = q.shape
    if dim % n_heads != 0:
        raise ValueError("model dim must divide evenly into heads")
    d_head = dim // n_heads

    def split(x):
        return ad.transpose(ad.reshape(x, (batch, seq, n_heads, d_head)), (0, 2, 1, 3))

    heads = scaled_dot_attention(split(q), split(k), split(v))  # [B, h, T, d_head]
    merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (batch, seq, dim))
    return ad.add(ad.matmul(merged, w_out), b_out)


class Encoder:
    """One modality-and-resolution encoder with its own parameters."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn_states: list[BatchNormState] = []
        c, d = config, config.embed_dim

        def p(name, array):
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            t = ad.parameter(array)
            self.params[name] = t
            return t

        lin = lambda fan_in, *shape: rng.standard_normal(shape) / math.sqrt(fan_in)
        for i in range(c.n_views):
            p(f"view_w.{i}", lin(c.input_dim, c.input_dim, d))
            p(f"view_b.{i}", np.zeros(d))
            p(f"view_bn.{i}.gamma", np.ones(d))
            p(f"view_bn.{i}.beta", np.zeros(d))
            self.bn_states.append(BatchNormState(d))
        p("gate_w", lin(c.input_dim, c.input_dim, d))
        p("gate_b", np.zeros(d))

        p("cls_token", 0.02 * rng.standard_normal(d))
        p("pos_embed", 0.02 * rng.standard_normal((c.seq_len, d)))
        p("mod_embed", 0.02 * rng.standard_normal(d))
        p("prompt_tokens", 0.02 * rng.standard_normal((c.n_prompts, d)))

        for b in range(c.n_blocks):
            for ln in ("ln1", "ln2"):
                p(f"block{b}.{ln}.gamma", np.ones(d))
                p(f"block{b}.{ln}.beta", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                p(f"block{b}.attn.{proj}", lin(d, d, d))
                p(f"block{b}.attn.{proj}_b", np.zeros(d))
            p(f"block{b}.ffn.w1", lin(d, d, c.ffn_dim))
            p(f"block{b}.ffn.b1", np.zeros(c.ffn_dim))
            p(f"block{b}.ffn.w2", lin(c.ffn_dim, c.ffn_dim, d))
            p(f"block{b}.ffn.b2", np.zeros(d))
        p("out_ln.gamma", np.ones(d))
        p("out_ln.beta", np.zeros(d))

    # -- forward pieces ------------------------------------------------------
    def mvge_forward(self, x, train: bool = False) -> Tensor:
        """Gated multi-view embedding: [B, input_dim] -> tokens [B, n_views, D]."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected [batch, {self.config.input_dim}] input, got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("encoder input contains non-finite values")
        gate = ad.sigmoid(ad.add(ad.matmul(x, self.params["gate_w"]), self.params["gate_b"]))
        tokens = []
        for i in range(self.config.n_views):
            e = ad.add(ad.matmul(x, self.params[f"view_w.{i}"]), self.params[f"view_b.{i}"])
            gated = ad.hadamard(gate, e)
            normed = ad.batch_norm(gated, self.params[f"view_bn.{i}.gamma"],
                                   self.params[f"view_bn.{i}.beta"], self.bn_states[i], train)
            tokens.append(ad.relu(normed))
        return ad.stack(tokens, axis=1)

    def assemble_tokens(self, tokens: Tensor) -> Tensor:
        """Prepend class token, append prompts, add positional + modality embeddings."""
        batch = tokens.shape[0]
        d = self.config.embed_dim
        cls = ad.expand_leading(ad.reshape(self.params["cls_token"], (1, d)), batch)
        prompts = ad.expand_leading(self.params["prompt_tokens"], batch)
        seq = ad.concat([cls, tokens, prompts], axis=1)
        seq = ad.add(seq, self.params["pos_embed"])
        return ad.add(seq, self.params["mod_embed"])

    def _block(self, seq: Tensor, b: int, train: bool, rng) -> Tensor:
        p = self.params
        normed = ad.layer_norm(seq, p[f"block{b}.ln1.gamma"], p[f"block{b}.ln1.beta"])
        q = ad.add(ad.matmul(normed, p[f"block{b}.attn.wq"]), p[f"block{b}.attn.wq_b"])
        k = ad.add(ad.matmul(normed, p[f"block{b}.attn.wk"]), p[f"block{b}.attn.wk_b"])
        v = ad.add(ad.matmul(normed, p[f"block{b}.attn.wv"]), p[f"block{b}.attn.wv_b"])
        att = attention(q, k, v, self.config.n_heads, p[f"block{b}.attn.wo"], p[f"block{b}.attn.wo_b"])
        att = ad.dropout(att, self.config.dropout_p, rng, train)
        seq = ad.add(seq, att)

        normed = ad.layer_norm(seq, p[f"block{b}.ln2.gamma"], p[f"block{b}.ln2.beta"])
        h = ad.relu(ad.add(ad.matmul(normed, p[f"block{b}.ffn.w1"]), p[f"block{b}.ffn.b1"]))
        h = ad.add(ad.matmul(h, p[f"block{b}.ffn.w2"]), p[f"block{b}.ffn.b2"])
        h = ad.dropout(h, self.config.dropout_p, rng, train)
        return ad.add(seq, h)

    def encode(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Full encoder: flattened clip batch [B, input_dim] -> features [B, D]."""
        seq = self.assemble_tokens(self.mvge_forward(x, train))
        for b in range(self.config.n_blocks):
            seq = self._block(seq, b, train, rng)
        seq = ad.layer_norm(seq, self.params["out_ln.gamma"], self.params["out_ln.beta"])
        return ad.take_index(seq, 0, axis=1)

    def encode_clips(self, clips: list, train: bool = False, rng=None, dtype=None) -> Tensor:
        """Encode Clip objects; they must share modality and duration."""
        if len({c.modality for c in clips}) > 1:
            raise ValueError("encode_clips requires a single modality per call")
        if len({c.t_seconds for c in clips}) > 1:
            raise ValueError("encode_clips requires a single clip duration per call")
        dt = dtype or ad.default_dtype()
        x = np.stack([c.flat() for c in clips]).astype(dt)
        return self.encode(x, train=train, rng=rng)

    # -- state ----------------------------------------------------------------
    def named_params(self) -> dict:
        return dict(self.params)

    def named_arrays(self) -> dict:
        """Parameters plus batch-norm running statistics, copied for checkpointing."""
        out = {name: t.data.copy() for name, t in self.params.items()}
        for i, st in enumerate(self.bn_states):
            out[f"view_bn.{i}.running_mean"] = st.running_mean.copy()
            out[f"view_bn.{i}.running_var"] = st.running_var.copy()
        return out

    def load_arrays(self, arrays: dict, prefix: str = "") -> None:
        dt = ad.default_dtype()
        for name, t in self.params.items():
            src = arrays[prefix + name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {prefix + name}: {src.shape} vs {t.data.shape}")
            t.data = src.astype(dt)
        for i, st in enumerate(self.bn_states):
            st.running_mean = arrays[prefix + f"view_bn.{i}.running_mean"].astype(dt)
            st.running_var = arrays[prefix + f"view_bn.{i}.running_var"].astype(dt)
