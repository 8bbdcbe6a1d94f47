"""Numpy forward pass of the pose-conditioned memory retriever.

Toy-scale and deterministic: parameters come from a seed, every block is
pre-normalized with a residual path, and output projections start at zero
so a freshly built model is the identity on its residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyMemoryError, NoValidMemoryError, ShapeError, ValidationError
from .pose import CameraPose, Trajectory, flatten_pose

POSE_DIM = 12
LN_EPS = 1e-5


# -- data -----------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryEntry:
    time_step: int
    pose_token: np.ndarray  # (d_p,)
    memory_tokens: np.ndarray  # (M_mem, d_m)

    def __post_init__(self):
        p = np.asarray(self.pose_token, dtype=float).reshape(-1)
        m = np.atleast_2d(np.asarray(self.memory_tokens, dtype=float))
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(m))):
            raise ValidationError("memory entry has non-finite values")
        object.__setattr__(self, "pose_token", p)
        object.__setattr__(self, "memory_tokens", m)

    @property
    def n_tokens(self) -> int:
        return 1 + len(self.memory_tokens)


@dataclass(frozen=True)
class MemoryBank:
    """Entries in time order; ``mask`` flags each token (pose token first) as valid."""

    entries: tuple[MemoryEntry, ...]
    mask: np.ndarray | None = None

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if entries:
            shape = entries[0].memory_tokens.shape
            dp = entries[0].pose_token.shape
            for e in entries:
                if e.memory_tokens.shape != shape or e.pose_token.shape != dp:
                    raise ShapeError("bank entries differ in dimensions")
        total = sum(e.n_tokens for e in entries)
        mask = np.ones(total, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool).copy()
        if mask.shape != (total,):
            raise ShapeError(f"mask has {mask.size} flags for {total} tokens")
        object.__setattr__(self, "mask", mask)

    def __len__(self) -> int:
        return len(self.entries)

    def entry_mask(self, i: int) -> np.ndarray:
        start = sum(e.n_tokens for e in self.entries[:i])
        return self.mask[start:start + self.entries[i].n_tokens]

    def masked(self, i: int) -> MemoryBank:
        """Copy with every token of entry ``i`` invalidated."""
        start = sum(e.n_tokens for e in self.entries[:i])
        m = self.mask.copy()
        m[start:start + self.entries[i].n_tokens] = False
        return MemoryBank(self.entries, m)

    def without(self, i: int) -> MemoryBank:
        """Copy with entry ``i`` deleted."""
        keep = [j for j in range(len(self.entries)) if j != i]
        return MemoryBank([self.entries[j] for j in keep],
                          np.concatenate([self.entry_mask(j) for j in keep]) if keep else np.zeros(0, bool))

    def reordered(self, order: Sequence[int]) -> MemoryBank:
        return MemoryBank([self.entries[j] for j in order], np.concatenate([self.entry_mask(j) for j in order]))


@dataclass(frozen=True)
class WorldTokens:
    tokens: np.ndarray  # (M_q, d_model)
    time_step: int = 0

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.tokens, dtype=float))
        if not np.all(np.isfinite(t)):
            raise ValidationError("world tokens are not finite")
        object.__setattr__(self, "tokens", t)


# -- parameters -------------------------------------------------------------------

@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int


@dataclass
class BlockParams:
    attn: AttentionParams
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class RetrieverParams:
    d_model: int
    n_heads: int
    M_q: int
    M_mem: int
    d_m: int
    D: int
    d_p: int
    phi_p: np.ndarray  # (d_p, d_model), zero bias
    phi_m: np.ndarray  # (d_m, d_model)
    mem_blocks: list[BlockParams]
    qry_blocks: list[BlockParams]
    queries: np.ndarray  # (M_q, d_model)
    cross: AttentionParams
    recon: np.ndarray  # (d_model, d_m), no bias
    phi_w1: np.ndarray  # (d_model, D)
    phi_w2: np.ndarray  # (D, D)
    inject: list[AttentionParams]
    positional: bool = True
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, *, d_model: int = 64, n_heads: int = 4, n_blocks: int = 2, M_q: int = 8,
             M_mem: int = 8, d_m: int = 16, D: int = 96, d_p: int = POSE_DIM, n_inject_layers: int = 2,
             D_heads: int = 4, positional: bool = True, zero_outputs: bool = True) -> RetrieverParams:
        if d_model % n_heads or D % D_heads:
            raise ValidationError("model widths must divide evenly into heads")
        if min(d_model, M_q, M_mem, d_m, D, d_p, n_blocks) < 1:
            raise ValidationError("all dimensions must be positive")
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out, zero=False):
            if zero:
                return np.zeros((fan_in, fan_out))
            return rng.normal(size=(fan_in, fan_out)) / math.sqrt(fan_in)

        def attn(d_q, d_kv, heads):
            return AttentionParams(dense(d_q, d_q), dense(d_kv, d_q), dense(d_kv, d_q),
                                   dense(d_q, d_q, zero_outputs), heads)

        def block():
            return BlockParams(attn(d_model, d_model, n_heads), dense(d_model, 2 * d_model), np.zeros(2 * d_model),
                               dense(2 * d_model, d_model, zero_outputs), np.zeros(d_model))

        return cls(
            d_model=d_model, n_heads=n_heads, M_q=M_q, M_mem=M_mem, d_m=d_m, D=D, d_p=d_p,
            phi_p=dense(d_p, d_model), phi_m=dense(d_m, d_model),
            mem_blocks=[block() for _ in range(n_blocks)],
            qry_blocks=[block() for _ in range(n_blocks)],
            queries=rng.normal(size=(M_q, d_model)),
            cross=attn(d_model, d_model, n_heads),
            recon=dense(d_model, d_m),
            phi_w1=dense(d_model, D), phi_w2=dense(D, D),
            inject=[attn(D, D, D_heads) for _ in range(n_inject_layers)],
            positional=positional, seed=seed,
        )


# -- primitives ---------------------------------------------------------------------

def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def masked_softmax(scores: np.ndarray, key_mask: np.ndarray | None) -> np.ndarray:
    """Softmax over the last axis; masked keys get weight 0, rows with no valid key are all zero."""
    if key_mask is not None:
        scores = np.where(key_mask, scores, -np.inf)
    top = np.max(scores, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(scores - top)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def attention(xq: np.ndarray, xkv: np.ndarray, p: AttentionParams, key_mask=None):
    """Multi-head attention; returns ``(output, weights)`` with weights ``(heads, n_q, n_kv)``."""
    h = p.n_heads
    nq, nk = len(xq), len(xkv)
    q = (xq @ p.wq).reshape(nq, h, -1).transpose(1, 0, 2)
    k = (xkv @ p.wk).reshape(nk, h, -1).transpose(1, 0, 2)
    v = (xkv @ p.wv).reshape(nk, h, -1).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(q.shape[-1])
    w = masked_softmax(scores, None if key_mask is None else np.asarray(key_mask, bool)[None, None, :])
    out = (w @ v).transpose(1, 0, 2).reshape(nq, -1)
    return out @ p.wo, w


def transformer_block(x: np.ndarray, p: BlockParams, key_mask=None) -> np.ndarray:
    a, _ = attention(layer_norm(x), layer_norm(x), p.attn, key_mask)
    x = x + a
    return x + gelu(layer_norm(x) @ p.w1 + p.b1) @ p.w2 + p.b2


def positional_encoding(pose_token: np.ndarray, time_step: int, d_model: int) -> np.ndarray:
    """Sinusoids of camera center, forward axis and time step, zero-padded to ``d_model``."""
    m = np.asarray(pose_token, float).reshape(3, 4)
    r, t = m[:, :3], m[:, 3]
    feats = np.concatenate([-r.T @ t, r[2], [float(time_step)]])
    n_freq = max(1, d_model // (2 * len(feats)))
    freqs = 1.0 / 100.0 ** (np.arange(n_freq) / n_freq)
    ang = np.outer(feats, freqs).reshape(-1)
    enc = np.concatenate([np.sin(ang), np.cos(ang)])[:d_model]
    return np.pad(enc, (0, d_model - len(enc)))


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# -- retriever ------------------------------------------------------------------------

def build_joint_sequence(entry: MemoryEntry, params: RetrieverParams) -> np.ndarray:
    """Embedded pose token followed by the embedded memory tokens, ``(1 + M_mem, d_model)``."""
    _check(entry.pose_token.shape == (params.d_p,), f"pose token must have {params.d_p} values")
    _check(entry.memory_tokens.shape[1] == params.d_m, f"memory tokens must have width {params.d_m}")
    return np.vstack([entry.pose_token @ params.phi_p, entry.memory_tokens @ params.phi_m])


def _encode_entry(entry: MemoryEntry, mask: np.ndarray, params: RetrieverParams) -> np.ndarray:
    x = build_joint_sequence(entry, params)
    if params.positional:
        x = x + positional_encoding(entry.pose_token, entry.time_step, params.d_model)
    for blk in params.mem_blocks:
        x = transformer_block(x, blk, mask)
    return x


def encode_memory(bank: MemoryBank, params: RetrieverParams) -> tuple[np.ndarray, np.ndarray]:
    """Encode each time step separately and concatenate in bank order.

    Masked tokens are still carried through (so shapes stay fixed) but never
    serve as attention keys, here or downstream.
    """
    if len(bank) == 0:
        raise EmptyMemoryError("memory bank is empty")
    parts = [_encode_entry(e, bank.entry_mask(i), params) for i, e in enumerate(bank.entries)]
    return np.vstack(parts), bank.mask.copy()


def build_and_encode_queries(query_pose_token, params: RetrieverParams, time_step: int = 0) -> np.ndarray:
    """Encoded ``[query pose; learnable queries]``, ``(1 + M_q, d_model)``."""
    p = np.asarray(query_pose_token, dtype=float).reshape(-1)
    _check(p.shape == (params.d_p,), f"query pose token must have {params.d_p} values")
    pose_row = p @ params.phi_p
    if params.positional:
        pose_row = pose_row + positional_encoding(p, time_step, params.d_model)
    x = np.vstack([pose_row, params.queries])
    for blk in params.qry_blocks:
        x = transformer_block(x, blk)
    return x


def retrieve(Q: np.ndarray, X_mem: np.ndarray, mask, params: RetrieverParams, return_weights: bool = False):
    """Residual cross-attention from queries to memory, keeping the learnable-query rows."""
    Q = np.asarray(Q, dtype=float)
    X_mem = np.asarray(X_mem, dtype=float)
    mask = np.ones(len(X_mem), bool) if mask is None else np.asarray(mask, dtype=bool)
    _check(Q.shape == (1 + params.M_q, params.d_model), "query block has the wrong shape")
    _check(X_mem.ndim == 2 and X_mem.shape[1] == params.d_model, "memory has the wrong width")
    _check(mask.shape == (len(X_mem),), "mask length differs from memory length")
    if not mask.any():
        raise NoValidMemoryError("every memory token is masked")
    out, w = attention(layer_norm(Q), layer_norm(X_mem), params.cross, mask)
    world = WorldTokens((Q + out)[1:])
    return (world, w) if return_weights else world


def retrieve_for_pose(bank: MemoryBank, pose: CameraPose, params: RetrieverParams) -> WorldTokens:
    X, mask = encode_memory(bank, params)
    Q = build_and_encode_queries(flatten_pose(pose), params, pose.time_step)
    w = retrieve(Q, X, mask, params)
    return WorldTokens(w.tokens, pose.time_step)


def reconstruct_memory(w: WorldTokens | np.ndarray, params: RetrieverParams) -> np.ndarray:
    """Linear head back to memory space, ``(M_q, d_m)``."""
    t = w.tokens if isinstance(w, WorldTokens) else np.atleast_2d(np.asarray(w, dtype=float))
    _check(t.shape[1] == params.d_model, f"world tokens must have width {params.d_model}")
    return t @ params.recon


def embed_world_tokens(w: WorldTokens | np.ndarray, params: RetrieverParams) -> np.ndarray:
    """Two-layer map of world tokens into the latent width ``D``."""
    t = w.tokens if isinstance(w, WorldTokens) else np.atleast_2d(np.asarray(w, dtype=float))
    _check(t.shape[1] == params.d_model, f"world tokens must have width {params.d_model}")
    return gelu(t @ params.phi_w1) @ params.phi_w2


def inject_world_tokens(Z, w: WorldTokens | np.ndarray, params: RetrieverParams, layer: int = 0,
                        return_weights: bool = False):
    """One residual cross-attention from latent tokens ``Z`` (L_z, D) to the embedded world tokens."""
    Z = np.asarray(Z, dtype=float)
    _check(Z.ndim == 2 and Z.shape[1] == params.D, f"latent tokens must have width {params.D}")
    if not np.all(np.isfinite(Z)):
        raise ValidationError("latent tokens are not finite")
    W = embed_world_tokens(w, params)
    out, weights = attention(layer_norm(Z), W, params.inject[layer])
    Z2 = Z + out
    return (Z2, weights) if return_weights else Z2


def inject_layers(Z, w: WorldTokens | np.ndarray, params: RetrieverParams) -> np.ndarray:
    """Apply every injection layer in turn, reusing the same world tokens."""
    for layer in range(len(params.inject)):
        Z = inject_world_tokens(Z, w, params, layer)
    return Z


# -- synthetic memory ------------------------------------------------------------------

def pose_features(pose: CameraPose, n_freq: int = 3) -> np.ndarray:
    """Low-frequency sinusoids of camera center and forward axis."""
    base = np.concatenate([pose.center, pose.forward])
    ang = np.outer(base, 0.5 ** np.arange(n_freq)).reshape(-1)
    return np.concatenate([np.sin(ang), np.cos(ang)])


def synth_memory_features(traj: Trajectory, seed: int = 0, M_mem: int = 8, d_m: int = 16) -> MemoryBank:
    """Stand-in 3D-aware features: a fixed random linear read-out of smooth pose features."""
    rng = np.random.default_rng(seed)
    n_feat = len(pose_features(traj[0])) if len(traj) else 0
    proj = rng.normal(size=(n_feat, M_mem * d_m)) / math.sqrt(max(n_feat, 1))
    entries = [
        MemoryEntry(p.time_step, flatten_pose(p), (pose_features(p) @ proj).reshape(M_mem, d_m))
        for p in traj
    ]
    return MemoryBank(entries)


def random_bank(rng: np.random.Generator, n_entries: int, params: RetrieverParams, mask_prob: float = 0.0):
    """Random bank with optional random token masking (at least one token stays valid)."""
    entries = [
        MemoryEntry(int(t), rng.normal(size=params.d_p), rng.normal(size=(params.M_mem, params.d_m)))
        for t in np.sort(rng.choice(1000, size=n_entries, replace=False))
    ]
    total = n_entries * (1 + params.M_mem)
    mask = rng.random(total) >= mask_prob
    if not mask.any():
        mask[rng.integers(total)] = True
    return MemoryBank(entries, mask)
