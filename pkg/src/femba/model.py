"""Float reference implementation of the Tiny bidirectional-Mamba EEG encoder.

Pipeline: 2D convolutional tokenizer + positional embedding, two bidirectional
Mamba blocks (each an additive fusion of a forward and a backward selective-
scan branch around a residual connection), mean pooling over tokens, and a
linear classification head.

This float path is the ground truth the quantized and integer paths are
checked against. Everything runs in float64 and is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

FUSION_MODES = ("sum", "mean", "concat_project")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 385
    d_inner: int = 1540
    d_state: int = 16
    d_conv: int = 4
    n_blocks: int = 2
    n_tokens: int = 160
    n_channels: int = 22
    n_samples: int = 1280
    patch_size: int = 16
    n_classes: int = 2
    dt_rank: int = 0  # 0 -> ceil(d_model / 16)
    fusion: str = "sum"
    dt_min: float = 1e-4
    dt_max: float = 10.0

    def __post_init__(self):
        if self.dt_rank == 0:
            object.__setattr__(self, "dt_rank", -(-self.d_model // 16))
        if self.n_samples % self.patch_size != 0:
            raise ValueError("n_samples must be a multiple of patch_size")
        if self.n_tokens % self.n_patches != 0:
            raise ValueError("n_tokens must be a multiple of n_samples/patch_size")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")

    @property
    def n_patches(self) -> int:
        return self.n_samples // self.patch_size

    @property
    def n_groups(self) -> int:
        """Feature groups emitted per temporal patch position by the tokenizer."""
        return self.n_tokens // self.n_patches


TINY_PRESET = ModelConfig()


@dataclass
class BranchParams:
    """One scan direction: projections, local conv, and SSM parameters."""
    in_proj: np.ndarray   # (2*d_inner, d_model)
    conv_w: np.ndarray    # (d_inner, d_conv), last tap is the current sample
    conv_b: np.ndarray    # (d_inner,)
    x_proj: np.ndarray    # (dt_rank + 2*d_state, d_inner)
    dt_proj: np.ndarray   # (d_inner, dt_rank)
    dt_bias: np.ndarray   # (d_inner,)
    a_log: np.ndarray     # (d_inner, d_state); A = -exp(a_log)
    d_skip: np.ndarray    # (d_inner,)
    out_proj: np.ndarray  # (d_model, d_inner)


@dataclass
class BlockParams:
    fwd: BranchParams
    bwd: BranchParams
    fuse_proj: np.ndarray | None = None  # (d_model, 2*d_model) for concat_project


@dataclass
class FembaWeights:
    tok_kernel: np.ndarray  # (n_groups*d_model, n_channels, patch_size)
    tok_bias: np.ndarray    # (n_groups*d_model,)
    pos_embed: np.ndarray   # (n_tokens, d_model)
    blocks: list[BlockParams] = field(default_factory=list)
    head_w: np.ndarray = None  # (n_classes, d_model)
    head_b: np.ndarray = None  # (n_classes,)


def silu(x):
    return x / (1.0 + np.exp(-x))


def softplus(x):
    # stable for large |x|
    return np.logaddexp(0.0, x)


def _init_branch(cfg: ModelConfig, rng: np.random.Generator) -> BranchParams:
    dm, di, ds, dc, dr = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank
    def lin(n_out, n_in):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in))
    a = np.tile(np.arange(1, ds + 1, dtype=np.float64), (di, 1))
    dt_bias = np.log(np.expm1(rng.uniform(1e-3, 0.1, size=di)))  # softplus inverse
    return BranchParams(
        in_proj=lin(2 * di, dm),
        conv_w=rng.normal(0.0, 1.0 / math.sqrt(dc), size=(di, dc)),
        conv_b=np.zeros(di),
        x_proj=lin(dr + 2 * ds, di),
        dt_proj=rng.normal(0.0, dr ** -0.5, size=(di, dr)),
        dt_bias=dt_bias,
        a_log=np.log(a),
        d_skip=np.ones(di),
        out_proj=lin(dm, di),
    )


def init_weights(cfg: ModelConfig, seed: int = 0) -> FembaWeights:
    """Random initialization with standard fan-in scaling; for tests and demos."""
    rng = np.random.default_rng(seed)
    gd = cfg.n_groups * cfg.d_model
    blocks = []
    for _ in range(cfg.n_blocks):
        fuse = None
        if cfg.fusion == "concat_project":
            fuse = rng.normal(0.0, (2 * cfg.d_model) ** -0.5,
                              size=(cfg.d_model, 2 * cfg.d_model))
        blocks.append(BlockParams(_init_branch(cfg, rng), _init_branch(cfg, rng), fuse))
    return FembaWeights(
        tok_kernel=rng.normal(0.0, (cfg.n_channels * cfg.patch_size) ** -0.5,
                              size=(gd, cfg.n_channels, cfg.patch_size)),
        tok_bias=np.zeros(gd),
        pos_embed=rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d_model)),
        blocks=blocks,
        head_w=rng.normal(0.0, cfg.d_model ** -0.5, size=(cfg.n_classes, cfg.d_model)),
        head_b=np.zeros(cfg.n_classes),
    )


def zero_weights(cfg: ModelConfig) -> FembaWeights:
    w = init_weights(cfg, seed=0)
    w.tok_kernel = np.zeros_like(w.tok_kernel)
    w.tok_bias = np.zeros_like(w.tok_bias)
    w.pos_embed = np.zeros_like(w.pos_embed)
    for b in w.blocks:
        for br in (b.fwd, b.bwd):
            for name in ("in_proj", "conv_w", "conv_b", "x_proj", "dt_proj",
                         "dt_bias", "d_skip", "out_proj"):
                setattr(br, name, np.zeros_like(getattr(br, name)))
        if b.fuse_proj is not None:
            b.fuse_proj = np.zeros_like(b.fuse_proj)
    w.head_w = np.zeros_like(w.head_w)
    w.head_b = np.zeros_like(w.head_b)
    return w


def patch_matrix(window: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(n_patches, n_channels*patch_size) matrix of flattened patches."""
    c, s = window.shape
    p = cfg.patch_size
    # (channels, n_patches, patch) -> (n_patches, channels, patch)
    patches = window.reshape(c, s // p, p).transpose(1, 0, 2)
    return patches.reshape(s // p, c * p)


def tokenize(window: np.ndarray, weights: FembaWeights, cfg: ModelConfig) -> np.ndarray:
    """Tokenizer: strided 2D conv over (channels x patch) blocks + positional embedding.

    Each of the n_patches positions yields n_groups feature groups of width
    d_model; tokens are ordered position-major (token p*G+g).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (cfg.n_channels, cfg.n_samples):
        raise ValueError(
            f"window shape {window.shape} != ({cfg.n_channels}, {cfg.n_samples})")
    gd = cfg.n_groups * cfg.d_model
    kmat = weights.tok_kernel.reshape(gd, cfg.n_channels * cfg.patch_size)
    feats = patch_matrix(window, cfg) @ kmat.T + weights.tok_bias  # (n_patches, G*dm)
    tokens = feats.reshape(cfg.n_patches * cfg.n_groups, cfg.d_model)
    return tokens + weights.pos_embed


def selective_scan(u, delta, a, b, c, d=None):
    """Sequential state-space recurrence.

    u:     (T, C) inputs per channel
    delta: (T, C) positive step sizes
    a:     (C, S) state matrix (negative for stability)
    b, c:  (T, S) input/output projections shared across channels
    d:     (C,) skip term, optional

    h_t = exp(delta*a) * h_{t-1} + (delta*b) * u_t, y_t = <c_t, h_t> + d*u_t.
    """
    u = np.asarray(u, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(u)) or not np.all(np.isfinite(delta)):
        raise FloatingPointError("non-finite scan input")
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    t_len, n_ch = u.shape
    abar = np.exp(delta[:, :, None] * a[None, :, :])          # (T, C, S)
    bx = delta[:, :, None] * b[:, None, :] * u[:, :, None]    # (T, C, S)
    h = np.zeros((n_ch, a.shape[1]))
    y = np.empty((t_len, n_ch))
    for t in range(t_len):
        h = abar[t] * h + bx[t]
        y[t] = h @ c[t]
    if d is not None:
        y = y + np.asarray(d, dtype=np.float64) * u
    return y


def _branch_core(seq: np.ndarray, p: BranchParams, cfg: ModelConfig,
                 trace: dict | None = None, prefix: str = "") -> np.ndarray:
    xz = seq @ p.in_proj.T
    x, gate = xz[:, :cfg.d_inner], xz[:, cfg.d_inner:]
    if trace is not None:
        trace[prefix + "x"] = x
        trace[prefix + "gate"] = gate

    x = causal_depthwise_conv(x, p.conv_w, p.conv_b)
    if trace is not None:
        trace[prefix + "conv"] = x
    u = silu(x)
    if trace is not None:
        trace[prefix + "u"] = u

    dbl = u @ p.x_proj.T
    dr, ds = cfg.dt_rank, cfg.d_state
    dt_raw, b, c = dbl[:, :dr], dbl[:, dr:dr + ds], dbl[:, dr + ds:]
    dt_pre = dt_raw @ p.dt_proj.T + p.dt_bias
    if trace is not None:
        trace[prefix + "dt_raw"] = dt_raw
        trace[prefix + "b"] = b
        trace[prefix + "c"] = c
        trace[prefix + "dt_pre"] = dt_pre

    delta = np.clip(softplus(dt_pre), cfg.dt_min, cfg.dt_max)
    a = -np.exp(p.a_log)
    y = selective_scan(u, delta, a, b, c, p.d_skip)
    if trace is not None:
        trace[prefix + "y"] = y
    gated = y * silu(gate)
    if trace is not None:
        trace[prefix + "gated"] = gated
    out = gated @ p.out_proj.T
    return out


def causal_depthwise_conv(x: np.ndarray, conv_w: np.ndarray, conv_b: np.ndarray) -> np.ndarray:
    """Per-channel causal FIR along the token axis; conv_w[:, -1] taps the
    current step, earlier taps reach back in time."""
    t_len, n_ch = x.shape
    k = conv_w.shape[1]
    padded = np.concatenate([np.zeros((k - 1, n_ch)), x], axis=0)
    out = np.zeros_like(x)
    for j in range(k):
        out += padded[j:j + t_len] * conv_w[:, j]
    return out + conv_b


def mamba_branch(tokens: np.ndarray, p: BranchParams, direction: str, cfg: ModelConfig,
                 trace: dict | None = None, prefix: str = "") -> np.ndarray:
    """One scan branch. The backward branch reverses the token sequence before
    and after the shared forward machinery."""
    if direction not in ("fwd", "bwd"):
        raise ValueError("direction must be 'fwd' or 'bwd'")
    seq = tokens if direction == "fwd" else tokens[::-1]
    out = _branch_core(seq, p, cfg, trace=trace, prefix=prefix)
    branch = out if direction == "fwd" else out[::-1]
    if trace is not None:
        trace[prefix + "branch"] = branch
    return branch


def fuse_branches(f: np.ndarray, b: np.ndarray, cfg: ModelConfig,
                  fuse_proj: np.ndarray | None = None) -> np.ndarray:
    if cfg.fusion == "sum":
        return f + b
    if cfg.fusion == "mean":
        return 0.5 * (f + b)
    if fuse_proj is None:
        raise ValueError("concat_project fusion requires a fuse_proj matrix")
    return np.concatenate([f, b], axis=1) @ fuse_proj.T


def bi_mamba_block(tokens: np.ndarray, block: BlockParams, cfg: ModelConfig,
                   trace: dict | None = None, prefix: str = "") -> np.ndarray:
    f = mamba_branch(tokens, block.fwd, "fwd", cfg, trace=trace, prefix=prefix + "fwd.")
    b = mamba_branch(tokens, block.bwd, "bwd", cfg, trace=trace, prefix=prefix + "bwd.")
    fused = fuse_branches(f, b, cfg, block.fuse_proj)
    if trace is not None:
        trace[prefix + "fused"] = fused
    out = tokens + fused
    if trace is not None:
        trace[prefix + "out"] = out
    return out


def forward(window: np.ndarray, weights: FembaWeights, cfg: ModelConfig,
            trace: dict | None = None) -> np.ndarray:
    """Window (n_channels, n_samples) -> class logits (n_classes,)."""
    if trace is not None:
        trace["input"] = np.asarray(window, dtype=np.float64)
    gd = cfg.n_groups * cfg.d_model
    kmat = weights.tok_kernel.reshape(gd, cfg.n_channels * cfg.patch_size)
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (cfg.n_channels, cfg.n_samples):
        raise ValueError(
            f"window shape {window.shape} != ({cfg.n_channels}, {cfg.n_samples})")
    feats = patch_matrix(window, cfg) @ kmat.T + weights.tok_bias
    tok_conv = feats.reshape(cfg.n_tokens, cfg.d_model)
    if trace is not None:
        trace["tok_conv"] = tok_conv
    tokens = tok_conv + weights.pos_embed
    if trace is not None:
        trace["tokens"] = tokens

    for i, block in enumerate(weights.blocks):
        tokens = bi_mamba_block(tokens, block, cfg, trace=trace, prefix=f"blocks.{i}.")

    pooled = tokens.mean(axis=0)
    if trace is not None:
        trace["pooled"] = pooled
    return pooled @ weights.head_w.T + weights.head_b


def forward_with_trace(window, weights, cfg) -> tuple[np.ndarray, dict]:
    trace: dict = {}
    logits = forward(window, weights, cfg, trace=trace)
    return logits, trace


def quant_points(cfg: ModelConfig) -> list[str]:
    """Ordered names of every activation quantization point in the network."""
    names = ["input", "tok_conv", "tokens"]
    per_dir = ("x", "gate", "conv", "u", "dt_raw", "b", "c", "dt_pre",
               "y", "gated", "branch")
    for i in range(cfg.n_blocks):
        for d in ("fwd", "bwd"):
            names += [f"blocks.{i}.{d}.{t}" for t in per_dir]
        names += [f"blocks.{i}.fused", f"blocks.{i}.out"]
    names.append("pooled")
    return names


def scaled_config(cfg: ModelConfig, **overrides) -> ModelConfig:
    return replace(cfg, **overrides)
