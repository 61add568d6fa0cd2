"""Post-training quantization toolchain.

Per-channel uniform weight quantization (8/4 bit), ternary (2-bit)
quantization with 16-weights-per-word packing, power-of-two activation
calibration, optional per-channel bias correction, and a fake-quantized
forward pass that mirrors the float model with quantize/dequantize inserted
at every weight and activation point.

Rounding: weight and activation quantization round half away from zero;
the integer execution paths use round-half-up shifts (see engine module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as fm

MODES = ("fp32", "w8a8", "w4a8", "w2a8", "fakequant")
DEFAULT_MAX_EXPONENT = 24
DEFAULT_CLIP_PCT = 99.9


class CalibrationError(ValueError):
    """Calibration preconditions violated (empty stats, missing scales)."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@dataclass
class QuantizedTensor:
    """Per-channel symmetric integer weights: value = q * scales[row]."""
    q: np.ndarray        # int8, shape (channels, ...) with q in [-(2^(b-1)-1), 2^(b-1)-1]
    scales: np.ndarray   # float64, (channels,)
    bits: int

    def dequant(self) -> np.ndarray:
        shape = (-1,) + (1,) * (self.q.ndim - 1)
        return self.q.astype(np.float64) * self.scales.reshape(shape)


@dataclass
class TernaryPacked:
    """{-1,0,+1} weights as 2-bit fields ({-1,0,+1} -> {0,1,2}), 16 per word.

    Weight i occupies bits [2i mod 32, 2i mod 32 + 1] of word i // 16,
    first weight in the least-significant bits.
    """
    words: np.ndarray  # uint32
    count: int
    shape: tuple[int, ...]
    scales: np.ndarray


@dataclass
class Pow2ActQuant:
    exponent: int
    bits: int = 8
    signed: bool = True

    @property
    def scale(self) -> float:
        return 2.0 ** (-self.exponent)

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1


def quantize_weights(w: np.ndarray, bits: int) -> QuantizedTensor:
    """Symmetric per-output-channel quantization: s_c = max|row| / (2^(b-1)-1).

    All-zero rows get scale 1 and q = 0.
    """
    if bits not in (4, 8):
        raise ValueError("bits must be 4 or 8 (use ternarize for 2-bit)")
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    flat = w.reshape(w.shape[0], -1)
    qmax = (1 << (bits - 1)) - 1
    absmax = np.abs(flat).max(axis=1)
    scales = np.where(absmax > 0, absmax / qmax, 1.0)
    q = round_half_away(flat / scales[:, None])
    q = np.clip(q, -qmax, qmax).astype(np.int8)
    return QuantizedTensor(q.reshape(w.shape), scales, bits)


def ternarize(w: np.ndarray, threshold_factor: float = 0.7) -> QuantizedTensor:
    """Per-channel ternary quantization.

    Threshold t_c = threshold_factor * mean|row|; weights above it keep their
    sign, the rest become zero. The channel scale is the mean magnitude of the
    surviving weights (1.0 when nothing survives).
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    flat = w.reshape(w.shape[0], -1)
    t = threshold_factor * np.abs(flat).mean(axis=1)
    keep = np.abs(flat) > t[:, None]
    q = np.where(keep, np.sign(flat), 0.0).astype(np.int8)
    sums = np.where(keep, np.abs(flat), 0.0).sum(axis=1)
    counts = keep.sum(axis=1)
    scales = np.where(counts > 0, sums / np.maximum(counts, 1), 1.0)
    return QuantizedTensor(q.reshape(w.shape), scales, 2)


def pack_ternary(q: np.ndarray, scales: np.ndarray | None = None) -> TernaryPacked:
    q = np.asarray(q)
    flat = q.reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < -1 or flat.max() > 1):
        raise ValueError("ternary values must be in {-1, 0, +1}")
    enc = (flat + 1).astype(np.uint64)  # {-1,0,1} -> {0,1,2}
    n_words = (flat.size + 15) // 16
    padded = np.ones(n_words * 16, dtype=np.uint64)  # pad fields encode 0
    padded[:flat.size] = enc
    fields = padded.reshape(n_words, 16)
    shifts = (2 * np.arange(16, dtype=np.uint64))
    words = (fields << shifts).sum(axis=1).astype(np.uint32)
    if scales is None:
        scales = np.ones(q.shape[0] if q.ndim > 1 else 1)
    return TernaryPacked(words, flat.size, tuple(q.shape), np.asarray(scales, np.float64))


def unpack_ternary(packed: TernaryPacked) -> np.ndarray:
    words = packed.words.astype(np.uint64)
    shifts = (2 * np.arange(16, dtype=np.uint64))
    fields = (words[:, None] >> shifts) & np.uint64(3)
    vals = fields.astype(np.int8) - 1
    flat = vals.reshape(-1)[:packed.count]
    if np.any(fields.reshape(-1)[:packed.count] > 2):
        raise ValueError("invalid 2-bit field value 3")
    return flat.reshape(packed.shape)


@dataclass
class CalibStats:
    """Running activation statistics; the clipping point is the max over
    batches of each batch's |a| percentile, which is monotone under supersets
    and invariant under duplicated batches."""
    clip_pct: float = DEFAULT_CLIP_PCT
    count: int = 0
    minimum: float = math.inf
    maximum: float = -math.inf
    p_clip: float = 0.0

    def add(self, a: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        if a.size == 0:
            return
        self.count += a.size
        self.minimum = min(self.minimum, float(a.min()))
        self.maximum = max(self.maximum, float(a.max()))
        self.p_clip = max(self.p_clip, float(np.percentile(np.abs(a), self.clip_pct)))


def choose_pow2_scale(stats: CalibStats | float, bits: int = 8, signed: bool = True,
                      max_exponent: int = DEFAULT_MAX_EXPONENT) -> Pow2ActQuant:
    """Largest exponent n >= 0 such that qmax * 2^-n still covers the clipping
    point, i.e. the finest power-of-two grid that does not clip below it.
    Degenerate all-zero statistics take the maximum exponent."""
    if isinstance(stats, CalibStats):
        if stats.count == 0:
            raise CalibrationError("empty calibration statistics")
        p = stats.p_clip
    else:
        p = float(stats)
    qmax = (1 << (bits - 1)) - 1 if signed else (1 << bits) - 1
    if p <= 0.0:
        return Pow2ActQuant(max_exponent, bits, signed)
    n = int(math.floor(math.log2(qmax / p))) if qmax > p else 0
    while qmax * 2.0 ** (-(n + 1)) >= p:
        n += 1
    while n > 0 and qmax * 2.0 ** (-n) < p:
        n -= 1
    return Pow2ActQuant(max(0, min(n, max_exponent)), bits, signed)


def quantize_activation(a: np.ndarray, n: int, bits: int = 8) -> np.ndarray:
    qmax = (1 << (bits - 1)) - 1
    q = round_half_away(np.asarray(a, dtype=np.float64) * 2.0 ** n)
    return np.clip(q, -qmax, qmax).astype(np.int32)


def fake_quantize(a: np.ndarray, n: int, bits: int = 8) -> np.ndarray:
    return quantize_activation(a, n, bits).astype(np.float64) * 2.0 ** (-n)


# ---------------------------------------------------------------------------
# model-level quantization

# matmul-style layers: name -> (input tap, [(output tap, row count fn)], bias attr)
def layer_catalog(cfg: fm.ModelConfig) -> list[dict]:
    layers = [dict(name="tokenizer", in_tap="input",
                   out_taps=[("tok_conv", cfg.n_groups * cfg.d_model)], bias=True)]
    for i in range(cfg.n_blocks):
        block_in = "tokens" if i == 0 else f"blocks.{i - 1}.out"
        for d in ("fwd", "bwd"):
            p = f"blocks.{i}.{d}."
            layers += [
                dict(name=p + "in_proj", in_tap=block_in,
                     out_taps=[(p + "x", cfg.d_inner), (p + "gate", cfg.d_inner)], bias=False),
                dict(name=p + "conv", in_tap=p + "x",
                     out_taps=[(p + "conv", cfg.d_inner)], bias=True),
                dict(name=p + "x_proj", in_tap=p + "u",
                     out_taps=[(p + "dt_raw", cfg.dt_rank), (p + "b", cfg.d_state),
                               (p + "c", cfg.d_state)], bias=False),
                dict(name=p + "dt_proj", in_tap=p + "dt_raw",
                     out_taps=[(p + "dt_pre", cfg.d_inner)], bias=True),
                dict(name=p + "out_proj", in_tap=p + "gated",
                     out_taps=[(p + "branch", cfg.d_model)], bias=False),
            ]
    layers.append(dict(name="head", in_tap="pooled", out_taps=None, bias=True))
    return layers


def weight_arrays(weights: fm.FembaWeights, cfg: fm.ModelConfig) -> dict[str, np.ndarray]:
    """All quantizable weight tensors as (out_channels, ...) float arrays."""
    gd = cfg.n_groups * cfg.d_model
    out = {
        "tokenizer": weights.tok_kernel.reshape(gd, -1),
        "pos": weights.pos_embed,
        "head": weights.head_w,
    }
    for i, blk in enumerate(weights.blocks):
        for d, br in (("fwd", blk.fwd), ("bwd", blk.bwd)):
            p = f"blocks.{i}.{d}."
            out[p + "in_proj"] = br.in_proj
            out[p + "conv"] = br.conv_w
            out[p + "x_proj"] = br.x_proj
            out[p + "dt_proj"] = br.dt_proj
            out[p + "out_proj"] = br.out_proj
            out[p + "a_mat"] = -np.exp(br.a_log)
            out[p + "d_skip"] = br.d_skip.reshape(1, -1)  # per-tensor scale
    return out


def bias_arrays(weights: fm.FembaWeights, cfg: fm.ModelConfig) -> dict[str, np.ndarray]:
    """Float biases per matmul layer; layers without a trained bias get zeros
    so bias correction has a place to land."""
    out = {"tokenizer": weights.tok_bias.copy(), "head": weights.head_b.copy()}
    for i, blk in enumerate(weights.blocks):
        for d, br in (("fwd", blk.fwd), ("bwd", blk.bwd)):
            p = f"blocks.{i}.{d}."
            out[p + "in_proj"] = np.zeros(2 * cfg.d_inner)
            out[p + "conv"] = br.conv_b.copy()
            out[p + "x_proj"] = np.zeros(cfg.dt_rank + 2 * cfg.d_state)
            out[p + "dt_proj"] = br.dt_bias.copy()
            out[p + "out_proj"] = np.zeros(cfg.d_model)
    return out


@dataclass
class QuantArtifacts:
    cfg: fm.ModelConfig
    mode: str
    weights_q: dict[str, QuantizedTensor] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)
    act: dict[str, Pow2ActQuant] = field(default_factory=dict)

    def exponent(self, tap: str) -> int:
        if tap not in self.act:
            raise CalibrationError(f"missing activation scale for {tap!r}")
        return self.act[tap].exponent


def calibrate(weights: fm.FembaWeights, cfg: fm.ModelConfig, windows,
              clip_pct: float = DEFAULT_CLIP_PCT,
              max_exponent: int = DEFAULT_MAX_EXPONENT) -> dict[str, Pow2ActQuant]:
    """Float forward over the calibration windows, recording statistics at
    every quantization point, then power-of-two scale selection per tap."""
    windows = list(windows)
    if not windows:
        raise CalibrationError("calibration requires at least one window")
    taps = fm.quant_points(cfg)
    stats = {t: CalibStats(clip_pct=clip_pct) for t in taps}
    for w in windows:
        _, trace = fm.forward_with_trace(w, weights, cfg)
        for t in taps:
            stats[t].add(trace[t])
    return {t: choose_pow2_scale(stats[t], 8, True, max_exponent) for t in taps}


def quantize_model(weights: fm.FembaWeights, cfg: fm.ModelConfig, mode: str,
                   calib_windows=None, clip_pct: float = DEFAULT_CLIP_PCT,
                   max_exponent: int = DEFAULT_MAX_EXPONENT,
                   precision_overrides: dict[str, int] | None = None,
                   run_bias_correct: bool = False) -> QuantArtifacts:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    art = QuantArtifacts(cfg=cfg, mode=mode)
    if mode == "fp32":
        return art
    bits = {"w8a8": 8, "w4a8": 4, "w2a8": 2, "fakequant": 8}[mode]
    overrides = precision_overrides or {}
    for name, arr in weight_arrays(weights, cfg).items():
        b = overrides.get(name, bits)
        art.weights_q[name] = ternarize(arr) if b == 2 else quantize_weights(arr, b)
    art.biases = bias_arrays(weights, cfg)
    if calib_windows is None:
        raise CalibrationError(f"mode {mode!r} requires calibration windows")
    art.act = calibrate(weights, cfg, calib_windows, clip_pct, max_exponent)
    if run_bias_correct:
        bias_correct(weights, cfg, art, calib_windows)
    return art


# ---------------------------------------------------------------------------
# fake-quantized forward (float semantics)

def _dequant_w(art: QuantArtifacts, name: str) -> np.ndarray:
    return art.weights_q[name].dequant()


def fake_quant_forward(weights: fm.FembaWeights, cfg: fm.ModelConfig,
                       art: QuantArtifacts, window: np.ndarray,
                       trace: dict | None = None) -> np.ndarray:
    """Float arithmetic with quantize->dequantize at every weight and
    activation point. With mode fp32 this is the plain float forward."""
    if art.mode == "fp32":
        return fm.forward(window, weights, cfg, trace=trace)

    def qdq(x, tap):
        v = fake_quantize(x, art.exponent(tap))
        if trace is not None:
            trace[tap] = v
        return v

    def lin(x, name):
        y = x @ _dequant_w(art, name).T + art.biases[name]
        if trace is not None:
            trace["linear:" + name] = y
        return y

    x = qdq(np.asarray(window, dtype=np.float64), "input")
    feats = lin(fm.patch_matrix(x, cfg), "tokenizer")
    tok_conv = qdq(feats.reshape(cfg.n_tokens, cfg.d_model), "tok_conv")
    pos = _dequant_w(art, "pos")
    tokens = qdq(tok_conv + pos, "tokens")

    for i in range(cfg.n_blocks):
        branches = {}
        for d in ("fwd", "bwd"):
            p = f"blocks.{i}.{d}."
            seq = tokens if d == "fwd" else tokens[::-1]
            xz = lin(seq, p + "in_proj")
            xq = qdq(xz[:, :cfg.d_inner], p + "x")
            gate = qdq(xz[:, cfg.d_inner:], p + "gate")

            conv_w = _dequant_w(art, p + "conv")
            conv = fm.causal_depthwise_conv(xq, conv_w, art.biases[p + "conv"])
            if trace is not None:
                trace["linear:" + p + "conv"] = conv
            conv = qdq(conv, p + "conv")
            u = qdq(fm.silu(conv), p + "u")

            dbl = lin(u, p + "x_proj")
            dr, ds = cfg.dt_rank, cfg.d_state
            dt_raw = qdq(dbl[:, :dr], p + "dt_raw")
            b = qdq(dbl[:, dr:dr + ds], p + "b")
            c = qdq(dbl[:, dr + ds:], p + "c")
            dt_pre = qdq(lin(dt_raw, p + "dt_proj"), p + "dt_pre")

            delta = np.clip(fm.softplus(dt_pre), cfg.dt_min, cfg.dt_max)
            a = _dequant_w(art, p + "a_mat")
            d_skip = _dequant_w(art, p + "d_skip").reshape(-1)
            y = qdq(fm.selective_scan(u, delta, a, b, c, d_skip), p + "y")
            gated = qdq(y * fm.silu(gate), p + "gated")
            out = lin(gated, p + "out_proj")
            branches[d] = qdq(out if d == "fwd" else out[::-1], p + "branch")

        fused = qdq(fm.fuse_branches(branches["fwd"], branches["bwd"], cfg,
                                     weights.blocks[i].fuse_proj), f"blocks.{i}.fused")
        tokens = qdq(tokens + fused, f"blocks.{i}.out")

    pooled = qdq(tokens.mean(axis=0), "pooled")
    logits = lin(pooled, "head")
    if trace is not None:
        trace["logits"] = logits
    return logits


def bias_correct(weights: fm.FembaWeights, cfg: fm.ModelConfig,
                 art: QuantArtifacts, windows) -> dict[str, np.ndarray]:
    """Per-output-channel bias correction.

    Layers are corrected in topological order; each correction adds the mean
    (over the calibration set and sequence positions) of float minus
    fake-quant linear output to the float bias, exactly zeroing that layer's
    mean error before moving downstream.
    """
    windows = list(windows)
    if not art.act:
        raise CalibrationError("bias correction requires calibrated scales")
    float_traces = []
    for w in windows:
        logits, tr = fm.forward_with_trace(w, weights, cfg)
        tr["logits"] = logits
        float_traces.append(tr)

    def layer_float_out(tr, layer):
        if layer["name"] == "head":
            return np.atleast_2d(tr["logits"])
        return np.concatenate([np.atleast_2d(tr[t]) for t, _ in layer["out_taps"]], axis=-1)

    corrections = {}
    for layer in layer_catalog(cfg):
        name = layer["name"]
        diffs = []
        for w, ftr in zip(windows, float_traces):
            qtr: dict = {}
            fake_quant_forward(weights, cfg, art, w, trace=qtr)
            fq_out = np.atleast_2d(qtr["linear:" + name])
            diffs.append(layer_float_out(ftr, layer) - fq_out)
        delta = np.concatenate(diffs, axis=0).mean(axis=0)
        art.biases[name] = art.biases[name] + delta
        corrections[name] = delta
    return corrections
