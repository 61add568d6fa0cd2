"""Integer-only inference engine.

Mirrors the deployment kernels: INT8 matrix multiplies with INT32
accumulation, on-the-fly ternary unpacking inside the dot-product loop, a
Q15 fixed-point selective scan with LUT-based exp/softplus/SiLU, and
power-of-two requantization.

Number formats
  activations   INT8 on a power-of-two grid 2^-n (values in [-127, 127])
  accumulators  INT32 (held in int64 arrays; ranges proven at load)
  scan state    Q15: int16 raw, value = raw / 2^15, saturating
  requantize    out = clamp((acc * m + 2^(k-1)) >> k), m int16 per channel,
                k per tensor; a power-of-two ratio yields m = 2^14 and the
                result equals a plain round-half-up shift
  LUT output    int16 with a declared number of fractional bits

The scan is channel-parallel: d_inner channels are split across workers and
each worker runs its subset sequentially over time; any partition is
bit-identical to sequential execution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

Q15_ONE = 1 << 15
Q15_MAX = Q15_ONE - 1
Q15_MIN = -Q15_ONE
INT8_MAX = 127
LUT_SIZE = 1024

# fixed-point formats of the scan path
DT_FRAC = 11        # softplus output (step size)
EXP_IN_FRAC = 12    # exp LUT input (step * state coefficient)
SILU_OUT_FRAC = 12  # SiLU LUT output
ACT_FRAC = 15       # int8 activations widened for LUT input


class EngineConfigError(ValueError):
    """Deployment image inconsistent with the engine's integer contracts."""


def worker_count(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("FEMBA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def rhu_shift(v, k: int):
    """Round-half-up arithmetic shift; negative k is an exact left shift."""
    v = np.asarray(v, dtype=np.int64)
    if k == 0:
        return v.copy()
    if k < 0:
        return v << np.int64(-k)
    return (v + (np.int64(1) << np.int64(k - 1))) >> np.int64(k)


def widen(q, from_frac: int, to_frac: int):
    """Move int values between fixed-point grids; widening is exact."""
    if to_frac >= from_frac:
        return np.asarray(q, dtype=np.int64) << np.int64(to_frac - from_frac)
    return rhu_shift(q, from_frac - to_frac)


def q15_mul(a, b):
    """Q15 product: (a*b + 2^14) >> 15, saturated to [-32768, 32767]."""
    p = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    r = (p + (1 << 14)) >> 15
    return np.clip(r, Q15_MIN, Q15_MAX)


@dataclass(frozen=True)
class Lut:
    """1024-entry table with linear interpolation on a power-of-two grid.

    Entry i sits at input (lo_fixed + i * 2^step_shift) / 2^in_frac; outputs
    are int16 with out_frac fractional bits. Inputs outside the domain clamp
    to the boundary entries.
    """
    name: str
    entries: np.ndarray  # int16, LUT_SIZE
    lo_fixed: int
    in_frac: int
    out_frac: int
    step_shift: int

    @property
    def domain_lo(self) -> float:
        return self.lo_fixed / (1 << self.in_frac)

    @property
    def domain_hi(self) -> float:
        return (self.lo_fixed + (LUT_SIZE - 1) * (1 << self.step_shift)) / (1 << self.in_frac)


def lut_eval(lut: Lut, x_fixed) -> np.ndarray:
    """Rounded linear interpolation between adjacent entries (pure integer)."""
    x = np.asarray(x_fixed, dtype=np.int64)
    step = np.int64(1 << lut.step_shift)
    span = np.int64(LUT_SIZE - 1) * step
    pos = np.clip(x - np.int64(lut.lo_fixed), 0, span)
    idx = np.minimum(pos >> np.int64(lut.step_shift), LUT_SIZE - 2)
    frac = pos - idx * step
    e = lut.entries.astype(np.int64)
    lo = e[idx]
    d = e[idx + 1] - lo
    return lo + rhu_shift(d * frac, lut.step_shift)


def _grid(lut_lo_fixed: int, in_frac: int, step_shift: int) -> np.ndarray:
    return (lut_lo_fixed + (np.arange(LUT_SIZE) << step_shift)) / float(1 << in_frac)


def build_exp_lut() -> Lut:
    # domain (-15.984, 0], Q15 output; exp(0) saturates to 1 - 2^-15
    in_frac, step_shift = EXP_IN_FRAC, EXP_IN_FRAC - 6
    lo = -(LUT_SIZE - 1) * (1 << step_shift)
    x = _grid(lo, in_frac, step_shift)
    entries = np.minimum(np.rint(np.exp(x) * Q15_ONE), Q15_MAX).astype(np.int16)
    return Lut("exp", entries, lo, in_frac, 15, step_shift)


def build_silu_lut() -> Lut:
    # domain [-8, 7.984], output fractional bits sized for |silu| < 8
    in_frac, step_shift = ACT_FRAC, ACT_FRAC - 6
    lo = -8 * (1 << in_frac)
    x = _grid(lo, in_frac, step_shift)
    vals = x / (1.0 + np.exp(-x))
    entries = np.clip(np.rint(vals * (1 << SILU_OUT_FRAC)), Q15_MIN, Q15_MAX).astype(np.int16)
    return Lut("silu", entries, lo, in_frac, SILU_OUT_FRAC, step_shift)


def build_softplus_lut(dt_max: float = 10.0) -> Lut:
    # domain [-16, 15.97], output clamped to [0, dt_max] step sizes
    in_frac, step_shift = ACT_FRAC, ACT_FRAC - 5
    lo = -16 * (1 << in_frac)
    x = _grid(lo, in_frac, step_shift)
    vals = np.minimum(np.logaddexp(0.0, x), dt_max)
    entries = np.clip(np.rint(vals * (1 << DT_FRAC)), 0, Q15_MAX).astype(np.int16)
    return Lut("softplus", entries, lo, in_frac, DT_FRAC, step_shift)


def build_all_luts(dt_max: float = 10.0) -> dict[str, Lut]:
    return {"exp": build_exp_lut(), "silu": build_silu_lut(),
            "softplus": build_softplus_lut(dt_max)}


# ---------------------------------------------------------------------------
# integer kernels

def _row_chunks(n_rows: int, workers: int) -> list[np.ndarray]:
    return [c for c in np.array_split(np.arange(n_rows), workers) if c.size]


def requantize(acc, m, k: int, clamp: int = INT8_MAX) -> np.ndarray:
    """acc (..., out) * per-channel m, shifted by k, clamped symmetric."""
    scaled = np.asarray(acc, dtype=np.int64) * np.asarray(m, dtype=np.int64)
    return np.clip(rhu_shift(scaled, k), -clamp, clamp)


def int8_matmul(act, w_q, bias, m, k: int, workers: int = 1) -> np.ndarray:
    """out[t, o] = clamp(rhu((sum_i act[t,i] * w[o,i] + bias[o]) * m[o] >> k)).

    Blocked over output rows; integer addition is associative, so any
    blocking gives the identical result.
    """
    act = np.asarray(act, dtype=np.int64)
    out = np.empty((act.shape[0], w_q.shape[0]), dtype=np.int64)
    for rows in _row_chunks(w_q.shape[0], workers):
        acc = act @ w_q[rows].astype(np.int64).T
        if bias is not None:
            acc = acc + bias[rows]
        out[:, rows] = requantize(acc, m[rows], k)
    return out


def unpack_rows(words: np.ndarray, d_in: int, rows: np.ndarray) -> np.ndarray:
    """Shift-and-mask extraction of 2-bit fields for the given weight rows,
    mapped back to {-1, 0, +1}."""
    flat_idx = (rows[:, None] * d_in + np.arange(d_in)[None, :]).astype(np.int64)
    w = words[flat_idx >> 4].astype(np.uint32)
    fields = (w >> (2 * (flat_idx & 15)).astype(np.uint32)) & np.uint32(3)
    return fields.astype(np.int64) - 1


def ternary_matmul(act, words, shape, bias, m, k: int, workers: int = 1) -> np.ndarray:
    """int8_matmul with weights unpacked on the fly inside the row loop."""
    act = np.asarray(act, dtype=np.int64)
    d_out, d_in = shape
    out = np.empty((act.shape[0], d_out), dtype=np.int64)
    for rows in _row_chunks(d_out, workers):
        w_rows = unpack_rows(words, d_in, rows)
        acc = act @ w_rows.T
        if bias is not None:
            acc = acc + bias[rows]
        out[:, rows] = requantize(acc, m[rows], k)
    return out


def depthwise_conv_int8(x, kernel, bias, m, k: int) -> np.ndarray:
    """Causal per-channel FIR of width d_conv with INT32 accumulation.

    x: (T, C); kernel: (C, K) with the last tap on the current sample;
    the sequence is padded with K-1 leading zeros.
    """
    x = np.asarray(x, dtype=np.int64)
    t_len, n_ch = x.shape
    kw = kernel.shape[1]
    padded = np.concatenate([np.zeros((kw - 1, n_ch), dtype=np.int64), x], axis=0)
    acc = np.zeros((t_len, n_ch), dtype=np.int64)
    for j in range(kw):
        acc += padded[j:j + t_len] * kernel[:, j].astype(np.int64)
    if bias is not None:
        acc = acc + bias
    return requantize(acc, m, k)


@dataclass
class EngineStats:
    scan_sat_events: int = 0
    scan_steps: int = 0

    @property
    def saturation_rate(self) -> float:
        return self.scan_sat_events / self.scan_steps if self.scan_steps else 0.0


def q15_scan_core(abar, bx, stats: EngineStats | None = None) -> np.ndarray:
    """h_t = sat(q15_mul(abar_t, h_{t-1}) + bx_t), h_0 = 0.

    abar: (T, C, S) or (C, S); bx: (T, C, S). Returns int16 h of shape (T, C, S).
    """
    bx = np.asarray(bx, dtype=np.int64)
    t_len = bx.shape[0]
    abar = np.asarray(abar, dtype=np.int64)
    time_varying = abar.ndim == 3
    h = np.zeros(bx.shape[1:], dtype=np.int64)
    out = np.empty(bx.shape, dtype=np.int16)
    sat = 0
    for t in range(t_len):
        a_t = abar[t] if time_varying else abar
        v = ((a_t * h + (1 << 14)) >> 15) + bx[t]
        clipped = np.clip(v, Q15_MIN, Q15_MAX)
        sat += int(np.count_nonzero(clipped != v))
        h = clipped
        out[t] = h.astype(np.int16)
    if stats is not None:
        stats.scan_sat_events += sat
        stats.scan_steps += int(np.prod(bx.shape))
    return out


def q15_selective_scan(x_q, abar_q, bbar_q, c_q=None, d_q=None,
                       workers: int = 1, stats: EngineStats | None = None) -> np.ndarray:
    """Channel-parallel Q15 recurrence on precomputed Q15 parameters.

    x_q: (T, C) Q15 inputs; abar_q/bbar_q: (C, S) or (T, C, S) Q15.
    With c_q (S,) and optional d_q (C,), returns Q15 outputs y (T, C);
    otherwise returns the raw state sequence (T, C, S).
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    t_len, n_ch = x_q.shape
    abar_q = np.asarray(abar_q, dtype=np.int64)
    bbar_q = np.asarray(bbar_q, dtype=np.int64)
    if abar_q.ndim == 2:
        abar_q = np.broadcast_to(abar_q, (t_len,) + abar_q.shape)
    if bbar_q.ndim == 2:
        bbar_q = np.broadcast_to(bbar_q, (t_len,) + bbar_q.shape)
    stats = stats if stats is not None else EngineStats()

    h = np.empty((t_len, n_ch, abar_q.shape[2]), dtype=np.int16)
    for ch in _row_chunks(n_ch, workers):
        bx = q15_mul(bbar_q[:, ch, :], x_q[:, ch, None])
        h[:, ch, :] = q15_scan_core(abar_q[:, ch, :], bx, stats=stats)
    if c_q is None:
        return h
    y = q15_mul(c_q, h.astype(np.int64)).sum(axis=2)
    if d_q is not None:
        y = y + q15_mul(np.asarray(d_q, dtype=np.int64), x_q)
    return np.clip(y, Q15_MIN, Q15_MAX)


# ---------------------------------------------------------------------------
# full forward over a deployment image

def _quantize_input(x: np.ndarray, n: int) -> np.ndarray:
    q = np.sign(x) * np.floor(np.abs(np.asarray(x, dtype=np.float64)) * 2.0 ** n + 0.5)
    return np.clip(q, -INT8_MAX, INT8_MAX).astype(np.int64)


def _matmul_layer(image, name: str, act, workers: int) -> np.ndarray:
    lay = image.layers[name]
    if lay.kind == "t2":
        return ternary_matmul(act, lay.words, lay.shape, lay.bias, lay.m, lay.k, workers)
    return int8_matmul(act, lay.q, lay.bias, lay.m, lay.k, workers)


def _align_add(q_a, n_a: int, q_b, n_b: int, n_out: int) -> np.ndarray:
    """Requantize both addends onto the finer of the two grids, add exactly,
    then round once to the output grid."""
    n_hi = max(n_a, n_b)
    v = (np.asarray(q_a, dtype=np.int64) << (n_hi - n_a)) + \
        (np.asarray(q_b, dtype=np.int64) << (n_hi - n_b))
    return np.clip(rhu_shift(v, n_hi - n_out), -INT8_MAX, INT8_MAX)


def _scan_direction(image, i: int, d: str, u_q, b_q, c_q, dtpre_q,
                    workers: int, stats: EngineStats) -> np.ndarray:
    """LUT-driven selective scan of one branch; returns y as INT8."""
    cfg = image.cfg
    exp_n = image.act_exp
    p = f"blocks.{i}.{d}."
    sp = image.scan[(i, d)]
    n_u, n_b, n_c = exp_n[p + "u"], exp_n[p + "b"], exp_n[p + "c"]

    dt_fix = lut_eval(image.luts["softplus"],
                      widen(dtpre_q, exp_n[p + "dt_pre"], ACT_FRAC))  # (T, C), DT_FRAC

    if sp.a_kind == "t2":
        a_q = unpack_rows(sp.a_words, cfg.d_state, np.arange(cfg.d_inner))
    else:
        a_q = sp.a_q.astype(np.int64)
    la = rhu_shift(dt_fix[:, :, None] * a_q[None] * sp.a_m[None, :, None], sp.a_k)
    abar = lut_eval(image.luts["exp"], la)  # (T, C, S) Q15

    prod = (dt_fix * u_q)[:, :, None] * b_q[:, None, :]
    bx_raw = rhu_shift(prod, DT_FRAC + n_u + n_b - 15)
    bx = np.clip(bx_raw, Q15_MIN, Q15_MAX)
    stats.scan_sat_events += int(np.count_nonzero(bx != bx_raw))

    h = np.empty(bx.shape, dtype=np.int16)
    for ch in _row_chunks(cfg.d_inner, workers):
        h[:, ch, :] = q15_scan_core(abar[:, ch, :], bx[:, ch, :], stats=stats)

    y_acc = np.einsum("ts,tcs->tc", c_q.astype(np.int64), h.astype(np.int64))
    if sp.d_kind == "t2":
        d_q = unpack_rows(sp.d_words, cfg.d_inner, np.arange(1))[0]
    else:
        d_q = sp.d_q.astype(np.int64)
    du = rhu_shift(d_q[None, :] * u_q * np.int64(sp.d_m), sp.d_k)
    return np.clip(rhu_shift(y_acc + du, (n_c + 15) - exp_n[p + "y"]),
                   -INT8_MAX, INT8_MAX)


def engine_forward(image, window: np.ndarray, workers: int | None = None,
                   trace: dict | None = None):
    """Full integer pipeline on one window.

    Returns (logits_i32, logits_float, stats). With trace, every INT8
    activation tensor is recorded as int8 under its quantization-point name,
    plus 'logits_i32'.
    """
    cfg = image.cfg
    nw = worker_count(workers)
    stats = EngineStats()
    exp_n = image.act_exp

    def rec(tap, q):
        if trace is not None:
            trace[tap] = np.asarray(q, dtype=np.int8 if q.dtype != np.int32 else np.int32)
        return q

    q_in = rec("input", _quantize_input(window, exp_n["input"]))

    # tokenizer: strided patch matmul, then positional add on the conv grid
    p_mat = q_in.reshape(cfg.n_channels, cfg.n_patches, cfg.patch_size)
    p_mat = p_mat.transpose(1, 0, 2).reshape(cfg.n_patches, -1)
    feats = _matmul_layer(image, "tokenizer", p_mat, nw)
    tok_conv = rec("tok_conv", feats.reshape(cfg.n_tokens, cfg.d_model))

    if image.pos_kind == "t2":
        pos_q = unpack_rows(image.pos_words, cfg.d_model, np.arange(cfg.n_tokens))
    else:
        pos_q = image.pos_q.astype(np.int64)
    pos_fixed = rhu_shift(pos_q * image.pos_m[:, None], image.pos_k)
    tokens = rec("tokens", np.clip(
        rhu_shift(tok_conv + pos_fixed, exp_n["tok_conv"] - exp_n["tokens"]),
        -INT8_MAX, INT8_MAX))

    block_in_exp = exp_n["tokens"]
    for i in range(cfg.n_blocks):
        branches = {}
        for d in ("fwd", "bwd"):
            p = f"blocks.{i}.{d}."
            seq = tokens if d == "fwd" else tokens[::-1]
            xz = _matmul_layer(image, p + "in_proj", seq, nw)
            x_q = rec(p + "x", xz[:, :cfg.d_inner])
            gate_q = rec(p + "gate", xz[:, cfg.d_inner:])

            conv_lay = image.layers[p + "conv"]
            if conv_lay.kind == "t2":
                kernel = unpack_rows(conv_lay.words, cfg.d_conv, np.arange(cfg.d_inner))
            else:
                kernel = conv_lay.q
            conv_q = rec(p + "conv", depthwise_conv_int8(
                x_q, kernel, conv_lay.bias, conv_lay.m, conv_lay.k))

            su = lut_eval(image.luts["silu"], widen(conv_q, exp_n[p + "conv"], ACT_FRAC))
            u_q = rec(p + "u", np.clip(
                rhu_shift(su, SILU_OUT_FRAC - exp_n[p + "u"]), -INT8_MAX, INT8_MAX))

            dbl = _matmul_layer(image, p + "x_proj", u_q, nw)
            dr, ds = cfg.dt_rank, cfg.d_state
            dtr_q = rec(p + "dt_raw", dbl[:, :dr])
            b_q = rec(p + "b", dbl[:, dr:dr + ds])
            c_q = rec(p + "c", dbl[:, dr + ds:])
            dtp_q = rec(p + "dt_pre", _matmul_layer(image, p + "dt_proj", dtr_q, nw))

            y_q = rec(p + "y", _scan_direction(image, i, d, u_q, b_q, c_q, dtp_q,
                                               nw, stats))

            sg = lut_eval(image.luts["silu"],
                          widen(gate_q, exp_n[p + "gate"], ACT_FRAC))
            gated = rec(p + "gated", np.clip(
                rhu_shift(y_q * sg, exp_n[p + "y"] + SILU_OUT_FRAC - exp_n[p + "gated"]),
                -INT8_MAX, INT8_MAX))

            out = _matmul_layer(image, p + "out_proj", gated, nw)
            branches[d] = rec(p + "branch", out if d == "fwd" else out[::-1])

        nf = exp_n[f"blocks.{i}.fwd.branch"]
        nb = exp_n[f"blocks.{i}.bwd.branch"]
        n_fused = exp_n[f"blocks.{i}.fused"]
        if cfg.fusion == "mean":
            n_hi = max(nf, nb)
            v = (branches["fwd"] << (n_hi - nf)) + (branches["bwd"] << (n_hi - nb))
            fused = np.clip(rhu_shift(v, n_hi - n_fused + 1), -INT8_MAX, INT8_MAX)
        else:
            fused = _align_add(branches["fwd"], nf, branches["bwd"], nb, n_fused)
        rec(f"blocks.{i}.fused", fused)
        tokens = rec(f"blocks.{i}.out", _align_add(
            tokens, block_in_exp, fused, n_fused, exp_n[f"blocks.{i}.out"]))
        block_in_exp = exp_n[f"blocks.{i}.out"]

    pool_acc = tokens.sum(axis=0)
    pooled = rec("pooled", np.clip(
        rhu_shift(pool_acc * np.int64(image.pool_m), image.pool_k), -INT8_MAX, INT8_MAX))

    if image.head_kind == "t2":
        head_w = unpack_rows(image.head_words, cfg.d_model, np.arange(cfg.n_classes))
    else:
        head_w = image.head_q.astype(np.int64)
    logits_i = pooled @ head_w.T + image.head_bias
    if trace is not None:
        trace["logits_i32"] = logits_i.astype(np.int32)
    logits_f = logits_i.astype(np.float64) * image.head_dequant
    return logits_i.astype(np.int64), logits_f, stats
