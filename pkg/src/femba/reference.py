"""Integer-semantics reference forward pass.

A plain, unblocked implementation of the quantized network over a deployment
image: the fake-quantized graph evaluated with exact integer arithmetic
(integers carried in int64 arrays). This is the oracle the optimized engine
must match bit for bit; it deliberately shares no kernel code with it.
"""

from __future__ import annotations

import numpy as np

from . import image as im
from . import model as fm
from . import quantizer as qz

_Q15_LO, _Q15_HI = -(1 << 15), (1 << 15) - 1


def _round_shift(v, k: int):
    # round-half-up: floor(v / 2^k + 1/2); left shift when k is negative
    v = np.asarray(v, dtype=np.int64)
    if k > 0:
        return np.floor_divide(v + (1 << (k - 1)), 1 << k)
    return v * (1 << (-k)) if k < 0 else v


def _to_frac(q, n_from: int, n_to: int):
    return _round_shift(np.asarray(q, dtype=np.int64), n_from - n_to)


def _clip8(v):
    return np.clip(v, -127, 127)


def _dense(layer: im.MatmulLayer) -> np.ndarray:
    if layer.kind == "t2":
        packed = qz.TernaryPacked(layer.words, int(np.prod(layer.shape)),
                                  layer.shape, np.ones(layer.shape[0]))
        return qz.unpack_ternary(packed).astype(np.int64)
    return layer.q.astype(np.int64)


def _vec(kind, q, words, shape) -> np.ndarray:
    if kind == "t2":
        packed = qz.TernaryPacked(words, int(np.prod(shape)), shape, np.ones(1))
        return qz.unpack_ternary(packed).astype(np.int64).reshape(shape)
    return q.astype(np.int64).reshape(shape)


def _linear(image, name, act_q):
    lay = image.layers[name]
    acc = np.asarray(act_q, dtype=np.int64) @ _dense(lay).T + lay.bias
    return _clip8(_round_shift(acc * lay.m, lay.k))


def _interp(lut, x_fixed):
    # same table contract as the engine, independently written: index by
    # division, interpolate with a rounded scaled difference
    step = 1 << lut.step_shift
    rel = np.clip(np.asarray(x_fixed, dtype=np.int64) - lut.lo_fixed,
                  0, (len(lut.entries) - 1) * step)
    i = np.minimum(np.floor_divide(rel, step), len(lut.entries) - 2)
    r = rel - i * step
    base = lut.entries.astype(np.int64)[i]
    nxt = lut.entries.astype(np.int64)[i + 1]
    return base + _round_shift((nxt - base) * r, lut.step_shift)


def reference_int_forward(image: im.EngineImage, window: np.ndarray,
                          trace: dict | None = None):
    """Bit-exact oracle: returns (logits_int, logits_float)."""
    cfg = image.cfg
    n = image.act_exp

    def rec(tap, q):
        if trace is not None:
            trace[tap] = np.asarray(q).astype(np.int8)
        return q

    x = np.asarray(window, dtype=np.float64) * 2.0 ** n["input"]
    q_in = rec("input", _clip8(np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64))

    patches = q_in.reshape(cfg.n_channels, cfg.n_patches, cfg.patch_size)
    patches = patches.transpose(1, 0, 2).reshape(cfg.n_patches, -1)
    tok_conv = rec("tok_conv",
                   _linear(image, "tokenizer", patches).reshape(cfg.n_tokens, cfg.d_model))

    pos = _vec(image.pos_kind, image.pos_q, image.pos_words,
               (cfg.n_tokens, cfg.d_model))
    pos_fx = _round_shift(pos * image.pos_m[:, None], image.pos_k)
    tokens = rec("tokens", _clip8(_to_frac(tok_conv + pos_fx,
                                           n["tok_conv"], n["tokens"])))

    n_block_in = n["tokens"]
    for i in range(cfg.n_blocks):
        outs = {}
        for d in ("fwd", "bwd"):
            p = f"blocks.{i}.{d}."
            seq = tokens[::-1] if d == "bwd" else tokens
            xz = _linear(image, p + "in_proj", seq)
            xq = rec(p + "x", xz[:, :cfg.d_inner])
            gq = rec(p + "gate", xz[:, cfg.d_inner:])

            lay = image.layers[p + "conv"]
            kern = _dense(lay)
            t_len = xq.shape[0]
            pad = np.concatenate([np.zeros((cfg.d_conv - 1, cfg.d_inner), np.int64), xq])
            acc = sum(pad[j:j + t_len] * kern[:, j] for j in range(cfg.d_conv)) + lay.bias
            cq = rec(p + "conv", _clip8(_round_shift(acc * lay.m, lay.k)))

            su = _interp(image.luts["silu"], _to_frac(cq, n[p + "conv"], 15))
            uq = rec(p + "u", _clip8(_to_frac(su, 12, n[p + "u"])))

            dbl = _linear(image, p + "x_proj", uq)
            dr, ds = cfg.dt_rank, cfg.d_state
            dtr = rec(p + "dt_raw", dbl[:, :dr])
            bq = rec(p + "b", dbl[:, dr:dr + ds])
            cq2 = rec(p + "c", dbl[:, dr + ds:])
            dtp = rec(p + "dt_pre", _linear(image, p + "dt_proj", dtr))

            sp = image.scan[(i, d)]
            dt_fix = _interp(image.luts["softplus"], _to_frac(dtp, n[p + "dt_pre"], 15))
            a_q = _vec(sp.a_kind, sp.a_q, sp.a_words, (cfg.d_inner, cfg.d_state))
            la = _round_shift(dt_fix[:, :, None] * a_q[None] * sp.a_m[None, :, None],
                              sp.a_k)
            abar = _interp(image.luts["exp"], la)
            bx = np.clip(_round_shift((dt_fix * uq)[:, :, None] * bq[:, None, :],
                                      11 + n[p + "u"] + n[p + "b"] - 15),
                         _Q15_LO, _Q15_HI)
            h = np.zeros((cfg.d_inner, cfg.d_state), dtype=np.int64)
            hs = np.empty((t_len, cfg.d_inner, cfg.d_state), dtype=np.int64)
            for t in range(t_len):
                h = np.clip(_round_shift(abar[t] * h, 15) + bx[t], _Q15_LO, _Q15_HI)
                hs[t] = h
            y_acc = (cq2[:, None, :] * hs).sum(axis=2)
            d_q = _vec(sp.d_kind, sp.d_q, sp.d_words, (cfg.d_inner,))
            du = _round_shift(d_q[None, :] * uq * sp.d_m, sp.d_k)
            yq = rec(p + "y", _clip8(_round_shift(y_acc + du,
                                                  n[p + "c"] + 15 - n[p + "y"])))

            sg = _interp(image.luts["silu"], _to_frac(gq, n[p + "gate"], 15))
            gated = rec(p + "gated",
                        _clip8(_to_frac(yq * sg, n[p + "y"] + 12, n[p + "gated"])))
            o = _linear(image, p + "out_proj", gated)
            outs[d] = rec(p + "branch", o[::-1] if d == "bwd" else o)

        nf, nb = n[f"blocks.{i}.fwd.branch"], n[f"blocks.{i}.bwd.branch"]
        hi = max(nf, nb)
        merged = outs["fwd"] * (1 << (hi - nf)) + outs["bwd"] * (1 << (hi - nb))
        extra = 1 if cfg.fusion == "mean" else 0
        fused = rec(f"blocks.{i}.fused",
                    _clip8(_round_shift(merged, hi - n[f"blocks.{i}.fused"] + extra)))
        hi2 = max(n_block_in, n[f"blocks.{i}.fused"])
        res = tokens * (1 << (hi2 - n_block_in)) + fused * (1 << (hi2 - n[f"blocks.{i}.fused"]))
        tokens = rec(f"blocks.{i}.out",
                     _clip8(_round_shift(res, hi2 - n[f"blocks.{i}.out"])))
        n_block_in = n[f"blocks.{i}.out"]

    pooled = rec("pooled", _clip8(_round_shift(tokens.sum(axis=0) * image.pool_m,
                                               image.pool_k)))
    if image.head_kind == "t2":
        hw = _vec("t2", None, image.head_words, (cfg.n_classes, cfg.d_model))
    else:
        hw = image.head_q.astype(np.int64)
    logits_i = pooled @ hw.T + image.head_bias
    if trace is not None:
        trace["logits_i32"] = logits_i.astype(np.int32)
    return logits_i, logits_i.astype(np.float64) * image.head_dequant


# ---------------------------------------------------------------------------
# float-semantics fake-quant view of a deployment image

def _aligned_weights(image: im.EngineImage):
    """Dequantized weights/biases under the image's aligned (folded) scales."""
    cfg = image.cfg
    n = image.act_exp
    ws, bs = {}, {}
    for layer in qz.layer_catalog(cfg):
        name = layer["name"]
        if name == "head":
            hq = _vec(image.head_kind, image.head_q, image.head_words,
                      (cfg.n_classes, cfg.d_model)).astype(np.float64)
            s_head = image.head_dequant * 2.0 ** n["pooled"]
            ws[name] = hq * s_head[:, None]
            bs[name] = image.head_bias.astype(np.float64) * image.head_dequant
            continue
        lay = image.layers[name]
        n_in = n[layer["in_tap"]]
        n_out = np.concatenate([np.full(rows, n[tap], dtype=np.float64)
                                for tap, rows in layer["out_taps"]])
        r = lay.m.astype(np.float64) * 2.0 ** (-lay.k)
        s_w = r * 2.0 ** (n_in - n_out)
        ws[name] = _dense(lay).astype(np.float64) * s_w[:, None]
        bs[name] = lay.bias.astype(np.float64) * (2.0 ** (-n_in) * s_w)
    return ws, bs


def fakequant_float_from_image(image: im.EngineImage, window: np.ndarray) -> np.ndarray:
    """Float-arithmetic fake-quant forward using the image's aligned scales:
    quantize/dequantize at every activation point, dequantized weights, exact
    nonlinearities (the integer path's float-domain counterpart)."""
    cfg = image.cfg
    n = image.act_exp
    ws, bs = _aligned_weights(image)

    def qdq(x, tap):
        q = np.clip(np.sign(x) * np.floor(np.abs(x) * 2.0 ** n[tap] + 0.5), -127, 127)
        return q * 2.0 ** (-n[tap])

    x = qdq(np.asarray(window, dtype=np.float64), "input")
    feats = fm.patch_matrix(x, cfg) @ ws["tokenizer"].T + bs["tokenizer"]
    tok_conv = qdq(feats.reshape(cfg.n_tokens, cfg.d_model), "tok_conv")
    pos_q = _vec(image.pos_kind, image.pos_q, image.pos_words,
                 (cfg.n_tokens, cfg.d_model)).astype(np.float64)
    s_pos = image.pos_m.astype(np.float64) * 2.0 ** (-image.pos_k - n["tok_conv"])
    tokens = qdq(tok_conv + pos_q * s_pos[:, None], "tokens")

    for i in range(cfg.n_blocks):
        outs = {}
        for d in ("fwd", "bwd"):
            p = f"blocks.{i}.{d}."
            seq = tokens[::-1] if d == "bwd" else tokens
            xz = seq @ ws[p + "in_proj"].T + bs[p + "in_proj"]
            xq = qdq(xz[:, :cfg.d_inner], p + "x")
            gate = qdq(xz[:, cfg.d_inner:], p + "gate")
            conv = fm.causal_depthwise_conv(xq, ws[p + "conv"], bs[p + "conv"])
            conv = qdq(conv, p + "conv")
            u = qdq(fm.silu(conv), p + "u")
            dbl = u @ ws[p + "x_proj"].T + bs[p + "x_proj"]
            dr, ds = cfg.dt_rank, cfg.d_state
            dt_raw = qdq(dbl[:, :dr], p + "dt_raw")
            b = qdq(dbl[:, dr:dr + ds], p + "b")
            cvec = qdq(dbl[:, dr + ds:], p + "c")
            dt_pre = qdq(dt_raw @ ws[p + "dt_proj"].T + bs[p + "dt_proj"], p + "dt_pre")
            delta = np.clip(fm.softplus(dt_pre), cfg.dt_min, cfg.dt_max)
            sp = image.scan[(i, d)]
            a_q = _vec(sp.a_kind, sp.a_q, sp.a_words, (cfg.d_inner, cfg.d_state))
            s_a = sp.a_m.astype(np.float64) * 2.0 ** (-sp.a_k - 1)
            a = a_q.astype(np.float64) * s_a[:, None]
            d_q = _vec(sp.d_kind, sp.d_q, sp.d_words, (cfg.d_inner,))
            s_d = sp.d_m * 2.0 ** (-sp.d_k) * 2.0 ** (n[p + "u"] - n[p + "c"] - 15)
            # match the LUT path, which clamps exp(delta*a) at 1 for a >= 0
            y = fm.selective_scan(u, delta, np.minimum(a, 0.0), b, cvec,
                                  d_q.astype(np.float64) * s_d)
            y = qdq(y, p + "y")
            gated = qdq(y * fm.silu(gate), p + "gated")
            o = gated @ ws[p + "out_proj"].T + bs[p + "out_proj"]
            outs[d] = qdq(o[::-1] if d == "bwd" else o, p + "branch")
        fused = outs["fwd"] + outs["bwd"]
        if cfg.fusion == "mean":
            fused = 0.5 * fused
        fused = qdq(fused, f"blocks.{i}.fused")
        tokens = qdq(tokens + fused, f"blocks.{i}.out")

    pooled = qdq(tokens.mean(axis=0), "pooled")
    return pooled @ ws["head"].T + bs["head"]
