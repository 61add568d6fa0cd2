"""Hierarchical memory-streaming simulator with a MACs/cycle cost model.

Models the double-buffered weight path of the target device: weight tensors
stream from off-chip storage to on-chip L2 in fixed-size chunks while the
cores compute on the previous chunk, and each chunk is re-tiled into the L1
scratchpad. Produces per-layer and per-sub-operation cycle breakdowns,
compute/transfer overlap, latency, and energy.

Pipeline model per layer: chunks (c_i = compute cycles, t_i = transfer
cycles) execute as t_0 + sum_i max(c_i, t_{i+1}); the leading fill transfer
is charged explicitly. Overlap is measured over the steady-state transfers
(everything after the fill): 100% when each is fully hidden under the
previous chunk's compute.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

from .model import ModelConfig

LAYER_ORDER = ("patch_embed", "pos_embed", "mamba_blocks", "global_pool", "classifier")
SUB_OP_ORDER = ("input_proj", "seq_reversal_fwd", "conv", "scan",
                "output_proj", "seq_reversal_bwd", "fusion")
SUB_OP_TITLES = {
    "input_proj": "Input Projection",
    "seq_reversal_fwd": "Sequence Reversal",
    "conv": "Local Temporal Conv.",
    "scan": "Selective SSM Scan",
    "output_proj": "Output Projection",
    "seq_reversal_bwd": "Sequence Reversal",
    "fusion": "Bidirectional Fusion",
}


class PlanError(ValueError):
    """Tiling constraint violated (e.g. one row cannot fit half of L1)."""


@dataclass(frozen=True)
class MemHierarchy:
    l1_bytes: int = 131072
    l2_bytes: int = 1572864
    l3_chunk_bytes: int = 81920
    l2_bandwidth_bytes_per_cycle: float = 4.0   # L3 -> L2 DMA
    l1_bandwidth_bytes_per_cycle: float = 32.0  # L2 -> L1 tiling
    clock_hz: float = 3.7e8
    avg_power_w: float = 0.0441

    def __post_init__(self):
        for name in ("l1_bytes", "l2_bytes", "l3_chunk_bytes",
                     "l2_bandwidth_bytes_per_cycle", "l1_bandwidth_bytes_per_cycle",
                     "clock_hz", "avg_power_w"):
            if getattr(self, name) <= 0:
                raise PlanError(f"{name} must be positive")
        if self.l3_chunk_bytes > self.l2_bytes // 2:
            raise PlanError("chunk size must leave room for two resident chunks in L2")


@dataclass(frozen=True)
class CostModel:
    # dense-equivalent MACs per cycle per op class
    throughput: dict = field(default_factory=lambda: {
        "input_proj": 2.65, "output_proj": 3.91, "conv": 0.11, "scan": 0.32})
    # fixed cycle budgets for non-MAC sub-ops and small layers
    fixed_cycles: dict = field(default_factory=lambda: {
        "seq_reversal_fwd": 1.6e6, "seq_reversal_bwd": 1.0e6, "fusion": 2.1e6,
        "patch_embed": 8.0e6, "pos_embed": 2.3e6, "global_pool": 0.5e6,
        "classifier": 0.05e6})
    scan_mac_mode: str = "table"  # "table" (per-step constant) | "analytic"
    scan_macs_per_step: int = 256

    def __post_init__(self):
        if any(v <= 0 for v in self.throughput.values()):
            raise PlanError("throughputs must be positive")


def mac_count(cfg: ModelConfig, cm: CostModel = CostModel()) -> dict[str, int]:
    """Per-block dense-equivalent MAC counts for the four scan-branch sub-ops.

    The scan row follows the device accounting convention (a per-step
    constant per channel); the analytic mode instead counts the recurrence
    arithmetic (3*d_state + 2 per channel-step).
    """
    per_step = (cm.scan_macs_per_step if cm.scan_mac_mode == "table"
                else 3 * cfg.d_state + 2)
    return {
        "input_proj": cfg.n_tokens * cfg.d_model * 2 * cfg.d_inner,
        "output_proj": cfg.n_tokens * cfg.d_inner * cfg.d_model,
        "conv": cfg.n_tokens * cfg.d_inner * cfg.d_conv,
        "scan": per_step * cfg.n_tokens * cfg.d_inner,
    }


# ---------------------------------------------------------------------------
# model -> streamable tensors

_BYTES_PER_WEIGHT = {"fp32": 4.0, "w8a8": 1.0, "w4a8": 1.0}


def _weight_bytes(elems: int, mode: str) -> int:
    if mode == "w2a8":
        return ((elems + 15) // 16) * 4
    return int(elems * _BYTES_PER_WEIGHT.get(mode, 1.0))


@dataclass(frozen=True)
class SubOp:
    name: str
    macs: int = 0
    fixed_cycles: float = 0.0
    tensors: tuple = ()  # (tensor_name, bytes, row_bytes)


@dataclass(frozen=True)
class LayerPlanSpec:
    name: str
    sub_ops: tuple


def model_layers(cfg: ModelConfig, cm: CostModel, mode: str = "w8a8") -> list[LayerPlanSpec]:
    """Layer/sub-op schedule for the full encoder in report order."""
    macs = mac_count(cfg, cm)
    gd = cfg.n_groups * cfg.d_model
    per_dir = {
        "in_proj": (2 * cfg.d_inner * cfg.d_model, cfg.d_model),
        "out_proj": (cfg.d_model * cfg.d_inner, cfg.d_inner),
        "conv": (cfg.d_inner * cfg.d_conv, cfg.d_conv),
        "x_proj": ((cfg.dt_rank + 2 * cfg.d_state) * cfg.d_inner, cfg.d_inner),
        "dt_proj": (cfg.d_inner * cfg.dt_rank, cfg.dt_rank),
        "a_mat": (cfg.d_inner * cfg.d_state, cfg.d_state),
        "d_skip": (cfg.d_inner, cfg.d_inner),
    }

    def dir_tensors(i, names):
        out = []
        for d in ("fwd", "bwd"):
            for nm in names:
                elems, row = per_dir[nm]
                out.append((f"blocks.{i}.{d}.{nm}", _weight_bytes(elems, mode),
                            _weight_bytes(row, mode)))
        return tuple(out)

    layers = [
        LayerPlanSpec("patch_embed", (SubOp(
            "patch_embed", fixed_cycles=cm.fixed_cycles["patch_embed"],
            tensors=(("tokenizer", _weight_bytes(gd * cfg.n_channels * cfg.patch_size, mode),
                      _weight_bytes(cfg.n_channels * cfg.patch_size, mode)),)),)),
        LayerPlanSpec("pos_embed", (SubOp(
            "pos_embed", fixed_cycles=cm.fixed_cycles["pos_embed"],
            tensors=(("pos_embed", _weight_bytes(cfg.n_tokens * cfg.d_model, mode),
                      _weight_bytes(cfg.d_model, mode)),)),)),
    ]
    for i in range(cfg.n_blocks):
        sub_ops = (
            SubOp("input_proj", macs=macs["input_proj"], tensors=dir_tensors(i, ("in_proj",))),
            SubOp("seq_reversal_fwd", fixed_cycles=cm.fixed_cycles["seq_reversal_fwd"]),
            SubOp("conv", macs=macs["conv"], tensors=dir_tensors(i, ("conv",))),
            SubOp("scan", macs=macs["scan"],
                  tensors=dir_tensors(i, ("x_proj", "dt_proj", "a_mat", "d_skip"))),
            SubOp("output_proj", macs=macs["output_proj"], tensors=dir_tensors(i, ("out_proj",))),
            SubOp("seq_reversal_bwd", fixed_cycles=cm.fixed_cycles["seq_reversal_bwd"]),
            SubOp("fusion", fixed_cycles=cm.fixed_cycles["fusion"]),
        )
        layers.append(LayerPlanSpec(f"mamba_blocks.{i}", sub_ops))
    layers.append(LayerPlanSpec("global_pool", (SubOp(
        "global_pool", fixed_cycles=cm.fixed_cycles["global_pool"]),)))
    layers.append(LayerPlanSpec("classifier", (SubOp(
        "classifier", fixed_cycles=cm.fixed_cycles["classifier"],
        tensors=(("head", _weight_bytes(cfg.n_classes * cfg.d_model, mode),
                  _weight_bytes(cfg.d_model, mode)),)),)))
    return layers


# ---------------------------------------------------------------------------
# streaming plan

@dataclass(frozen=True)
class Tile:
    start: int
    nbytes: int
    slot: int


@dataclass(frozen=True)
class Chunk:
    layer: str
    sub_op: str
    tensor: str
    start: int
    nbytes: int
    slot: int
    tiles: tuple


@dataclass(frozen=True)
class StreamPlan:
    chunks: tuple  # Chunk, in execution order
    layers: tuple  # LayerPlanSpec


def plan_stream(layers: list[LayerPlanSpec], h: MemHierarchy) -> StreamPlan:
    """Chunk every weight tensor into <= l3_chunk_bytes transfers covering it
    exactly once, with per-chunk L1 tiles and alternating buffer slots."""
    half_l1 = h.l1_bytes // 2
    chunks = []
    for layer in layers:
        slot = 0
        for sub in layer.sub_ops:
            for tname, nbytes, row_bytes in sub.tensors:
                if row_bytes > half_l1:
                    raise PlanError(
                        f"{tname}: row of {row_bytes} B cannot fit half of L1 ({half_l1} B)")
                pos = 0
                while pos < nbytes:
                    csize = min(h.l3_chunk_bytes, nbytes - pos)
                    tiles, tpos, tslot = [], 0, 0
                    while tpos < csize:
                        tsize = min(half_l1, csize - tpos)
                        tiles.append(Tile(pos + tpos, tsize, tslot))
                        tslot ^= 1
                        tpos += tsize
                    chunks.append(Chunk(layer.name, sub.name, tname, pos, csize,
                                        slot, tuple(tiles)))
                    slot ^= 1
                    pos += csize
    return StreamPlan(tuple(chunks), tuple(layers))


# ---------------------------------------------------------------------------
# simulation

@dataclass
class LayerReport:
    name: str
    cycles: float
    macs: int
    overlap_pct: float
    bytes_moved: int
    pct: float = 0.0

    @property
    def macs_per_cycle(self) -> float:
        return self.macs / self.cycles if self.cycles else 0.0


@dataclass
class SubOpReport:
    layer: str
    name: str
    cycles: float
    macs: int
    pct: float = 0.0

    @property
    def macs_per_cycle(self) -> float:
        return self.macs / self.cycles if self.cycles else 0.0


@dataclass
class CycleReport:
    layers: list
    sub_ops: list
    total_cycles: float
    total_macs: int
    latency_s: float
    energy_j: float
    overlap_pct: float


def _sub_op_compute(sub: SubOp, cm: CostModel) -> float:
    cycles = sub.fixed_cycles
    if sub.macs:
        cycles += sub.macs / cm.throughput[sub.name]
    return cycles


def simulate(plan: StreamPlan, cm: CostModel, h: MemHierarchy) -> CycleReport:
    """Walk the plan layer by layer with double-buffered transfer hiding."""
    bw = min(h.l2_bandwidth_bytes_per_cycle, h.l1_bandwidth_bytes_per_cycle)
    layer_reports, sub_reports = [], []
    total_cycles = 0.0
    total_macs = 0
    hidden_all = 0.0
    steady_all = 0.0

    by_layer: dict[str, list[Chunk]] = {l.name: [] for l in plan.layers}
    for ch in plan.chunks:
        by_layer[ch.layer].append(ch)

    for layer in plan.layers:
        # compute cycles per chunk: each sub-op's compute is spread over its
        # chunks proportionally to bytes (one virtual chunk when nothing streams)
        pairs = []  # (compute, transfer)
        layer_macs = 0
        for sub in layer.sub_ops:
            compute = _sub_op_compute(sub, cm)
            layer_macs += sub.macs
            sub_chunks = [c for c in by_layer[layer.name] if c.sub_op == sub.name]
            sub_bytes = sum(c.nbytes for c in sub_chunks)
            if not sub_chunks:
                sub_pairs = [(compute, 0.0)]
            else:
                sub_pairs = [(compute * c.nbytes / sub_bytes, c.nbytes / bw)
                             for c in sub_chunks]
            pairs.extend(sub_pairs)
            sub_reports.append(SubOpReport(layer.name, sub.name,
                                           _pipeline_cycles(sub_pairs), sub.macs))
        cycles = _pipeline_cycles(pairs)
        hidden, steady = _overlap_components(pairs)
        overlap = 100.0 * hidden / steady if steady > 0 else 100.0
        hidden_all += hidden
        steady_all += steady
        layer_reports.append(LayerReport(layer.name, cycles, layer_macs, overlap,
                                         sum(c.nbytes for c in by_layer[layer.name])))
        total_cycles += cycles
        total_macs += layer_macs

    for r in layer_reports:
        r.pct = 100.0 * r.cycles / total_cycles if total_cycles else 0.0
    for r in sub_reports:
        layer_total = sum(s.cycles for s in sub_reports if s.layer == r.layer)
        r.pct = 100.0 * r.cycles / layer_total if layer_total else 0.0

    latency = total_cycles / h.clock_hz
    return CycleReport(
        layers=layer_reports, sub_ops=sub_reports, total_cycles=total_cycles,
        total_macs=total_macs, latency_s=latency, energy_j=latency * h.avg_power_w,
        overlap_pct=100.0 * hidden_all / steady_all if steady_all > 0 else 100.0)


def _pipeline_cycles(pairs) -> float:
    """t_0 + sum_i max(c_i, t_{i+1}): leading fill, then compute hides the
    next transfer."""
    if not pairs:
        return 0.0
    total = pairs[0][1]
    for i, (c, _) in enumerate(pairs):
        t_next = pairs[i + 1][1] if i + 1 < len(pairs) else 0.0
        total += max(c, t_next)
    return total


def _overlap_components(pairs) -> tuple[float, float]:
    hidden = 0.0
    steady = 0.0
    for i in range(1, len(pairs)):
        t = pairs[i][1]
        steady += t
        hidden += min(t, pairs[i - 1][0])
    return hidden, steady


def run_default(cfg: ModelConfig = ModelConfig(), cm: CostModel = CostModel(),
                h: MemHierarchy = MemHierarchy(), mode: str = "w8a8") -> CycleReport:
    return simulate(plan_stream(model_layers(cfg, cm, mode), h), cm, h)


# ---------------------------------------------------------------------------
# rendering

def report(cr: CycleReport, fmt: str = "text") -> str:
    if fmt == "csv":
        return _report_csv(cr)
    if fmt != "text":
        raise ValueError("format must be 'text' or 'csv'")
    out = io.StringIO()
    out.write(f"{'Layer':<18} {'Cycles (M)':>11} {'% Total':>8} {'Overlap %':>10}\n")
    for r in cr.layers:
        out.write(f"{r.name:<18} {r.cycles / 1e6:>11.1f} {r.pct:>8.1f} "
                  f"{r.overlap_pct:>10.1f}\n")
    out.write(f"{'Total':<18} {cr.total_cycles / 1e6:>11.1f} {100.0:>8.1f}\n\n")
    for layer in cr.layers:
        subs = [s for s in cr.sub_ops if s.layer == layer.name]
        if len(subs) < 2:
            continue
        out.write(f"{layer.name}\n")
        out.write(f"  {'Operation':<24} {'Cycles (M)':>11} {'%':>7} "
                  f"{'MACs (M)':>9} {'MACs/Cyc':>9}\n")
        for s in subs:
            macs = f"{s.macs / 1e6:.1f}" if s.macs else "-"
            mpc = f"{s.macs_per_cycle:.2f}" if s.macs else "-"
            out.write(f"  {SUB_OP_TITLES.get(s.name, s.name):<24} "
                      f"{s.cycles / 1e6:>11.1f} {s.pct:>7.1f} {macs:>9} {mpc:>9}\n")
        out.write("\n")
    out.write(f"Latency: {cr.latency_s:.4f} s @ {cr.total_cycles / cr.latency_s / 1e6:.0f} MHz\n"
              if cr.latency_s else "")
    out.write(f"Energy:  {cr.energy_j * 1e3:.2f} mJ\n")
    return out.getvalue()


def _report_csv(cr: CycleReport) -> str:
    lines = ["section,layer,operation,cycles,pct,overlap_pct,macs,macs_per_cycle"]
    for r in cr.layers:
        lines.append(f"layer,{r.name},,{r.cycles:.6f},{r.pct:.6f},"
                     f"{r.overlap_pct:.6f},{r.macs},{r.macs_per_cycle:.6f}")
    for s in cr.sub_ops:
        lines.append(f"sub_op,{s.layer},{s.name},{s.cycles:.6f},{s.pct:.6f},,"
                     f"{s.macs},{s.macs_per_cycle:.6f}")
    lines.append(f"total,,,{cr.total_cycles:.6f},100.000000,{cr.overlap_pct:.6f},"
                 f"{cr.total_macs},{cr.total_macs / cr.total_cycles:.6f}")
    lines.append(f"latency_s,,,{cr.latency_s:.9f},,,,")
    lines.append(f"energy_j,,,{cr.energy_j:.9f},,,,")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# key = value config files

def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = float(val) if ("." in val or "e" in val.lower()) else int(val)
        except ValueError:
            out[key] = val
    return out


def config_from_mapping(kv: dict) -> tuple[MemHierarchy, CostModel, str]:
    h_fields = {f: kv[f] for f in (
        "l1_bytes", "l2_bytes", "l3_chunk_bytes", "l2_bandwidth_bytes_per_cycle",
        "l1_bandwidth_bytes_per_cycle", "clock_hz", "avg_power_w") if f in kv}
    h = MemHierarchy(**h_fields)
    cm = CostModel()
    thr = dict(cm.throughput)
    fc = dict(cm.fixed_cycles)
    for key, val in kv.items():
        if key.startswith("throughput."):
            thr[key.split(".", 1)[1]] = float(val)
        elif key.startswith("fixed_cycles."):
            fc[key.split(".", 1)[1]] = float(val)
    cm = replace(cm, throughput=thr, fixed_cycles=fc,
                 scan_mac_mode=kv.get("scan_mac_mode", cm.scan_mac_mode),
                 scan_macs_per_step=int(kv.get("scan_macs_per_step", cm.scan_macs_per_step)))
    mode = kv.get("mode", "w8a8")
    return h, cm, mode
