"""Attention-distribution capture, drift metrics, and run comparison.

Attention maps are compared positionally (layer l head h against layer l
head h). Distributions are compared with Jensen-Shannon divergence in
natural log, so every entry is bounded by ln 2; rows belonging to padded
query or key positions are excluded and the remaining key mass is
renormalized over the valid length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import CLS_ID, SEP_ID, Batch, IGNORE_INDEX, tokenize
from .errors import DataError
from .model import forward
from .persistence import load_checkpoint
from .tensor import no_grad

LN2 = math.log(2.0)


@dataclass
class AttentionMap:
    """Per-probe attention probabilities: values[p, layer, head, query, key]."""

    probe_id: str
    values: np.ndarray
    valid_lens: np.ndarray
    token_ids: np.ndarray  # [P, S], for CLS/SEP mass reporting

    @property
    def depth(self):
        return self.values.shape[1]

    @property
    def heads(self):
        return self.values.shape[2]


def probe_batch_from_lines(lines, vocab, seq_len):
    """One single-segment probe sequence per non-empty line: [CLS] tokens [SEP]."""
    rows = []
    for line in lines:
        tokens = tokenize(line)
        if tokens:
            ids = [CLS_ID] + vocab.encode(tokens)[: seq_len - 2] + [SEP_ID]
            rows.append(ids)
    if not rows:
        raise DataError("probe file contains no usable sentences")
    n = len(rows)
    token_ids = np.zeros((n, seq_len), dtype=np.int64)
    attention_mask = np.zeros((n, seq_len), dtype=np.int64)
    valid_lens = np.zeros(n, dtype=np.int64)
    for r, ids in enumerate(rows):
        token_ids[r, : len(ids)] = ids
        attention_mask[r, : len(ids)] = 1
        valid_lens[r] = len(ids)
    batch = Batch(
        token_ids=token_ids,
        segment_ids=np.zeros((n, seq_len), dtype=np.int64),
        attention_mask=attention_mask,
        mlm_labels=np.full((n, seq_len), IGNORE_INDEX, dtype=np.int64),
        nsp_labels=np.zeros(n, dtype=np.int64),
    )
    return batch, valid_lens


def capture_from_model(model, batch, valid_lens, probe_id="probes"):
    """Forward with attention capture; no parameters are touched."""
    with no_grad():
        out = forward(model, batch, capture_attention=True)
    values = np.stack(out.attention, axis=0).transpose(1, 0, 2, 3, 4)
    return AttentionMap(
        probe_id=probe_id,
        values=values,
        valid_lens=np.asarray(valid_lens),
        token_ids=np.asarray(batch.token_ids),
    )


def capture(checkpoint_path, batch, valid_lens, probe_id="probes"):
    """Load a checkpoint immutably and capture its attention maps."""
    model, _, _ = load_checkpoint(checkpoint_path)
    return capture_from_model(model, batch, valid_lens, probe_id)


def _js_rows(p, q):
    """Row-wise JS divergence for stacked distributions [..., K] (0*ln 0 := 0)."""
    m = 0.5 * (p + q)
    log_m = np.log(np.where(m > 0.0, m, 1.0))

    def half_kl(a):
        t = np.where(a > 0.0, a * (np.log(np.where(a > 0.0, a, 1.0)) - log_m), 0.0)
        return t.sum(axis=-1)

    return 0.5 * half_kl(p) + 0.5 * half_kl(q)


def js_divergence(p, q):
    """JS(p, q) with natural log; inputs must each sum to 1 (+-1e-6)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"js_divergence: need equal-length vectors, got {p.shape}, {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any() or abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"js_divergence: {name} is not a probability vector (sum {v.sum()})")
    return float(_js_rows(p[None, :], q[None, :])[0])


@dataclass
class DriftReport:
    """Mean JS divergence per (layer, head) over all valid probe query rows."""

    layers: list
    values: np.ndarray  # [len(layers), heads]

    def rows(self):
        return [
            {"layer": layer, "head": h, "js": float(self.values[i, h])}
            for i, layer in enumerate(self.layers)
            for h in range(self.values.shape[1])
        ]


def drift(a, b, layer_range=None):
    """Per-(layer, head) attention drift between two maps over shared probes."""
    if a.values.shape[0] != b.values.shape[0] or not np.array_equal(a.token_ids, b.token_ids):
        raise DataError("attention maps were captured on different probes")
    if a.heads != b.heads or a.values.shape[3:] != b.values.shape[3:]:
        raise DataError(
            f"attention maps have incompatible shapes {a.values.shape} vs {b.values.shape}"
        )
    if layer_range is None:
        layers = list(range(min(a.depth, b.depth)))
    else:
        layers = list(layer_range)
        bad = [l for l in layers if l >= a.depth or l >= b.depth]
        if bad:
            raise DataError(f"layer_range {bad} out of range for depths {a.depth}/{b.depth}")

    heads = a.heads
    values = np.zeros((len(layers), heads))
    for li, layer in enumerate(layers):
        for h in range(heads):
            total, count = 0.0, 0
            for p in range(a.values.shape[0]):
                n = int(a.valid_lens[p])
                pa = a.values[p, layer, h, :n, :n]
                pb = b.values[p, layer, h, :n, :n]
                pa = pa / pa.sum(axis=-1, keepdims=True)
                pb = pb / pb.sum(axis=-1, keepdims=True)
                total += _js_rows(pa, pb).sum()
                count += n
            values[li, h] = total / count
    return DriftReport(layers=layers, values=values)


def attention_mass_on(amap, token_id):
    """Mean attention mass per (layer, head) on key positions holding `token_id`."""
    out = np.zeros((amap.depth, amap.heads))
    counts = 0
    totals = np.zeros((amap.depth, amap.heads))
    for p in range(amap.values.shape[0]):
        n = int(amap.valid_lens[p])
        keys = amap.token_ids[p, :n] == token_id
        if not keys.any():
            continue
        rows = amap.values[p, :, :, :n, :n]
        rows = rows / rows.sum(axis=-1, keepdims=True)
        totals += rows[..., keys].sum(axis=-1).sum(axis=-1)
        counts += n
    if counts:
        out = totals / counts
    return out


def cls_sep_mass_rows(amap):
    cls_mass = attention_mass_on(amap, CLS_ID)
    sep_mass = attention_mass_on(amap, SEP_ID)
    return [
        {"layer": l, "head": h,
         "cls_mass": float(cls_mass[l, h]), "sep_mass": float(sep_mass[l, h])}
        for l in range(amap.depth) for h in range(amap.heads)
    ]


# --------------------------------------------------------------------------
# run comparison
# --------------------------------------------------------------------------


@dataclass
class SpeedupReport:
    table: str
    rows: list

    def to_rows(self):
        return self.rows


def _fmt_flops(n):
    return f"{n:.3e}" if n else "0"

def _check_alignment(records):
    steps = {r["summary"]["total_steps"] for r in records}
    if len(steps) != 1:
        raise DataError(f"runs have mismatched total step counts: {sorted(steps)}")
    seeds = {r["summary"]["seed"] for r in records}
    if len(seeds) != 1:
        raise DataError(f"runs have mismatched data seeds: {sorted(seeds)}")


def speedup_report(records, require_alignment=True):
    """Wall-clock and analytic comparison of >= 2 loaded run records.

    The baseline is the scratch run when present, otherwise the first
    record; speedup is baseline wall-clock over the run's wall-clock.
    """
    if not records:
        raise DataError("speedup_report needs at least one run record")
    if require_alignment:
        _check_alignment(records)
    baseline = next(
        (r for r in records if r["summary"]["regime"] == "scratch"), records[0])
    base_wall = baseline["summary"]["total_wall_seconds"]

    rows = []
    for r in records:
        s = r["summary"]
        steps_total = sum(st["steps"] for st in s["stages"])
        fwd = sum(st["mean_fwd_ms"] * st["steps"] for st in s["stages"]) / steps_total
        bwd = sum(st["mean_bwd_ms"] * st["steps"] for st in s["stages"]) / steps_total
        rows.append({
            "dir": r["dir"],
            "regime": s["regime"],
            "seed": s["seed"],
            "total_steps": s["total_steps"],
            "wall_seconds": s["total_wall_seconds"],
            "speedup_vs_baseline": base_wall / s["total_wall_seconds"],
            "mean_fwd_ms": fwd,
            "mean_bwd_ms": bwd,
            "analytic_forward_flops": s["analytic_forward_flops"],
            "analytic_backward_flops": s["analytic_backward_flops"],
            "analytic_comm_bytes": s["analytic_comm_bytes"],
            "final_mlm_loss": s["final_mlm_loss"],
            "per_stage_mean_step_ms": [
                {"name": st["name"], "depth": st["depth"],
                 "mean_step_ms": st["mean_fwd_ms"] + st["mean_bwd_ms"]}
                for st in s["stages"]
            ],
        })

    header = (f"{'regime':<10} {'steps':>9} {'wall s':>10} {'speedup':>8} "
              f"{'fwd ms':>8} {'bwd ms':>8} {'fwd FLOPs':>11} {'bwd FLOPs':>11} "
              f"{'comm B':>11} {'final mlm':>10}")
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['regime']:<10} {row['total_steps']:>9} "
            f"{row['wall_seconds']:>10.2f} {row['speedup_vs_baseline']:>8.3f} "
            f"{row['mean_fwd_ms']:>8.2f} {row['mean_bwd_ms']:>8.2f} "
            f"{_fmt_flops(row['analytic_forward_flops']):>11} "
            f"{_fmt_flops(row['analytic_backward_flops']):>11} "
            f"{_fmt_flops(row['analytic_comm_bytes']):>11} "
            f"{row['final_mlm_loss']:>10.4f}"
        )
    return SpeedupReport(table="\n".join(lines), rows=rows)


def _record_label(record):
    s = record["summary"]
    return f"{s['regime']}_seed{s['seed']}"


def loss_at_step_csv(records):
    """Wide CSV: one row per logged step, one total-loss column per run."""
    steps_per = [[r["step"] for r in rec["steps"]] for rec in records]
    if any(sp != steps_per[0] for sp in steps_per[1:]):
        raise DataError("runs logged different step indices; cannot align loss-at-step")
    labels = [_record_label(r) for r in records]
    lines = ["step," + ",".join(labels)]
    for i, step in enumerate(steps_per[0]):
        vals = ",".join(repr(rec["steps"][i]["total_loss"]) for rec in records)
        lines.append(f"{step},{vals}")
    return "\n".join(lines) + "\n"


def loss_at_wallclock_csv(records):
    """Long CSV: (run, cumulative seconds, step, total loss) per logged step."""
    lines = ["run,cum_seconds,step,total_loss"]
    for rec in records:
        label = _record_label(rec)
        for r in rec["steps"]:
            lines.append(f"{label},{r['cum_seconds']!r},{r['step']},{r['total_loss']!r}")
    return "\n".join(lines) + "\n"
