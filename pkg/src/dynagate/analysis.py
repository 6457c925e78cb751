"""Measurement tooling: per-neuron activation statistics with a
three-way taxonomy, gate activation counting, and a closed-form
compute model.

Conventions used by the compute model (also printed in every report):
one FLOP per multiply-accumulate, so a dense linear over N positions
mapping C to C̄ costs N*C*C̄; per-element costs exp 4, div 1, sqrt 4,
GeLU 8, layer norm 8, bilinear resample 8, softmax 6 per score
(exponential, divide, accumulate); adds 1; reshapes and concatenation
are free. The report covers the encoder and the quarter-resolution
decoder head; resizing logits to the full input is evaluation cost,
not model cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, EmptyInputError, UsageError
from .gating import GateContext, gate_flops
from .model import GATE_KINDS, MitConfig

CONVENTIONS = ("flops: 1 per multiply-accumulate; per element: exp 4, div 1, "
               "sqrt 4, gelu 8, layer_norm 8, bilinear 8, softmax 6/score, "
               "add 1; reshape/concat free; decoder counted to the "
               "quarter-resolution logits")

TRACE_SIGNALS = ("ffn_hidden", "q", "v", "attn_mix")


# ---------------------------------------------------------------------------
# neuron statistics and taxonomy

@dataclass
class NeuronStats:
    """Distribution of per-instance magnitudes for every neuron at one
    traced signal. Magnitude = mean absolute activation over patches."""

    layer_id: str
    signal: str
    median: np.ndarray
    q1: np.ndarray
    q3: np.ndarray
    mn: np.ndarray
    mx: np.ndarray
    instance_count: int

    @property
    def iqr(self) -> np.ndarray:
        return self.q3 - self.q1

    @property
    def width(self) -> int:
        return self.median.shape[0]


class NeuronType(Enum):
    TYPE_I = "I"
    TYPE_II = "II"
    TYPE_III = "III"


@dataclass
class Taxonomy:
    types: list
    median_thresh: float
    range_thresh: float


def instance_magnitudes(model, dataset, layer_id: str,
                        signal: str = "ffn_hidden", ctx=None,
                        batch_size: int = 8) -> np.ndarray:
    """(instances, width) matrix of per-instance neuron magnitudes."""
    if signal not in TRACE_SIGNALS:
        raise UsageError(
            f"unknown signal {signal!r}; expected one of {TRACE_SIGNALS}")
    known = [lid for lid, _ in model.encoder_layers()]
    if layer_id not in known:
        raise UsageError(f"unknown layer id {layer_id!r}; expected one of {known}")
    if len(dataset) < 2:
        raise EmptyInputError(
            f"need at least 2 instances for statistics, have {len(dataset)}")
    from . import tensor as T
    rows = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        images, _ = dataset.batch(idx)
        trace = {}
        with T.no_grad():
            model.encode(images, ctx, trace)
        acts = trace[(layer_id, signal)]
        rows.append(np.abs(acts).mean(axis=1))
    return np.concatenate(rows, axis=0)


def stats_from_magnitudes(mags: np.ndarray, layer_id: str,
                          signal: str) -> NeuronStats:
    if mags.ndim != 2 or mags.shape[0] < 2:
        raise EmptyInputError(
            f"need a (instances >= 2, neurons) matrix, got shape {mags.shape}")
    q1, med, q3 = np.quantile(mags, [0.25, 0.5, 0.75], axis=0,
                              method="linear")
    return NeuronStats(layer_id=layer_id, signal=signal, median=med, q1=q1,
                       q3=q3, mn=mags.min(axis=0), mx=mags.max(axis=0),
                       instance_count=mags.shape[0])


def collect_neuron_stats(model, dataset, layer_id: str,
                         signal: str = "ffn_hidden", ctx=None,
                         batch_size: int = 8) -> NeuronStats:
    """Quartile summary (linear interpolation) of per-instance neuron
    magnitudes at one layer's traced signal."""
    mags = instance_magnitudes(model, dataset, layer_id, signal, ctx,
                               batch_size)
    return stats_from_magnitudes(mags, layer_id, signal)


def classify_neurons(stats: NeuronStats, median_thresh=None,
                     range_thresh=None) -> Taxonomy:
    """Split neurons by magnitude and spread.

    Type II: spread (IQR) at or above the range threshold, whatever the
    level. Otherwise Type I when the median clears the magnitude
    threshold, Type III when it does not. Thresholds default to the
    across-neuron medians of the medians and IQRs.
    """
    if median_thresh is None:
        median_thresh = float(np.median(stats.median))
    if range_thresh is None:
        range_thresh = float(np.median(stats.iqr))
    if median_thresh <= 0 or range_thresh <= 0:
        raise ContractError(
            f"thresholds must be positive, got median {median_thresh}, "
            f"range {range_thresh}")
    types = []
    for med, iqr in zip(stats.median, stats.iqr):
        if iqr >= range_thresh:
            types.append(NeuronType.TYPE_II)
        elif med >= median_thresh:
            types.append(NeuronType.TYPE_I)
        else:
            types.append(NeuronType.TYPE_III)
    return Taxonomy(types=types, median_thresh=median_thresh,
                    range_thresh=range_thresh)


# ---------------------------------------------------------------------------
# gate activation counting

@dataclass
class GateActivationCount:
    """How many evaluation instances drove each gate logit strictly
    positive (counted before top-r selection)."""

    layer_id: str
    kind: str
    counts: np.ndarray
    instance_count: int

    @property
    def always_active(self) -> np.ndarray:
        return self.counts == self.instance_count

    @property
    def never_active(self) -> np.ndarray:
        return self.counts == 0


def count_gate_activations(model, dataset, batch_size: int = 8) -> dict:
    """(layer_id, kind) -> GateActivationCount over the whole dataset."""
    if not getattr(model, "gated", False):
        raise ContractError("model has no gate predictors to count")
    from . import tensor as T
    totals = {}
    n = 0
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        images, _ = dataset.batch(idx)
        ctx = GateContext("dynamic", keep_fraction=1.0, record=True)
        with T.no_grad():
            model.encode(images, ctx)
        n += images.shape[0]
        for layer_id, kind, gm in ctx.records:
            key = (layer_id, kind)
            add = (gm.logits.data > 0).sum(axis=0)
            if key in totals:
                totals[key] += add
            else:
                totals[key] = add.astype(np.int64)
    return {
        key: GateActivationCount(layer_id=key[0], kind=key[1], counts=counts,
                                 instance_count=n)
        for key, counts in totals.items()
    }


# ---------------------------------------------------------------------------
# compute model

@dataclass
class FlopsRow:
    name: str
    dense: float
    gated: float
    predictor: float


@dataclass
class FlopsReport:
    config_echo: str
    keep_echo: str
    rows: list
    conventions: str = CONVENTIONS

    @property
    def total_dense(self) -> float:
        return sum(r.dense for r in self.rows)

    @property
    def total_gated(self) -> float:
        return sum(r.gated for r in self.rows)

    @property
    def total_predictor(self) -> float:
        return sum(r.predictor for r in self.rows)

    @property
    def total(self) -> float:
        return self.total_gated + self.total_predictor

    def find(self, name: str) -> FlopsRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise UsageError(f"no component named {name!r} in the report")

    def render(self) -> str:
        lines = [f"# {self.conventions}",
                 f"# config: {self.config_echo}",
                 f"# keep: {self.keep_echo}",
                 f"{'component':<24}{'dense':>16}{'gated':>16}{'predictor':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<24}{r.dense:>16.0f}{r.gated:>16.0f}"
                         f"{r.predictor:>12.0f}")
        lines.append(f"{'total':<24}{self.total_dense:>16.0f}"
                     f"{self.total_gated:>16.0f}{self.total_predictor:>12.0f}")
        lines.append(f"total with predictors: {self.total:.0f} "
                     f"({self.total / 1e9:.3f} G)")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["component,dense,gated,predictor"]
        for r in self.rows:
            lines.append(f"{r.name},{r.dense!r},{r.gated!r},{r.predictor!r}")
        lines.append(f"total,{self.total_dense!r},{self.total_gated!r},"
                     f"{self.total_predictor!r}")
        return "\n".join(lines) + "\n"


def _layer_ids(cfg: MitConfig):
    for i, stage in enumerate(cfg.stages):
        for j in range(stage.depth):
            yield f"s{i}.l{j}", i, stage


def _resolve_keep(cfg: MitConfig, keep_profile):
    """(layer_id, kind) -> keep fraction; None profile means dense
    (no gates, no predictor overhead)."""
    pairs = [(lid, kind) for lid, _, _ in _layer_ids(cfg) for kind in GATE_KINDS]
    if keep_profile is None:
        return None
    if isinstance(keep_profile, (int, float)):
        keep_profile = {f"{lid}.{kind}": float(keep_profile)
                        for lid, kind in pairs}
    known = {f"{lid}.{kind}": (lid, kind) for lid, kind in pairs}
    resolved = {key: 1.0 for key in known.values()}
    for name, keep in keep_profile.items():
        if name not in known:
            raise UsageError(f"unknown gated pair {name!r} in keep profile")
        if not 0.0 < float(keep) <= 1.0:
            raise ContractError(
                f"keep fraction for {name} must be in (0, 1], got {keep}")
        resolved[known[name]] = float(keep)
    return resolved


def flops_report(cfg: MitConfig, keep_profile=None,
                 input_hw=None) -> FlopsReport:
    """Closed-form compute count from configuration shapes.

    keep_profile: None for the ungated dense model; a float applies one
    keep fraction to every gated pair; a dict maps "s{i}.l{j}.{kind}"
    names to fractions (unlisted pairs stay at 1.0). Gated pairs cost
    exactly keep * dense plus the gate predictor.
    """
    hw = tuple(input_hw) if input_hw is not None else cfg.input_hw
    grids = cfg.stage_hw(hw)
    keeps = _resolve_keep(cfg, keep_profile)
    rows = []
    prev_dims = [cfg.in_channels] + [s.dim for s in cfg.stages[:-1]]
    for i, stage in enumerate(cfg.stages):
        h, w = grids[i]
        n = h * w
        c = stage.dim
        merge = n * prev_dims[i] * stage.patch_kernel ** 2 * c + 8 * c * n
        rows.append(FlopsRow(f"s{i}.merge", merge, merge, 0.0))
        r = stage.sr_ratio
        n_red = (h // r) * (w // r)
        hid = c * cfg.ffn_expand
        for j in range(stage.depth):
            lid = f"s{i}.l{j}"
            k_qk = keeps[(lid, "qk")] if keeps is not None else None
            k_v = keeps[(lid, "v")] if keeps is not None else None
            k_ffn = keeps[(lid, "ffn")] if keeps is not None else None

            qk_dense = float(n * c * c + n_red * c * c)
            v_dense = float(n_red * c * c + n * c * c)
            ffn_dense = float(n * c * hid + 9 * n * hid + 8 * n * hid
                              + n * hid * c)
            rows.append(FlopsRow(
                f"{lid}.qk", qk_dense,
                qk_dense if k_qk is None else k_qk * qk_dense,
                0.0 if k_qk is None else float(gate_flops(n, c, c))))
            rows.append(FlopsRow(
                f"{lid}.v", v_dense,
                v_dense if k_v is None else k_v * v_dense,
                0.0 if k_v is None else float(gate_flops(n, c, c))))
            rows.append(FlopsRow(
                f"{lid}.ffn", ffn_dense,
                ffn_dense if k_ffn is None else k_ffn * ffn_dense,
                0.0 if k_ffn is None else float(gate_flops(n, c, hid))))

            scores = float(n * n_red * c)
            mix = float(n * n_red * c)
            softmax = float(6 * n * n_red + n * n_red)
            attn_dense = scores + mix + softmax
            attn_gated = ((scores if k_qk is None else k_qk * scores)
                          + (mix if k_v is None else k_v * mix) + softmax)
            rows.append(FlopsRow(f"{lid}.attn", attn_dense, attn_gated, 0.0))
            if r > 1:
                sr = float(n_red * c * r * r * c + 8 * c * n_red)
                rows.append(FlopsRow(f"{lid}.sr", sr, sr, 0.0))
            norms = float(2 * 8 * n * c + 2 * n * c)
            rows.append(FlopsRow(f"{lid}.norms", norms, norms, 0.0))
        stage_norm = float(8 * n * c)
        rows.append(FlopsRow(f"s{i}.norm", stage_norm, stage_norm, 0.0))

    d = cfg.decoder_dim
    h1, w1 = grids[0]
    n1 = h1 * w1
    proj = float(sum((gh * gw) * s.dim * d
                     for (gh, gw), s in zip(grids, cfg.stages)))
    rows.append(FlopsRow("decoder.proj", proj, proj, 0.0))
    upsample = float(8 * d * n1 * (len(cfg.stages) - 1))
    rows.append(FlopsRow("decoder.upsample", upsample, upsample, 0.0))
    if cfg.fusion == "concat":
        fuse = float(n1 * d * len(cfg.stages) * d)
    else:
        fuse = float((len(cfg.stages) - 1) * n1 * d + n1 * d * d)
    fuse += float(n1 * d)
    rows.append(FlopsRow("decoder.fuse", fuse, fuse, 0.0))
    head = float(n1 * d * cfg.num_classes)
    rows.append(FlopsRow("decoder.head", head, head, 0.0))

    keep_echo = ("dense" if keeps is None else
                 ",".join(f"{lid}.{kind}={keeps[(lid, kind)]:g}"
                          for lid, kind in sorted(keeps)))
    dims = "/".join(str(s.dim) for s in cfg.stages)
    config_echo = (f"dims {dims}, input {hw[0]}x{hw[1]}, decoder {d}, "
                   f"fusion {cfg.fusion}, classes {cfg.num_classes}")
    return FlopsReport(config_echo=config_echo, keep_echo=keep_echo, rows=rows)


# ---------------------------------------------------------------------------
# CSV exports

def neuron_stats_csv(stats: NeuronStats, taxonomy: Taxonomy = None) -> str:
    """One row per neuron, box-plot ready; appends the type column when
    a taxonomy is supplied."""
    head = "layer_id,signal,neuron,min,q1,median,q3,max"
    if taxonomy is not None:
        head += ",type"
    lines = [head]
    for i in range(stats.width):
        row = (f"{stats.layer_id},{stats.signal},{i},{float(stats.mn[i])!r},"
               f"{float(stats.q1[i])!r},{float(stats.median[i])!r},"
               f"{float(stats.q3[i])!r},{float(stats.mx[i])!r}")
        if taxonomy is not None:
            row += f",{taxonomy.types[i].value}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def gate_counts_csv(counts: dict) -> str:
    lines = ["layer_id,kind,neuron,active_count,instance_count"]
    for (layer_id, kind) in sorted(counts):
        gac = counts[(layer_id, kind)]
        for i, cnt in enumerate(gac.counts):
            lines.append(f"{layer_id},{kind},{i},{int(cnt)},"
                         f"{gac.instance_count}")
    return "\n".join(lines) + "\n"


def gate_log_csv(records, instance_offset: int = 0) -> str:
    """Per-instance gate logits, one row per (instance, layer, kind):
    instance id, layer id, kind, then the logit vector. Static masks
    log their binary vector with instance id -1."""
    lines = ["instance_id,layer_id,kind,logits..."]
    for layer_id, kind, gm in records:
        if gm.logits is None:
            vec = gm.mask.data
            vals = ",".join(repr(float(v)) for v in np.atleast_1d(vec))
            lines.append(f"-1,{layer_id},{kind},{vals}")
            continue
        for b in range(gm.logits.data.shape[0]):
            vals = ",".join(repr(float(v)) for v in gm.logits.data[b])
            lines.append(f"{instance_offset + b},{layer_id},{kind},{vals}")
    return "\n".join(lines) + "\n"
