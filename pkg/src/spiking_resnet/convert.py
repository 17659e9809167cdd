"""ANN-to-SNN conversion pipeline.

Stages, in order: fold batch norm into the preceding convolutions, collect
per-ReLU-site activation scales (a high-percentile statistic over a
calibration set), jointly normalise weights and shortcut branches so every
site's activations map into [0, 1], build the spiking network, and optionally
search a global error-compensation factor that slightly enlarges all synapses.

Scale bookkeeping: each weight layer is rescaled by (scale of its upstream
activation site) / (scale of its downstream site). The network input counts
as a site of scale 1 (the analog image is injected unscaled), and so does the
terminal layer (the output accumulator never fires, so the logits are kept
exact). A residual block's shortcut branch is rescaled by
entry-site scale / exit-site scale, which makes the normalised block output
equal the original output divided by the exit scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import simulate as sim
from .errors import ShapeMismatchError, SilentLayerError, SpikingResnetError
from .graph import ActivationRecord, LayerKind, ModelGraph
from .ops import DTYPE, BatchNormParams
from .simulate import SpikingNetwork

SCALE_FLOOR = 1e-6


class ConversionError(SpikingResnetError):
    """A conversion stage failed; `stage` names it."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"conversion stage '{stage}' failed: {cause}")


@dataclass
class ActivationScales:
    """Per-ReLU-site scale: the `percentile` activation statistic observed
    over `sample_count` calibration samples."""

    scales: dict
    percentile: float
    sample_count: int

    def __post_init__(self):
        if any(v <= 0 for v in self.scales.values()):
            raise ValueError("activation scales must be positive")

    def __getitem__(self, relu_id: int) -> float:
        return self.scales[relu_id]


@dataclass
class ConversionReport:
    percentile: float
    calibration_samples: int
    shortcut_norm: bool
    folded_bn: list = field(default_factory=list)
    layer_norms: dict = field(default_factory=dict)
    shortcut_scales: dict = field(default_factory=dict)
    compensation: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "percentile": self.percentile,
            "calibration_samples": self.calibration_samples,
            "shortcut_norm": self.shortcut_norm,
            "folded_bn": self.folded_bn,
            "layer_norms": {str(k): v for k, v in self.layer_norms.items()},
            "shortcut_scales": {str(k): v for k, v in self.shortcut_scales.items()},
            "compensation": self.compensation,
        }


# -- stage 1: batch-norm folding ----------------------------------------------


def fold_batchnorm(weights: np.ndarray, bias: np.ndarray, p: BatchNormParams):
    """Absorb a batch-norm layer into the preceding convolution.

    Returns (W~, b~) with W~ = g*W/sqrt(var+eps) and
    b~ = g*(b - mean)/sqrt(var+eps) + beta, per output channel.
    """
    out_c = weights.shape[0]
    if p.channels != out_c:
        raise ShapeMismatchError("channels", out_c, p.channels, "fold_batchnorm")
    scale = p.gamma.astype(np.float64) / np.sqrt(p.var.astype(np.float64) + p.epsilon)
    w_shape = (out_c,) + (1,) * (weights.ndim - 1)
    folded_w = (weights.astype(np.float64) * scale.reshape(w_shape)).astype(DTYPE)
    b = np.zeros(out_c, dtype=np.float64) if bias is None else bias.astype(np.float64)
    folded_b = (scale * (b - p.mean.astype(np.float64)) + p.beta.astype(np.float64)).astype(DTYPE)
    return folded_w, folded_b


def fold_graph(g: ModelGraph) -> tuple[ModelGraph, list[int]]:
    """Fold every batch-norm node into the conv that feeds it; node ids of
    the surviving layers are unchanged. Returns (folded graph, folded ids)."""
    g = g.copy()
    folded: list[int] = []
    bn_ids = [i for i, n in g.nodes.items() if n.kind == LayerKind.BATCHNORM]
    for bn_id in bn_ids:
        bn = g.nodes[bn_id]
        src_id = bn.inputs[0]
        src = g.nodes[src_id]
        if src.kind != LayerKind.CONV:
            raise ValueError(f"batch-norm node {bn_id} does not follow a conv")
        if len(g.consumers_of(src_id)) != 1:
            raise ValueError(f"conv {src_id} feeds more than its batch norm")
        w, b = fold_batchnorm(src.params["weight"], src.params.get("bias"),
                              ModelGraph.bn_params(bn))
        src.params["weight"], src.params["bias"] = w, b
        for consumer in g.consumers_of(bn_id):
            node = g.nodes[consumer]
            node.inputs = [src_id if i == bn_id else i for i in node.inputs]
        del g.nodes[bn_id]
        folded.append(bn_id)
    return ModelGraph(g.nodes, meta=g.meta, blocks=g.blocks), folded


# -- stage 2: activation scales -----------------------------------------------


def collect_scales(g: ModelGraph, calibration_images: np.ndarray, p: float = 0.999,
                   batch_size: int = 256) -> ActivationScales:
    """Percentile of post-ReLU activations at every site, floored at a tiny
    epsilon so silent layers cannot divide anything by zero."""
    images = getattr(calibration_images, "images", calibration_images)
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise ValueError("calibration set is empty")
    record = ActivationRecord(p=p)
    for start in range(0, images.shape[0], batch_size):
        g.forward(images[start:start + batch_size], record=record)
    scales = {
        rid: max(rec.percentile(), SCALE_FLOOR)
        for rid, rec in record.recorders.items()
    }
    missing = set(g.relu_ids()) - set(scales)
    if missing:
        raise ValueError(f"no activations recorded for ReLU nodes {sorted(missing)}")
    return ActivationScales(scales=scales, percentile=p, sample_count=record.samples)


# -- stage 3: joint normalisation ----------------------------------------------


def normalize_weights(weights: np.ndarray, bias: np.ndarray | None,
                      scale_prev: float, scale_cur: float):
    """W -> (scale_prev/scale_cur) * W, b -> b / scale_cur."""
    if scale_prev <= 0 or scale_cur <= 0:
        raise ValueError(
            f"activation scales must be positive, got ({scale_prev}, {scale_cur})"
        )
    w = (weights.astype(np.float64) * (scale_prev / scale_cur)).astype(DTYPE)
    b = None if bias is None else (bias.astype(np.float64) / scale_cur).astype(DTYPE)
    return w, b


def shortcut_scale(scale_in: float, scale_out: float) -> float:
    """Factor for a residual block's skip branch: entry scale / exit scale."""
    if scale_in <= 0 or scale_out <= 0:
        raise ValueError(
            f"activation scales must be positive, got ({scale_in}, {scale_out})"
        )
    return scale_in / scale_out


def _site_scale(g: ModelGraph, scales: ActivationScales, nid: int) -> float:
    node = g.nodes[nid]
    if node.kind == LayerKind.INPUT:
        return 1.0
    if node.kind == LayerKind.RELU:
        return scales[nid]
    raise ValueError(f"node {nid} ({node.kind.value}) is not an activation site")


def _upstream_scale(g: ModelGraph, scales: ActivationScales, nid: int) -> float:
    cur = g.nodes[nid].inputs[0]
    while g.nodes[cur].kind == LayerKind.GLOBAL_AVG_POOL:
        cur = g.nodes[cur].inputs[0]
    return _site_scale(g, scales, cur)


def _downstream_scale(g: ModelGraph, scales: ActivationScales, nid: int) -> float:
    consumers = g.consumers_of(nid)
    if not consumers:
        return 1.0  # terminal accumulator: keep logits exact
    if len(consumers) > 1:
        raise ValueError(f"weight layer {nid} feeds {len(consumers)} nodes")
    cur = consumers[0]
    while g.nodes[cur].kind == LayerKind.ADD:
        nxt = g.consumers_of(cur)
        if len(nxt) != 1:
            raise ValueError(f"add node {cur} must feed exactly one node")
        cur = nxt[0]
    if g.nodes[cur].kind == LayerKind.RELU:
        return scales[cur]
    raise ValueError(f"no activation site downstream of weight layer {nid}")


def normalize_graph(g: ModelGraph, scales: ActivationScales,
                    shortcut_norm: bool = True) -> tuple[ModelGraph, ConversionReport]:
    """Rescale every weight layer and every shortcut branch.

    With `shortcut_norm` off (the ablation mode), shortcut branches keep
    their raw mapping: bare skips stay at factor 1 and shortcut convs keep
    their folded weights.
    """
    g = g.copy()
    report = ConversionReport(
        percentile=scales.percentile,
        calibration_samples=scales.sample_count,
        shortcut_norm=shortcut_norm,
    )

    def tensor_stats(w):
        return {"max_abs": float(np.abs(w).max()), "l2": float(np.linalg.norm(w))}

    for nid, node in g.nodes.items():
        if node.kind not in (LayerKind.CONV, LayerKind.FULLY_CONNECTED):
            continue
        s_prev = _upstream_scale(g, scales, nid)
        s_cur = _downstream_scale(g, scales, nid)
        entry = {"pre": tensor_stats(node.params["weight"]),
                 "scale_prev": s_prev, "scale_cur": s_cur, "role": node.role}
        if node.role == "shortcut" and not shortcut_norm:
            entry["post"] = entry["pre"]
            entry["normalised"] = False
        else:
            w, b = normalize_weights(node.params["weight"], node.params.get("bias"),
                                     s_prev, s_cur)
            node.params["weight"] = w
            if b is not None:
                node.params["bias"] = b
            entry["post"] = tensor_stats(w)
            entry["normalised"] = True
        report.layer_norms[nid] = entry

    for i, block in enumerate(g.blocks):
        s_in = scales[block.entry_relu]
        s_out = scales[block.exit_relu]
        factor = shortcut_scale(s_in, s_out)
        report.shortcut_scales[i] = factor
        if block.shortcut is None:
            add_node = g.nodes[block.add]
            add_node.attrs["shortcut_scale"] = factor if shortcut_norm else 1.0
    return g, report


# -- stage 5: error compensation -----------------------------------------------


def apply_compensation(snn: SpikingNetwork, factor: float) -> SpikingNetwork:
    """Multiply every synaptic weight, bias, and shortcut scale by `factor`
    (>= 1); the input network is left unmodified."""
    if factor < 1.0:
        raise ValueError(f"compensation factor must be >= 1, got {factor}")
    return snn.scaled(factor)


def tau_max(snn: SpikingNetwork, calibration_images, T: int = sim.DEFAULT_T,
            batch_size: int = 256) -> float:
    """Reciprocal of the deepest IF layer's max firing rate over the set."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    images = getattr(calibration_images, "images", calibration_images)
    profile = sim.rate_profile(snn, images, T=T, batch_size=batch_size)
    last_id, last_rate = profile[-1]
    if last_rate <= 0.0:
        raise SilentLayerError(
            f"deepest IF layer {last_id} never fired over {T} steps; "
            "increase T or enlarge the calibration set"
        )
    return 1.0 / last_rate


def search_compensation(snn: SpikingNetwork, validation_set, T: int = sim.DEFAULT_T,
                        grid_size: int = 8, tau: float | None = None,
                        batch_size: int = 256):
    """Grid-search the compensation factor on held-out labelled data.

    Evaluates `grid_size` equally spaced factors strictly inside
    (1, tau_max); the uncompensated network is also measured as a baseline
    guard and wins only when strictly better than every grid point. Ties
    prefer the smaller factor. Returns (best_factor, trace)."""
    if grid_size < 1:
        raise ValueError(f"grid_size must be >= 1, got {grid_size}")
    if tau is None:
        tau = tau_max(snn, validation_set, T=T, batch_size=batch_size)
    if tau <= 1.0:
        trace = [{
            "factor": 1.0, "accuracy": None, "baseline": True,
            "warning": f"tau_max={tau:.6g} <= 1: search region empty, compensation skipped",
        }]
        return 1.0, trace

    def accuracy_at(factor: float) -> float:
        net = snn if factor == 1.0 else snn.scaled(factor)
        return sim.evaluate(net, validation_set, T=T, batch_size=batch_size).accuracy

    trace = []
    baseline_acc = accuracy_at(1.0)
    trace.append({"factor": 1.0, "accuracy": baseline_acc, "baseline": True})
    best_factor, best_acc = None, -1.0
    for k in range(1, grid_size + 1):
        factor = 1.0 + (tau - 1.0) * k / (grid_size + 1)
        acc = accuracy_at(factor)
        trace.append({"factor": factor, "accuracy": acc, "baseline": False})
        if acc > best_acc:
            best_factor, best_acc = factor, acc
    if baseline_acc > best_acc:
        return 1.0, trace
    return best_factor, trace


# -- full pipeline --------------------------------------------------------------


@dataclass
class ConvertOptions:
    percentile: float = 0.999
    shortcut_norm: bool = True
    compensate: bool = False
    timesteps: int = sim.DEFAULT_T
    grid_size: int = 8
    batch_size: int = 256


def convert(ann: ModelGraph, calibration_set, options: ConvertOptions | None = None,
            validation_set=None) -> tuple[SpikingNetwork, ConversionReport]:
    """Run the full pipeline: fold BN, collect scales, normalise, build the
    SNN, and (optionally) search and apply the compensation factor.

    `calibration_set` provides unlabelled images for the activation scales;
    `validation_set` must be a labelled dataset when `compensate` is set.
    """
    opts = options or ConvertOptions()

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SpikingResnetError:
            raise
        except Exception as e:
            raise ConversionError(name, e) from e

    folded, folded_ids = stage("fold_batchnorm", fold_graph, ann)
    scales = stage("collect_scales", collect_scales, folded,
                   calibration_set, opts.percentile, opts.batch_size)
    normalized, report = stage("normalize", normalize_graph, folded, scales,
                               opts.shortcut_norm)
    report.folded_bn = folded_ids

    snn = SpikingNetwork(
        graph=normalized,
        meta={
            "percentile": opts.percentile,
            "shortcut_norm": opts.shortcut_norm,
            "compensation_factor": 1.0,
            "source_arch": ann.meta.get("arch"),
            "source_depth": ann.meta.get("depth"),
        },
    )

    report.compensation = {"enabled": opts.compensate, "factor": 1.0, "trace": [],
                           "tau_max": None}
    if opts.compensate:
        if validation_set is None:
            raise ConversionError(
                "search_compensation",
                ValueError("compensation requires a labelled validation set"),
            )
        try:
            tau = tau_max(snn, calibration_set, T=opts.timesteps,
                          batch_size=opts.batch_size)
        except SilentLayerError:
            raise
        factor, trace = stage(
            "search_compensation", search_compensation, snn, validation_set,
            opts.timesteps, opts.grid_size, tau, opts.batch_size,
        )
        report.compensation.update({"tau_max": tau, "factor": factor, "trace": trace})
        if factor > 1.0:
            snn = stage("apply_compensation", apply_compensation, snn, factor)
    return snn, report
