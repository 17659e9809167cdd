"""Clock-driven simulation of converted networks.

The spiking network reuses the layer DAG of its source ANN (batch norm
already folded away): every ReLU site becomes an integrate-and-fire layer,
conv/FC/pool/add nodes act as synaptic current transforms, and the terminal
fully-connected layer accumulates current without firing. The analog input
image and all biases are injected as the same constant current at every
timestep.

Integrate-and-fire uses reset-by-subtraction by default (residual charge is
kept, which keeps the rate approximation tight); reset-to-zero and a
floor-at-zero membrane variant are available behind flags for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .graph import LayerKind, LayerNode, ModelGraph
from .ops import DTYPE

DEFAULT_THRESHOLD = 1.0
DEFAULT_T = 500


@dataclass
class IFNeuronLayer:
    """Membrane state of one integrate-and-fire layer (one per ReLU site)."""

    membrane: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    spiked: np.ndarray | None = None


def if_step(layer: IFNeuronLayer, input_current: np.ndarray,
            reset_mode: str = "subtract", membrane_floor: bool = False) -> np.ndarray:
    """One timestep: integrate the current, fire where the membrane crosses
    threshold, reset by subtraction (default) or to zero. Returns 0/1 spikes."""
    if layer.membrane.shape != input_current.shape:
        raise ShapeMismatchError(
            "membrane", layer.membrane.shape, input_current.shape, "if_step"
        )
    mem = layer.membrane
    mem += input_current
    spikes = (mem >= layer.threshold).astype(DTYPE)
    if reset_mode == "subtract":
        if layer.threshold == 1.0:
            mem -= spikes
        else:
            mem -= layer.threshold * spikes
    elif reset_mode == "zero":
        mem *= (1.0 - spikes)
    else:
        raise ValueError(f"unknown reset mode {reset_mode!r}")
    if membrane_floor:
        np.maximum(mem, 0.0, out=mem)
    layer.spiked = spikes
    return spikes


@dataclass
class SpikingNetwork:
    """Converted network: a BN-free layer DAG with normalised synapses.

    ReLU nodes of `graph` are interpreted as IF neuron layers; Add nodes
    carry the shortcut scale of their block; `meta` records conversion
    provenance (percentile, compensation factor, ablation flags, source
    digest).
    """

    graph: ModelGraph
    threshold: float = DEFAULT_THRESHOLD
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for node in self.graph.nodes.values():
            if node.kind == LayerKind.BATCHNORM:
                raise ValueError("spiking network must not contain batch-norm nodes")

    @property
    def if_layer_ids(self) -> list[int]:
        """IF sites in topological (depth) order."""
        return self.graph.relu_ids()

    def scaled(self, factor: float) -> "SpikingNetwork":
        """Copy with every synaptic weight, bias, and shortcut scale
        multiplied by `factor` (error compensation)."""
        g = self.graph.copy()
        for node in g.nodes.values():
            if node.kind in (LayerKind.CONV, LayerKind.FULLY_CONNECTED):
                node.params["weight"] = (node.params["weight"] * factor).astype(DTYPE)
                if node.params.get("bias") is not None:
                    node.params["bias"] = (node.params["bias"] * factor).astype(DTYPE)
            elif node.kind == LayerKind.ADD:
                node.attrs["shortcut_scale"] = float(node.attrs.get("shortcut_scale", 1.0)) * factor
        meta = dict(self.meta)
        meta["compensation_factor"] = float(meta.get("compensation_factor", 1.0)) * factor
        return SpikingNetwork(graph=g, threshold=self.threshold, meta=meta)


def encode_input(image: np.ndarray, first_layer: LayerNode) -> np.ndarray:
    """Constant per-timestep current injected by the first weight layer:
    the analog image pushed through its synapses, plus its bias."""
    from . import ops

    if first_layer.kind == LayerKind.CONV:
        return ops.conv2d(
            image, first_layer.params["weight"], first_layer.params.get("bias"),
            stride=int(first_layer.attrs.get("stride", 1)),
            padding=int(first_layer.attrs.get("padding", 0)),
        )
    if first_layer.kind == LayerKind.FULLY_CONNECTED:
        return ops.fully_connected(image, first_layer.params["weight"],
                                   first_layer.params.get("bias"))
    raise ValueError(f"first layer must be conv or fully-connected, got {first_layer.kind}")


@dataclass
class RunReport:
    """Outcome of simulating a labelled set for T timesteps."""

    accuracy: float
    predictions: np.ndarray
    layer_max_rates: dict
    convergence: list
    total_spikes: int
    timesteps: int
    samples: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "timesteps": self.timesteps,
            "samples": self.samples,
            "total_spikes": self.total_spikes,
            "layer_max_rates": {str(k): v for k, v in self.layer_max_rates.items()},
            "convergence": self.convergence,
            "predictions": self.predictions.tolist(),
        }


class _ConvPlan:
    """Preallocated float32 im2col + gemm for one conv node.

    The timestep loop calls this hundreds of times on identically shaped
    spike tensors, so padding buffers, patch columns, and the output are
    allocated once and reused.
    """

    def __init__(self, node: LayerNode, n: int, in_shape):
        from .ops import conv_output_hw

        c, h, w = in_shape
        weight = node.params["weight"]
        oc, ic, kh, kw = weight.shape
        s = int(node.attrs.get("stride", 1))
        p = int(node.attrs.get("padding", 0))
        oh, ow = conv_output_hw(h, w, kh, kw, s, p)
        self.h, self.w, self.p = h, w, p
        self.out_shape = (n, oc, oh, ow)
        self.wmat = np.ascontiguousarray(weight.reshape(oc, -1), dtype=DTYPE)[None]
        bias = node.params.get("bias")
        self.bias = None if bias is None else np.asarray(bias, dtype=DTYPE).reshape(1, oc, 1)
        self.padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        windows = np.lib.stride_tricks.sliding_window_view(
            self.padded, (kh, kw), axis=(2, 3), writeable=False
        )[:, :, ::s, ::s]
        self.windows = windows.transpose(0, 1, 4, 5, 2, 3)  # (n, c, kh, kw, oh, ow)
        self.cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
        self.cols_mat = self.cols.reshape(n, c * kh * kw, oh * ow)
        self.out = np.empty((n, oc, oh * ow), dtype=DTYPE)

    def run(self, x: np.ndarray) -> np.ndarray:
        if self.p:
            self.padded[:, :, self.p:self.p + self.h, self.p:self.p + self.w] = x
        else:
            self.padded[:] = x
        np.copyto(self.cols, self.windows)
        np.matmul(self.wmat, self.cols_mat, out=self.out)
        if self.bias is not None:
            self.out += self.bias
        return self.out.reshape(self.out_shape)


class _Engine:
    """Per-batch simulation state over a compiled node order."""

    def __init__(self, snn: SpikingNetwork, images: np.ndarray,
                 reset_mode: str = "subtract", membrane_floor: bool = False):
        self.snn = snn
        self.g = snn.graph
        self.order = self.g.topo_order()
        self.reset_mode = reset_mode
        self.membrane_floor = membrane_floor
        self.images = np.asarray(images, dtype=DTYPE)
        if self.images.ndim == 3:
            self.images = self.images[None]
        self.n = self.images.shape[0]
        # nodes fed only by constants produce the same current every step
        self.const: dict[int, bool] = {}
        for nid in self.order:
            node = self.g.nodes[nid]
            if node.kind == LayerKind.INPUT:
                self.const[nid] = True
            elif node.kind == LayerKind.RELU:
                self.const[nid] = False
            else:
                self.const[nid] = all(self.const[i] for i in node.inputs)
        self.const_values: dict[int, np.ndarray] = {}
        self.conv_plans: dict[int, _ConvPlan] = {}
        self.layers: dict[int, IFNeuronLayer] = {}
        self.spike_counts: dict[int, np.ndarray] = {}
        self.accumulator: np.ndarray | None = None
        self.step_index = 0

    def _transform(self, nid: int, node: LayerNode, x: np.ndarray) -> np.ndarray:
        if node.kind == LayerKind.CONV and not self.const[nid]:
            plan = self.conv_plans.get(nid)
            if plan is None:
                plan = self.conv_plans[nid] = _ConvPlan(node, x.shape[0], x.shape[1:])
            return plan.run(x)
        return self.g._node_forward(node, x)

    def step(self, raster: list | None = None) -> None:
        self.step_index += 1
        values: dict[int, np.ndarray] = {}
        for nid in self.order:
            node = self.g.nodes[nid]
            if self.const[nid] and nid in self.const_values:
                values[nid] = self.const_values[nid]
                continue
            if node.kind == LayerKind.INPUT:
                out = self.images
            elif node.kind == LayerKind.RELU:
                current = values[node.inputs[0]]
                layer = self.layers.get(nid)
                if layer is None:
                    layer = IFNeuronLayer(
                        membrane=np.zeros(current.shape, dtype=DTYPE),
                        threshold=self.snn.threshold,
                    )
                    self.layers[nid] = layer
                    # counts stay exact in float32 up to 2^24 steps
                    self.spike_counts[nid] = np.zeros(current.shape, dtype=DTYPE)
                out = if_step(layer, current, self.reset_mode, self.membrane_floor)
                self.spike_counts[nid] += out
                if raster is not None:
                    for idx in np.flatnonzero(out[0]):
                        raster.append((self.step_index, nid, int(idx)))
            elif node.kind == LayerKind.ADD:
                a, b = (values[i] for i in node.inputs)
                scale = float(node.attrs.get("shortcut_scale", 1.0))
                out = a + b if scale == 1.0 else a + (scale * b).astype(DTYPE)
            else:
                out = self._transform(nid, node, values[node.inputs[0]])
            values[nid] = out
            if self.const[nid]:
                self.const_values[nid] = out
        final = values[self.g.output_id].reshape(self.n, -1)
        if self.accumulator is None:
            self.accumulator = np.zeros(final.shape, dtype=np.float64)
        self.accumulator += final

    def rates(self) -> dict[int, np.ndarray]:
        return {nid: counts / self.step_index for nid, counts in self.spike_counts.items()}

    def predictions(self) -> np.ndarray:
        return self.accumulator.argmax(axis=1)


def simulate(snn: SpikingNetwork, image: np.ndarray, T: int = DEFAULT_T,
             reset_mode: str = "subtract", membrane_floor: bool = False,
             collect_raster: bool = False):
    """Simulate one sample for T steps.

    Returns (per-IF-layer spike counts, output accumulator, predicted class)
    and, when `collect_raster` is set, a fourth element listing
    (timestep, layer_id, neuron_index) spike events.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    eng = _Engine(snn, image, reset_mode, membrane_floor)
    raster: list | None = [] if collect_raster else None
    for _ in range(T):
        eng.step(raster)
    counts = {nid: c[0] for nid, c in eng.spike_counts.items()}
    accumulator = eng.accumulator[0]
    predicted = int(accumulator.argmax())
    if collect_raster:
        return counts, accumulator, predicted, raster
    return counts, accumulator, predicted


def evaluate(snn: SpikingNetwork, dataset, T: int = DEFAULT_T, batch_size: int = 256,
             reset_mode: str = "subtract", membrane_floor: bool = False) -> RunReport:
    """Simulate a labelled dataset; deterministic for fixed inputs.

    The convergence curve holds accuracy-if-stopped-at-t for every t <= T.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    images, labels = dataset.images, dataset.labels
    n = images.shape[0]
    max_rates: dict[int, float] = {}
    correct_at_t = np.zeros(T, dtype=np.int64)
    total_spikes = 0.0
    predictions = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        eng = _Engine(snn, xb, reset_mode, membrane_floor)
        for t in range(T):
            eng.step()
            correct_at_t[t] += int((eng.predictions() == yb).sum())
        predictions[start:start + xb.shape[0]] = eng.predictions()
        for nid, counts in eng.spike_counts.items():
            rate = float(counts.max() / T)
            max_rates[nid] = max(max_rates.get(nid, 0.0), rate)
            total_spikes += float(counts.sum())
    ordered = {nid: max_rates[nid] for nid in snn.if_layer_ids}
    return RunReport(
        accuracy=float(correct_at_t[-1] / n),
        predictions=predictions,
        layer_max_rates=ordered,
        convergence=(correct_at_t / n).tolist(),
        total_spikes=int(round(total_spikes)),
        timesteps=T,
        samples=n,
    )


def rate_profile(snn: SpikingNetwork, images: np.ndarray, T: int = DEFAULT_T,
                 batch_size: int = 256, reset_mode: str = "subtract",
                 membrane_floor: bool = False) -> list[tuple[int, float]]:
    """Per-IF-layer max firing rate (over neurons and samples), ordered by
    topological depth."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim == 3:
        images = images[None]
    max_rates: dict[int, float] = {}
    for start in range(0, images.shape[0], batch_size):
        eng = _Engine(snn, images[start:start + batch_size], reset_mode, membrane_floor)
        for _ in range(T):
            eng.step()
        for nid, counts in eng.spike_counts.items():
            rate = float(counts.max() / T)
            max_rates[nid] = max(max_rates.get(nid, 0.0), rate)
    return [(nid, max_rates[nid]) for nid in snn.if_layer_ids]
