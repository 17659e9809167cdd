"""Layer DAG for residual CNNs: construction, forward evaluation, and
activation recording.

Graphs are immutable after construction. Node ids are assigned in
construction order, and evaluation order is the deterministic topological
order that breaks ties by node id, so two forward passes on identical input
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ops
from .errors import ShapeMismatchError, UnsupportedDepthError
from .ops import DTYPE, BatchNormParams, TailRecorder


class LayerKind(str, Enum):
    INPUT = "input"
    CONV = "conv"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    ADD = "add"
    GLOBAL_AVG_POOL = "global_avg_pool"
    FULLY_CONNECTED = "fully_connected"


@dataclass
class LayerNode:
    """One layer in the DAG.

    `params` maps parameter names to float32 arrays; `attrs` holds
    JSON-serialisable scalars (stride, padding, role, trainable, ...).
    Add nodes take exactly two inputs, (main path, shortcut); every other
    kind takes at most one.
    """

    id: int
    kind: LayerKind
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)

    @property
    def role(self) -> str:
        return self.attrs.get("role", "main")

    @property
    def trainable(self) -> bool:
        return bool(self.attrs.get("trainable", True))


@dataclass
class ResidualBlockSpec:
    """Node ids of one basic residual block.

    `shortcut` is None for a bare identity skip, otherwise the id of the
    conv node on the shortcut branch. `entry_relu` is the block's input
    activation site; `exit_relu` consumes the Add of the conv branch and
    the shortcut branch.
    """

    conv1: int
    bn1: int
    conv2: int
    bn2: int
    add: int
    entry_relu: int
    mid_relu: int
    exit_relu: int
    shortcut: int | None = None


class ActivationRecord:
    """Per-ReLU-site aggregation of observed post-activation values."""

    def __init__(self, p: float = 1.0, retain_limit: int = 10_000_000):
        self.p = p
        self.retain_limit = retain_limit
        self.recorders: dict[int, TailRecorder] = {}
        self.samples = 0

    def add(self, relu_id: int, values: np.ndarray) -> None:
        rec = self.recorders.get(relu_id)
        if rec is None:
            rec = self.recorders[relu_id] = TailRecorder(self.p, self.retain_limit)
        rec.add(values)

    def merge(self, other: "ActivationRecord") -> None:
        """Commutative combine of two records built over disjoint samples."""
        self.samples += other.samples
        for rid, rec in other.recorders.items():
            mine = self.recorders.get(rid)
            if mine is None:
                self.recorders[rid] = rec
                continue
            mine._chunks.extend(rec._chunks)
            mine._stored += rec._stored
            mine._total += rec._total
            mine._discarded += rec._discarded
            mine._cutoff = max(mine._cutoff, rec._cutoff)


class ModelGraph:
    """DAG of layers with a single input and a single terminal node."""

    def __init__(self, nodes: dict[int, LayerNode], meta: dict | None = None,
                 blocks: list[ResidualBlockSpec] | None = None):
        self.nodes = dict(sorted(nodes.items()))
        self.meta = dict(meta or {})
        self.blocks = list(blocks or [])
        self._validate()

    def _validate(self) -> None:
        inputs = [n for n in self.nodes.values() if n.kind == LayerKind.INPUT]
        if len(inputs) != 1:
            raise ValueError(f"graph must have exactly one input node, found {len(inputs)}")
        self.input_id = inputs[0].id
        consumed: dict[int, int] = {i: 0 for i in self.nodes}
        for node in self.nodes.values():
            expected = 2 if node.kind == LayerKind.ADD else (0 if node.kind == LayerKind.INPUT else 1)
            if len(node.inputs) != expected:
                raise ValueError(
                    f"node {node.id} ({node.kind.value}) must have {expected} inputs, "
                    f"has {len(node.inputs)}"
                )
            for src in node.inputs:
                if src not in self.nodes:
                    raise ValueError(f"node {node.id} references unknown input {src}")
                consumed[src] += 1
        terminals = [i for i, c in consumed.items() if c == 0]
        if len(terminals) != 1:
            raise ValueError(f"graph must have exactly one terminal node, found {terminals}")
        self.output_id = terminals[0]
        if len(self.topo_order()) != len(self.nodes):
            raise ValueError("graph contains a cycle")

    def topo_order(self) -> list[int]:
        """Topological order, ties broken by ascending node id."""
        pending = {i: len(n.inputs) for i, n in self.nodes.items()}
        consumers: dict[int, list[int]] = {i: [] for i in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                consumers[src].append(node.id)
        ready = sorted(i for i, c in pending.items() if c == 0)
        order: list[int] = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for dep in consumers[nid]:
                pending[dep] -= 1
                if pending[dep] == 0:
                    # insert keeping `ready` sorted
                    lo, hi = 0, len(ready)
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if ready[mid] < dep:
                            lo = mid + 1
                        else:
                            hi = mid
                    ready.insert(lo, dep)
        return order

    def relu_ids(self) -> list[int]:
        """ReLU node ids in topological (depth) order."""
        return [i for i in self.topo_order() if self.nodes[i].kind == LayerKind.RELU]

    def weight_layer_count(self) -> int:
        """Main-path conv + fully-connected layers; shortcut convs excluded."""
        return sum(
            1
            for n in self.nodes.values()
            if n.kind in (LayerKind.CONV, LayerKind.FULLY_CONNECTED) and n.role == "main"
        )

    def consumers_of(self, node_id: int) -> list[int]:
        return [n.id for n in self.nodes.values() if node_id in n.inputs]

    def copy(self) -> "ModelGraph":
        nodes = {
            i: LayerNode(
                id=n.id,
                kind=n.kind,
                params={k: v.copy() for k, v in n.params.items()},
                attrs=dict(n.attrs),
                inputs=list(n.inputs),
            )
            for i, n in self.nodes.items()
        }
        import copy as _copy

        return ModelGraph(nodes, meta=dict(self.meta), blocks=_copy.deepcopy(self.blocks))

    # -- forward -----------------------------------------------------------

    def _node_forward(self, node: LayerNode, x: np.ndarray) -> np.ndarray:
        if node.kind == LayerKind.CONV:
            return ops.conv2d(
                x,
                node.params["weight"],
                node.params.get("bias"),
                stride=int(node.attrs.get("stride", 1)),
                padding=int(node.attrs.get("padding", 0)),
            )
        if node.kind == LayerKind.BATCHNORM:
            return ops.batchnorm_forward(x, self.bn_params(node))
        if node.kind == LayerKind.RELU:
            return ops.relu(x)
        if node.kind == LayerKind.GLOBAL_AVG_POOL:
            return ops.global_avg_pool(x)
        if node.kind == LayerKind.FULLY_CONNECTED:
            return ops.fully_connected(x, node.params["weight"], node.params.get("bias"))
        raise ValueError(f"cannot evaluate node kind {node.kind}")

    @staticmethod
    def bn_params(node: LayerNode) -> BatchNormParams:
        return BatchNormParams(
            gamma=node.params["gamma"],
            beta=node.params["beta"],
            mean=node.params["mean"],
            var=node.params["var"],
            epsilon=float(node.attrs.get("epsilon", 1e-5)),
        )

    def forward(self, x: np.ndarray, record: ActivationRecord | None = None) -> np.ndarray:
        """Run the graph on one sample (C,H,W) or a batch (N,C,H,W).

        Batch norm uses the stored (running) statistics. When `record` is
        given, every ReLU node's outputs are appended to it.
        """
        x = np.asarray(x, dtype=DTYPE)
        batched = x.ndim == 4
        expected = tuple(self.meta.get("input_shape", x.shape[-3:]))
        if tuple(x.shape[-3:]) != expected:
            raise ShapeMismatchError("input_shape", expected, tuple(x.shape[-3:]), "forward")
        values: dict[int, np.ndarray] = {}
        for nid in self.topo_order():
            node = self.nodes[nid]
            if node.kind == LayerKind.INPUT:
                values[nid] = x
            elif node.kind == LayerKind.ADD:
                a, b = (values[i] for i in node.inputs)
                scale = float(node.attrs.get("shortcut_scale", 1.0))
                values[nid] = a + b if scale == 1.0 else a + (scale * b).astype(DTYPE)
            else:
                values[nid] = self._node_forward(node, values[node.inputs[0]])
            if node.kind == LayerKind.RELU and record is not None:
                record.add(nid, values[nid])
        if record is not None:
            record.samples += x.shape[0] if batched else 1
        return values[self.output_id]


# -- constructors ------------------------------------------------------------


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k)).astype(DTYPE)


def _identity_shortcut_weights(out_c: int, in_c: int) -> np.ndarray:
    """Frozen 1x1 kernel: channel i -> i, extra output channels stay zero."""
    w = np.zeros((out_c, in_c, 1, 1), dtype=DTYPE)
    for i in range(min(in_c, out_c)):
        w[i, i, 0, 0] = 1.0
    return w


class _GraphBuilder:
    def __init__(self, input_shape):
        self.nodes: dict[int, LayerNode] = {}
        self._next = 0
        self.input_id = self.add(LayerKind.INPUT, attrs={"shape": list(input_shape)})

    def add(self, kind: LayerKind, params=None, attrs=None, inputs=()) -> int:
        nid = self._next
        self._next += 1
        self.nodes[nid] = LayerNode(
            id=nid, kind=kind, params=dict(params or {}), attrs=dict(attrs or {}),
            inputs=list(inputs),
        )
        return nid

    def conv(self, src: int, rng, in_c: int, out_c: int, k: int, stride: int, padding: int,
             role: str = "main") -> int:
        return self.add(
            LayerKind.CONV,
            params={"weight": _he_conv(rng, out_c, in_c, k), "bias": np.zeros(out_c, dtype=DTYPE)},
            attrs={"stride": stride, "padding": padding, "role": role},
            inputs=[src],
        )

    def bn(self, src: int, channels: int) -> int:
        return self.add(
            LayerKind.BATCHNORM,
            params={
                "gamma": np.ones(channels, dtype=DTYPE),
                "beta": np.zeros(channels, dtype=DTYPE),
                "mean": np.zeros(channels, dtype=DTYPE),
                "var": np.ones(channels, dtype=DTYPE),
            },
            attrs={"epsilon": 1e-5},
            inputs=[src],
        )


def _check_depth(depth: int) -> int:
    n, rem = divmod(depth - 2, 6)
    if rem != 0 or n < 1:
        raise UnsupportedDepthError(
            f"depth must be 6n+2 for integer n >= 1 (8, 14, 20, ...), got {depth}"
        )
    return n


def build_resnet(
    depth: int,
    stage_widths: tuple[int, int, int] = (16, 32, 64),
    num_classes: int = 10,
    projection_shortcuts: bool = False,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
) -> ModelGraph:
    """Standard 3-stage residual CNN of depth 6n+2.

    Each stage holds n basic blocks (two 3x3 convs plus a shortcut); stage
    transitions stride by 2 and change width. Downsampling shortcuts are
    frozen subsample-and-zero-pad 1x1 convs by default, or trainable 1x1
    projection convs when `projection_shortcuts` is set. The reported depth
    counts main-path weight layers only (stem conv, block convs, final FC).
    """
    n = _check_depth(depth)
    if len(stage_widths) != 3:
        raise ValueError(f"expected 3 stage widths, got {stage_widths}")
    rng = np.random.default_rng(seed)
    b = _GraphBuilder(input_shape)
    in_c = input_shape[0]

    stem_conv = b.conv(b.input_id, rng, in_c, stage_widths[0], k=3, stride=1, padding=1)
    stem_bn = b.bn(stem_conv, stage_widths[0])
    cur_relu = b.add(LayerKind.RELU, inputs=[stem_bn])
    cur_c = stage_widths[0]

    blocks: list[ResidualBlockSpec] = []
    for stage, width in enumerate(stage_widths):
        for block in range(n):
            stride = 2 if (stage > 0 and block == 0) else 1
            entry_relu = cur_relu
            conv1 = b.conv(entry_relu, rng, cur_c, width, k=3, stride=stride, padding=1)
            bn1 = b.bn(conv1, width)
            mid_relu = b.add(LayerKind.RELU, inputs=[bn1])
            conv2 = b.conv(mid_relu, rng, width, width, k=3, stride=1, padding=1)
            bn2 = b.bn(conv2, width)

            shortcut_id: int | None = None
            if stride != 1 or cur_c != width:
                if projection_shortcuts:
                    shortcut_id = b.conv(
                        entry_relu, rng, cur_c, width, k=1, stride=stride, padding=0,
                        role="shortcut",
                    )
                else:
                    shortcut_id = b.add(
                        LayerKind.CONV,
                        params={
                            "weight": _identity_shortcut_weights(width, cur_c),
                            "bias": np.zeros(width, dtype=DTYPE),
                        },
                        attrs={
                            "stride": stride, "padding": 0,
                            "role": "shortcut", "trainable": False,
                        },
                        inputs=[entry_relu],
                    )
            add_id = b.add(
                LayerKind.ADD,
                attrs={"shortcut_scale": 1.0},
                inputs=[bn2, shortcut_id if shortcut_id is not None else entry_relu],
            )
            cur_relu = b.add(LayerKind.RELU, inputs=[add_id])
            blocks.append(
                ResidualBlockSpec(
                    conv1=conv1, bn1=bn1, conv2=conv2, bn2=bn2, add=add_id,
                    entry_relu=entry_relu, mid_relu=mid_relu, exit_relu=cur_relu,
                    shortcut=shortcut_id,
                )
            )
            cur_c = width

    gap = b.add(LayerKind.GLOBAL_AVG_POOL, inputs=[cur_relu])
    fan_in = stage_widths[2]
    fc_w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(num_classes, fan_in)).astype(DTYPE)
    b.add(
        LayerKind.FULLY_CONNECTED,
        params={"weight": fc_w, "bias": np.zeros(num_classes, dtype=DTYPE)},
        inputs=[gap],
    )

    g = ModelGraph(
        b.nodes,
        meta={
            "arch": "resnet",
            "depth": depth,
            "stage_widths": list(stage_widths),
            "num_classes": num_classes,
            "input_shape": list(input_shape),
            "projection_shortcuts": projection_shortcuts,
            "seed": seed,
        },
        blocks=blocks,
    )
    assert g.weight_layer_count() == depth
    return g


def build_plain(
    depth: int,
    stage_widths: tuple[int, int, int] = (16, 32, 64),
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
) -> ModelGraph:
    """Shortcut-free counterpart of `build_resnet`: the same conv stack with
    the residual joins removed (a VGG-style plain CNN of equal depth)."""
    n = _check_depth(depth)
    rng = np.random.default_rng(seed)
    b = _GraphBuilder(input_shape)
    in_c = input_shape[0]

    stem_conv = b.conv(b.input_id, rng, in_c, stage_widths[0], k=3, stride=1, padding=1)
    stem_bn = b.bn(stem_conv, stage_widths[0])
    cur = b.add(LayerKind.RELU, inputs=[stem_bn])
    cur_c = stage_widths[0]

    for stage, width in enumerate(stage_widths):
        for block in range(n):
            stride = 2 if (stage > 0 and block == 0) else 1
            for conv_i in range(2):
                conv = b.conv(cur, rng, cur_c, width, k=3,
                              stride=stride if conv_i == 0 else 1, padding=1)
                bn = b.bn(conv, width)
                cur = b.add(LayerKind.RELU, inputs=[bn])
                cur_c = width

    gap = b.add(LayerKind.GLOBAL_AVG_POOL, inputs=[cur])
    fan_in = stage_widths[2]
    fc_w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(num_classes, fan_in)).astype(DTYPE)
    b.add(
        LayerKind.FULLY_CONNECTED,
        params={"weight": fc_w, "bias": np.zeros(num_classes, dtype=DTYPE)},
        inputs=[gap],
    )
    g = ModelGraph(
        b.nodes,
        meta={
            "arch": "plain",
            "depth": depth,
            "stage_widths": list(stage_widths),
            "num_classes": num_classes,
            "input_shape": list(input_shape),
            "seed": seed,
        },
    )
    assert g.weight_layer_count() == depth
    return g
