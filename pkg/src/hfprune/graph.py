"""Declarative network graphs.

A graph is an ordered list of :class:`LayerSpec` records plus the shortcut
groups: sets of batch-norm layers whose outputs meet at add junctions and
therefore have to share a single channel mask.

Text format (one record per line, ``#`` starts a comment)::

    input c=3 h=16 w=16
    classes 10
    layer 0 kind=conv in=3 out=16 k=3 stride=1 pad=1 pred=input
    layer 1 kind=batchnorm in=16 out=16 k=0 stride=1 pad=0 pred=0
    group 1,7
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from typing import Optional

from .tensor import conv_output_size

KINDS = ("conv", "fc", "batchnorm", "relu", "maxpool", "gap", "add")
WEIGHTED = ("conv", "fc")
# layers that neither create nor mix channels
PASSTHROUGH = ("relu", "maxpool", "gap")


class GraphError(ValueError):
    """A graph failed validation; ``diagnostics`` lists every problem found."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    preds: tuple[int, ...] = ()


@dataclass(frozen=True)
class NetworkGraph:
    layers: tuple[LayerSpec, ...]
    shortcut_groups: tuple[tuple[int, ...], ...]
    num_classes: int
    input_shape: tuple[int, int, int]  # (C, H, W)

    def layer(self, layer_id: int) -> LayerSpec:
        return self._index[layer_id]

    @property
    def _index(self) -> dict[int, LayerSpec]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {l.id: l for l in self.layers}
            object.__setattr__(self, "_idx", idx)
        return idx

    def consumers(self, layer_id: int) -> list[int]:
        return [l.id for l in self.layers if layer_id in l.preds]

    def batchnorm_ids(self) -> list[int]:
        return [l.id for l in self.layers if l.kind == "batchnorm"]

    def weighted_ids(self) -> list[int]:
        return [l.id for l in self.layers if l.kind in WEIGHTED]

    def output_id(self) -> int:
        used = {p for l in self.layers for p in l.preds}
        return [l.id for l in self.layers if l.id not in used][0]

    def execution_order(self) -> list[int]:
        ts = graphlib.TopologicalSorter({l.id: l.preds for l in self.layers})
        # static_order is deterministic for a fixed insertion order
        return list(ts.static_order())


@dataclass(frozen=True)
class BaseComplexity:
    per_layer_params: dict[int, int]
    per_layer_mults: dict[int, int]
    total_params: int
    total_mults: int


# ---------------------------------------------------------------------------
# validation


def _topo(graph: NetworkGraph) -> tuple[Optional[list[int]], list[str]]:
    ids = [l.id for l in graph.layers]
    diags = []
    if len(set(ids)) != len(ids):
        diags.append("duplicate layer id")
    known = set(ids)
    for l in graph.layers:
        for p in l.preds:
            if p not in known:
                diags.append(f"dangling predecessor: layer {l.id} references unknown layer {p}")
    if diags:
        return None, diags
    try:
        return graph.execution_order(), []
    except graphlib.CycleError as exc:
        return None, [f"cycle detected through layers {exc.args[1]}"]


def infer_shapes(graph: NetworkGraph) -> dict[int, tuple[int, ...]]:
    """Output shape (without batch axis) of every layer; raises GraphError."""
    shapes, diags = _infer(graph)
    if diags:
        raise GraphError(diags)
    return shapes


def _infer(graph: NetworkGraph) -> tuple[dict[int, tuple[int, ...]], list[str]]:
    order, diags = _topo(graph)
    if order is None:
        return {}, diags
    shapes: dict[int, tuple[int, ...]] = {}
    for lid in order:
        l = graph.layer(lid)
        if l.kind not in KINDS:
            diags.append(f"layer {lid}: unknown kind {l.kind!r}")
            continue
        if l.preds:
            if any(p not in shapes for p in l.preds):
                continue  # upstream problem already reported
            ins = [shapes[p] for p in l.preds]
        else:
            ins = [graph.input_shape]
        src = ins[0]
        if l.kind == "add":
            if len(l.preds) < 2:
                diags.append(f"layer {lid}: add junction needs at least 2 predecessors")
            if len(set(ins)) != 1:
                chans = ", ".join(str(s[0]) for s in ins)
                diags.append(f"channel mismatch at add junction {lid}: inputs have shapes {ins} (channels {chans})")
                continue
        elif len(l.preds) > 1:
            diags.append(f"layer {lid}: kind {l.kind} takes a single predecessor")
        if l.kind != "add" and l.in_channels != src[0]:
            diags.append(f"channel mismatch at layer {lid}: in={l.in_channels} but predecessor provides {src[0]}")
            continue
        if l.kind == "conv":
            if len(src) != 3:
                diags.append(f"layer {lid}: conv needs a spatial input")
                continue
            if l.kernel < 1 or l.stride < 1 or l.padding < 0 or l.in_channels < 1 or l.out_channels < 1:
                diags.append(f"layer {lid}: invalid conv geometry")
                continue
            h = conv_output_size(src[1], l.kernel, l.stride, l.padding)
            w = conv_output_size(src[2], l.kernel, l.stride, l.padding)
            if h < 1 or w < 1:
                diags.append(f"layer {lid}: conv output would be empty")
                continue
            shapes[lid] = (l.out_channels, h, w)
        elif l.kind == "fc":
            if len(src) != 1:
                diags.append(f"layer {lid}: fc needs a flat [N,F] input (add a gap layer)")
                continue
            if l.in_channels < 1 or l.out_channels < 1:
                diags.append(f"layer {lid}: fc needs positive channel counts")
                continue
            shapes[lid] = (l.out_channels,)
        elif l.kind == "maxpool":
            if len(src) != 3 or l.kernel < 1:
                diags.append(f"layer {lid}: maxpool needs a spatial input and kernel >= 1")
                continue
            s = l.stride or l.kernel
            h, w = conv_output_size(src[1], l.kernel, s, 0), conv_output_size(src[2], l.kernel, s, 0)
            if h < 1 or w < 1:
                diags.append(f"layer {lid}: maxpool output would be empty")
                continue
            shapes[lid] = (src[0], h, w)
        elif l.kind == "gap":
            if len(src) != 3:
                diags.append(f"layer {lid}: gap needs a spatial input")
                continue
            shapes[lid] = (src[0],)
        else:  # batchnorm, relu, add
            shapes[lid] = src
        if l.kind not in ("conv", "fc") and l.out_channels != shapes[lid][0]:
            diags.append(f"layer {lid}: out={l.out_channels} but kind {l.kind} yields {shapes[lid][0]} channels")
    return shapes, diags


def validate(graph: NetworkGraph) -> list[str]:
    """Return diagnostics; an empty list means the graph is valid."""
    shapes, diags = _infer(graph)
    if diags:
        return diags
    inputs = [l.id for l in graph.layers if not l.preds]
    if len(inputs) != 1:
        diags.append(f"graph must have exactly one input layer, found {inputs}")
    used = {p for l in graph.layers for p in l.preds}
    outputs = [l.id for l in graph.layers if l.id not in used]
    if len(outputs) != 1:
        diags.append(f"graph must have exactly one output layer, found {outputs}")
    elif shapes[outputs[0]] != (graph.num_classes,):
        diags.append(f"output layer {outputs[0]} yields {shapes[outputs[0]]}, expected ({graph.num_classes},) logits")

    bn_ids = set(graph.batchnorm_ids())
    for lid in sorted(bn_ids):
        l = graph.layer(lid)
        pred = graph.layer(l.preds[0]) if l.preds else None
        if pred is None or pred.kind not in WEIGHTED:
            diags.append(f"batchnorm {lid} must directly follow a conv or fc layer")
        elif len(graph.consumers(pred.id)) != 1:
            diags.append(f"layer {pred.id} feeds batchnorm {lid} and must have no other consumers")

    seen: dict[int, int] = {}
    for gi, group in enumerate(graph.shortcut_groups):
        for b in group:
            if b not in bn_ids:
                diags.append(f"shortcut group {gi} references non-batchnorm layer {b}")
            elif b in seen:
                diags.append(f"duplicate group membership: batchnorm {b} in groups {seen[b]} and {gi}")
            else:
                seen[b] = gi
        chans = {shapes[b][0] for b in group if b in shapes}
        if len(chans) > 1:
            diags.append(f"shortcut group {gi} mixes channel counts {sorted(chans)}")
    if diags:
        return diags

    slot_of = {b: ("g", gi) for b, gi in seen.items()}
    for l in graph.layers:
        if l.kind != "add":
            continue
        srcs = channel_sources(graph, l.id)
        if srcs == {None}:
            continue  # no maskable branch (e.g. after folding)
        if None in srcs:
            diags.append(f"unsupported shortcut topology at add {l.id}: a branch does not end in batchnorm")
        elif len({slot_of.get(s, ("b", s)) for s in srcs}) != 1:
            diags.append(f"add junction {l.id} merges batchnorm layers that are not in one shortcut group")
    return diags


def check(graph: NetworkGraph) -> NetworkGraph:
    diags = validate(graph)
    if diags:
        raise GraphError(diags)
    return graph


def channel_sources(graph: NetworkGraph, layer_id: int) -> set[Optional[int]]:
    """Batch-norm layers that determine the channels of ``layer_id``'s output.

    ``None`` in the result stands for a source without a mask (network input
    or a conv/fc without a following batch-norm).
    """
    l = graph.layer(layer_id)
    if l.kind == "batchnorm":
        return {l.id}
    if l.kind in WEIGHTED:
        return {None}
    if not l.preds:
        return {None}
    out: set[Optional[int]] = set()
    for p in l.preds:
        out |= channel_sources(graph, p)
    return out


# ---------------------------------------------------------------------------
# complexity


def layer_input_spatial(graph: NetworkGraph, shapes: dict[int, tuple[int, ...]], layer_id: int) -> tuple[int, ...]:
    l = graph.layer(layer_id)
    return shapes[l.preds[0]] if l.preds else graph.input_shape


def base_complexity(graph: NetworkGraph) -> BaseComplexity:
    """Weights and multiplications per conv/fc layer; biases and BN excluded."""
    check(graph)
    shapes = infer_shapes(graph)
    params, mults = {}, {}
    for l in graph.layers:
        if l.kind == "conv":
            p = l.in_channels * l.out_channels * l.kernel * l.kernel
            _, h, w = shapes[l.id]
            params[l.id], mults[l.id] = p, p * h * w
        elif l.kind == "fc":
            p = l.in_channels * l.out_channels
            params[l.id], mults[l.id] = p, p
    return BaseComplexity(params, mults, sum(params.values()), sum(mults.values()))


# ---------------------------------------------------------------------------
# text format

_LAYER_FIELDS = ("kind", "in", "out", "k", "stride", "pad", "pred")


def serialize(graph: NetworkGraph) -> str:
    c, h, w = graph.input_shape
    lines = [f"input c={c} h={h} w={w}", f"classes {graph.num_classes}"]
    for l in graph.layers:
        pred = ",".join(str(p) for p in l.preds) if l.preds else "input"
        lines.append(
            f"layer {l.id} kind={l.kind} in={l.in_channels} out={l.out_channels} "
            f"k={l.kernel} stride={l.stride} pad={l.padding} pred={pred}"
        )
    for group in graph.shortcut_groups:
        lines.append("group " + ",".join(str(b) for b in group))
    return "\n".join(lines) + "\n"


def _int(value: str, name: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(lineno, f"field {name!r} must be an integer, got {value!r}") from None


def _ints(value: str, name: str, lineno: int) -> tuple[int, ...]:
    return tuple(_int(v, name, lineno) for v in value.split(",") if v)


def deserialize(text: str) -> NetworkGraph:
    input_shape = None
    num_classes = None
    layers: list[LayerSpec] = []
    groups: list[tuple[int, ...]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "input":
            kv = _keyvals(rest, lineno)
            for key in ("c", "h", "w"):
                if key not in kv:
                    raise ParseError(lineno, f"input record missing required field {key!r}")
            input_shape = tuple(_int(kv[k], k, lineno) for k in ("c", "h", "w"))
        elif head == "classes":
            if len(rest) != 1:
                raise ParseError(lineno, "classes record takes exactly one value")
            num_classes = _int(rest[0], "classes", lineno)
        elif head == "group":
            if len(rest) != 1:
                raise ParseError(lineno, "group record takes one comma-separated id list")
            groups.append(_ints(rest[0], "group", lineno))
        elif head == "layer":
            if not rest:
                raise ParseError(lineno, "layer record missing id")
            lid = _int(rest[0], "id", lineno)
            kv = _keyvals(rest[1:], lineno)
            for key in _LAYER_FIELDS:
                if key not in kv:
                    raise ParseError(lineno, f"layer {lid} missing required field {key!r}")
            extra = set(kv) - set(_LAYER_FIELDS)
            if extra:
                raise ParseError(lineno, f"layer {lid} has unknown field(s) {sorted(extra)}")
            if kv["kind"] not in KINDS:
                raise ParseError(lineno, f"unknown layer kind {kv['kind']!r}")
            preds = () if kv["pred"] == "input" else _ints(kv["pred"], "pred", lineno)
            layers.append(LayerSpec(
                id=lid, kind=kv["kind"],
                in_channels=_int(kv["in"], "in", lineno), out_channels=_int(kv["out"], "out", lineno),
                kernel=_int(kv["k"], "k", lineno), stride=_int(kv["stride"], "stride", lineno),
                padding=_int(kv["pad"], "pad", lineno), preds=preds,
            ))
        else:
            raise ParseError(lineno, f"unknown record type {head!r}")
    if input_shape is None:
        raise ParseError(0, "missing required 'input' record")
    if num_classes is None:
        raise ParseError(0, "missing required 'classes' record")
    return NetworkGraph(tuple(layers), tuple(groups), num_classes, input_shape)


def _keyvals(tokens: list[str], lineno: int) -> dict[str, str]:
    kv = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(lineno, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        kv[k] = v
    return kv


# ---------------------------------------------------------------------------
# builders


class GraphBuilder:
    """Incrementally appends layers, tracking the running channel count."""

    def __init__(self, input_shape: tuple[int, int, int], num_classes: int):
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.layers: list[LayerSpec] = []
        self.groups: list[list[int]] = []
        self._channels: dict[Optional[int], int] = {None: input_shape[0]}

    def _append(self, kind, pred, out=None, **kw) -> int:
        lid = len(self.layers)
        preds = tuple(pred) if isinstance(pred, (list, tuple)) else (() if pred is None else (pred,))
        cin = self._channels[preds[0] if preds else None]
        out = cin if out is None else out
        self.layers.append(LayerSpec(lid, kind, cin, out, preds=preds, **kw))
        self._channels[lid] = out
        return lid

    def conv(self, pred, out, k=3, stride=1, padding=None) -> int:
        return self._append("conv", pred, out, kernel=k, stride=stride, padding=k // 2 if padding is None else padding)

    def fc(self, pred, out) -> int:
        return self._append("fc", pred, out)

    def bn(self, pred) -> int:
        return self._append("batchnorm", pred)

    def relu(self, pred) -> int:
        return self._append("relu", pred)

    def maxpool(self, pred, k=2, stride=None) -> int:
        return self._append("maxpool", pred, kernel=k, stride=stride or k)

    def gap(self, pred) -> int:
        return self._append("gap", pred)

    def add(self, *preds) -> int:
        return self._append("add", list(preds))

    def build(self) -> NetworkGraph:
        return NetworkGraph(tuple(self.layers), tuple(tuple(g) for g in self.groups),
                            self.num_classes, tuple(self.input_shape))


def tinyvgg(num_classes: int = 10, input_shape=(3, 16, 16), widths=(16, 16, 32, 32, 64), hidden: int = 256) -> NetworkGraph:
    """Conv-BN-ReLU blocks with pooling after every second block, then two fc layers.

    The first fc layer is the parameter-heavy one, mirroring VGG-style heads.
    """
    g = GraphBuilder(input_shape, num_classes)
    x = None
    for i, width in enumerate(widths):
        x = g.relu(g.bn(g.conv(x, width)))
        if i % 2 == 1 and i < len(widths) - 1:
            x = g.maxpool(x)
    x = g.gap(x)
    x = g.relu(g.bn(g.fc(x, hidden)))
    g.fc(x, num_classes)
    return check(g.build())


def tinyresnet(num_classes: int = 10, input_shape=(3, 16, 16), widths=(16, 32)) -> NetworkGraph:
    """A stem plus basic residual blocks; every branch that reaches an add ends in BN.

    Each stage opens with a block (projection shortcut when the width or
    resolution changes) followed by one identity block. All BN layers that
    merge through a stage's junctions form one shortcut group.
    """
    g = GraphBuilder(input_shape, num_classes)
    stem_bn = g.bn(g.conv(None, widths[0]))
    x = g.relu(stem_bn)
    group = [stem_bn]
    for si, width in enumerate(widths):
        for bi in range(2):
            project = si > 0 and bi == 0
            stride = 2 if project else 1
            h = g.relu(g.bn(g.conv(x, width, stride=stride)))
            out_bn = g.bn(g.conv(h, width))
            if project:
                g.groups.append(group)
                short = g.bn(g.conv(x, width, k=1, stride=stride, padding=0))
                group = [out_bn, short]
                x = g.relu(g.add(out_bn, short))
            else:
                group.append(out_bn)
                x = g.relu(g.add(out_bn, x))
    g.groups.append(group)
    g.fc(g.gap(x), num_classes)
    return check(g.build())


def builtin_architecture(name: str, num_classes: int = 10, input_shape=(3, 16, 16)) -> NetworkGraph:
    builders = {"tinyvgg": tinyvgg, "tinyresnet": tinyresnet}
    if name not in builders:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(builders)}")
    return builders[name](num_classes=num_classes, input_shape=tuple(input_shape))
