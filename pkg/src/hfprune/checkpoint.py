"""On-disk checkpoints.

A checkpoint is a directory holding three files:

``model.graph``
    the network in the line-oriented graph format.
``weights.bin``
    every array of the model as little-endian float32, concatenated in
    layer order (conv/fc: weight, bias; batchnorm: gamma, beta,
    running_mean, running_var).
``manifest.txt``
    ``key = value`` lines naming the other two files and the BN settings,
    followed by one ``tensor <name> offset=<float index> count=<n> shape=<d,...>``
    line per array.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import deserialize, serialize
from .network import Model
from .tensor import BN_EPS, BN_MOMENTUM, BatchNormState, Parameter

FORMAT = "hfprune-checkpoint/1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "model.graph").write_text(serialize(model.graph), encoding="utf-8")
    arrays = model.state_arrays()
    eps = {s.eps for s in model.bn.values()} or {BN_EPS}
    mom = {s.momentum for s in model.bn.values()} or {BN_MOMENTUM}
    lines = [
        f"format = {FORMAT}",
        "graph = model.graph",
        "weights = weights.bin",
        "dtype = float32-le",
        f"bn_eps = {eps.pop()!r}",
        f"bn_momentum = {mom.pop()!r}",
    ]
    offset = 0
    chunks = []
    for name, arr in arrays:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} offset={offset} count={flat.size} shape={shape}")
        offset += flat.size
        chunks.append(flat.tobytes())
    (directory / "weights.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest}")
    meta, tensors = {}, {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("tensor "):
            _, name, *fields = line.split()
            kv = dict(f.split("=", 1) for f in fields)
            try:
                shape = tuple(int(d) for d in kv["shape"].split(",") if d)
                tensors[name] = (int(kv["offset"]), int(kv["count"]), shape)
            except (KeyError, ValueError):
                raise CheckpointError(f"{manifest}:{lineno}: malformed tensor record") from None
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
        else:
            raise CheckpointError(f"{manifest}:{lineno}: expected key = value")
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{manifest}: unsupported format {meta.get('format')!r}")
    graph = deserialize((directory / meta.get("graph", "model.graph")).read_text(encoding="utf-8"))
    blob = np.frombuffer((directory / meta.get("weights", "weights.bin")).read_bytes(), dtype="<f4")
    eps = float(meta.get("bn_eps", BN_EPS))
    momentum = float(meta.get("bn_momentum", BN_MOMENTUM))

    def get(name):
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        off, count, shape = tensors[name]
        if off + count > blob.size:
            raise CheckpointError(f"tensor {name} extends past the end of the weight blob")
        return blob[off:off + count].astype(np.float32).reshape(shape)

    weights, biases, bn = {}, {}, {}
    for l in graph.layers:
        if l.kind in ("conv", "fc"):
            weights[l.id] = Parameter(get(f"L{l.id}.weight"), name=f"L{l.id}.weight")
            biases[l.id] = Parameter(get(f"L{l.id}.bias"), name=f"L{l.id}.bias")
        elif l.kind == "batchnorm":
            bn[l.id] = BatchNormState(
                gamma=Parameter(get(f"L{l.id}.gamma"), name=f"L{l.id}.gamma"),
                beta=Parameter(get(f"L{l.id}.beta"), name=f"L{l.id}.beta"),
                running_mean=get(f"L{l.id}.running_mean"),
                running_var=get(f"L{l.id}.running_var"),
                eps=eps, momentum=momentum,
            )
    return Model(graph, weights, biases, bn)
