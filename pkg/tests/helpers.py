"""Random graphs and brute-force oracles shared by several test modules.

The oracles here deliberately avoid the library's slot bookkeeping: channel
liveness is propagated node by node and surviving weights are enumerated
entry by entry.
"""

from __future__ import annotations

import numpy as np

from hfprune.graph import GraphBuilder, NetworkGraph, check, infer_shapes
from hfprune.network import Model


def random_graph(rng: np.random.Generator, allow_shortcuts: bool = True) -> NetworkGraph:
    """A random valid graph with 2-8 conv/fc layers, optionally residual."""
    c0 = int(rng.integers(1, 4))
    hw = int(rng.choice([4, 6, 8]))
    classes = int(rng.integers(2, 6))
    g = GraphBuilder((c0, hw, hw), classes)
    n_weighted = 0
    budget = int(rng.integers(1, 6))
    x = None
    src_group = None  # index in g.groups of the group feeding x, if x ends in BN
    spatial = hw
    while n_weighted < budget:
        kind = rng.choice(["plain", "plain", "nobn", "res", "proj"] if allow_shortcuts else ["plain", "plain", "nobn"])
        width = int(rng.integers(1, 6))
        if kind == "res" and src_group is not None:
            h = g.relu(g.bn(g.conv(x, width, k=int(rng.choice([1, 3])))))
            out_bn = g.bn(g.conv(h, g._channels[x]))
            g.groups[src_group].append(out_bn)
            x = g.relu(g.add(out_bn, x))
            n_weighted += 2
        elif kind == "proj" and x is not None:
            stride = 2 if spatial >= 4 and rng.random() < 0.5 else 1
            h = g.relu(g.bn(g.conv(x, width, stride=stride)))
            out_bn = g.bn(g.conv(h, width))
            short = g.bn(g.conv(x, width, k=1, stride=stride, padding=0))
            g.groups.append([out_bn, short])
            src_group = len(g.groups) - 1
            x = g.relu(g.add(out_bn, short))
            spatial = (spatial - 1) // stride + 1
            n_weighted += 3
        elif kind == "nobn":
            x = g.relu(g.conv(x, width, k=int(rng.choice([1, 3]))))
            src_group = None
            n_weighted += 1
        else:
            k = int(rng.choice([1, 3]))
            stride = 2 if spatial >= 4 and rng.random() < 0.3 else 1
            bn = g.bn(g.conv(x, width, k=k, stride=stride))
            x = g.relu(bn)
            spatial = (spatial + 2 * (k // 2) - k) // stride + 1
            if allow_shortcuts and rng.random() < 0.5:
                g.groups.append([bn])
                src_group = len(g.groups) - 1
            else:
                src_group = None
            n_weighted += 1
            if spatial >= 4 and rng.random() < 0.3:
                x = g.maxpool(x, 2)
                spatial //= 2
    x = g.gap(x)
    if rng.random() < 0.5:
        x = g.relu(g.bn(g.fc(x, int(rng.integers(2, 7)))))
    g.fc(x, classes)
    graph = g.build()
    # drop single-member groups half of the time; they behave like plain BNs
    groups = tuple(tuple(gr) for gr in graph.shortcut_groups if len(gr) > 1 or rng.random() < 0.5)
    return check(NetworkGraph(graph.layers, groups, graph.num_classes, graph.input_shape))


def slots_of(graph: NetworkGraph) -> list[tuple[int, ...]]:
    grouped = {b for gr in graph.shortcut_groups for b in gr}
    return [tuple(gr) for gr in graph.shortcut_groups] + [(b,) for b in graph.batchnorm_ids() if b not in grouped]


def random_masks(graph: NetworkGraph, rng: np.random.Generator, p_active: float = 0.6) -> dict[int, np.ndarray]:
    masks = {}
    for members in slots_of(graph):
        c = graph.layer(members[0]).out_channels
        m = rng.random(c) < p_active
        for b in members:
            masks[b] = m
    return masks


def random_gammas(graph: NetworkGraph, rng: np.random.Generator, t: float = 1e-4) -> dict[int, np.ndarray]:
    """Gammas where roughly a third of entries sit at or below the threshold."""
    out = {}
    for b in graph.batchnorm_ids():
        c = graph.layer(b).out_channels
        g = rng.normal(0, 1, c)
        small = rng.random(c) < 0.35
        g[small] = rng.uniform(-t, t, small.sum()) * 0.4
        out[b] = g
    return out


def channel_vectors(graph: NetworkGraph, phi: dict[int, np.ndarray]) -> dict:
    """Per-node channel weights: BN outputs carry ``phi[bn]``, conv/fc outputs are all ones."""
    vec: dict = {None: np.ones(graph.input_shape[0])}
    for lid in graph.execution_order():
        l = graph.layer(lid)
        if l.kind in ("conv", "fc"):
            vec[lid] = np.ones(l.out_channels)
        elif l.kind == "batchnorm":
            vec[lid] = np.asarray(phi[lid], dtype=np.float64)
        elif l.kind == "add":
            # relaxed union; exact for shared masks (all branches identical)
            vec[lid] = np.max([vec[p] for p in l.preds], axis=0)
        else:
            vec[lid] = vec[l.preds[0]]
    return vec


def brute_force_counts(graph: NetworkGraph, masks: dict[int, np.ndarray]) -> tuple[int, int]:
    """Count surviving weights and executed multiplies entry by entry."""
    shapes = infer_shapes(graph)
    vec = channel_vectors(graph, {b: m.astype(float) for b, m in masks.items()})
    params = mults = 0
    for l in graph.layers:
        if l.kind not in ("conv", "fc"):
            continue
        alive_in = vec[l.preds[0]] if l.preds else vec[None]
        consumers = graph.consumers(l.id)
        if len(consumers) == 1 and graph.layer(consumers[0]).kind == "batchnorm":
            alive_out = vec[consumers[0]]
        else:
            alive_out = np.ones(l.out_channels)
        taps = l.kernel * l.kernel if l.kind == "conv" else 1
        pixels = shapes[l.id][1] * shapes[l.id][2] if l.kind == "conv" else 1
        for o in range(l.out_channels):
            for i in range(l.in_channels):
                if alive_in[i] and alive_out[o]:
                    for _ in range(taps):
                        params += 1
                        mults += pixels  # one multiply per output pixel for this weight
    return params, mults


def relaxed_counts(graph: NetworkGraph, slot_phi: list[np.ndarray]) -> tuple[float, float]:
    """Real-valued surviving counts: sum over weight entries of phi_in * phi_out."""
    shapes = infer_shapes(graph)
    phi = {}
    for members, v in zip(slots_of(graph), slot_phi):
        for b in members:
            phi[b] = v
    vec = {None: np.ones(graph.input_shape[0])}
    for lid in graph.execution_order():
        l = graph.layer(lid)
        if l.kind in ("conv", "fc"):
            vec[lid] = np.ones(l.out_channels)
        elif l.kind == "batchnorm":
            vec[lid] = phi[lid]
        else:
            vec[lid] = vec[l.preds[0]]  # shared slot: every add branch carries the same vector
    p = m = 0.0
    for l in graph.layers:
        if l.kind not in ("conv", "fc"):
            continue
        fin = vec[l.preds[0]] if l.preds else vec[None]
        consumers = graph.consumers(l.id)
        fout = vec[consumers[0]] if len(consumers) == 1 and graph.layer(consumers[0]).kind == "batchnorm" \
            else np.ones(l.out_channels)
        taps = l.kernel * l.kernel if l.kind == "conv" else 1
        pixels = shapes[l.id][1] * shapes[l.id][2] if l.kind == "conv" else 1
        for o in range(l.out_channels):
            for i in range(l.in_channels):
                p += taps * fin[i] * fout[o]
                m += taps * pixels * fin[i] * fout[o]
    return p, m


def relaxed_loss(graph, slot_phi, target_p, target_m, total_p, total_m) -> float:
    p, m = relaxed_counts(graph, slot_phi)
    return max((p - target_p) / total_p, 0.0) + max((m - target_m) / total_m, 0.0)


def fd_gamma_gradient(graph, gammas, target_p, target_m, total_p, total_m, t=1e-4, h=1e-3):
    """sign-STE(gamma) times central differences of the relaxed loss per slot channel."""
    slots = slots_of(graph)
    slot_phi = []
    for members in slots:
        s = np.sum([np.abs(gammas[b]) for b in members], axis=0)
        slot_phi.append((s > t).astype(float))
    out = {}
    dphi = []
    for si in range(len(slots)):
        d = np.zeros(len(slot_phi[si]))
        for c in range(len(d)):
            up = [v.copy() for v in slot_phi]
            dn = [v.copy() for v in slot_phi]
            up[si][c] += h
            dn[si][c] -= h
            d[c] = (relaxed_loss(graph, up, target_p, target_m, total_p, total_m)
                    - relaxed_loss(graph, dn, target_p, target_m, total_p, total_m)) / (2 * h)
        dphi.append(d)
    for si, members in enumerate(slots):
        for b in members:
            out[b] = dphi[si] * np.where(gammas[b] > 0, 1.0, -1.0)
    return out, slot_phi


def naive_conv2d(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for o in range(cout):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                yy = yi * stride + ky - padding
                                xx = xi * stride + kx - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += float(x[ni, c, yy, xx]) * float(w[o, c, ky, kx])
                    out[ni, o, yi, xi] = acc
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def gradient_instance(rng: np.random.Generator, allow_shortcuts: bool = True, t: float = 1e-4, h: float = 1e-3):
    """Random (graph, gammas, targets) with both counts away from the rectifier kinks.

    Returns ``(graph, gammas, target_p, target_m, expected_grads)`` where the
    expected gradients come from the finite-difference oracle.
    """
    from hfprune.graph import base_complexity

    while True:
        graph = random_graph(rng, allow_shortcuts)
        if not graph.batchnorm_ids():
            continue
        base = base_complexity(graph)
        gammas = random_gammas(graph, rng, t)
        # draw targets anywhere in [0, total]; nudge off exact equality
        slots = slots_of(graph)
        phi = [(np.sum([np.abs(gammas[b]) for b in m], axis=0) > t).astype(float) for m in slots]
        p_eff, m_eff = relaxed_counts(graph, phi)
        target_p = int(rng.integers(0, base.total_params + 1))
        target_m = int(rng.integers(0, base.total_mults + 1))
        # keep a margin so the +-h perturbation never crosses a rectifier kink
        margin_p = h * base.total_params
        margin_m = h * base.total_mults
        if abs(p_eff - target_p) <= margin_p or abs(m_eff - target_m) <= margin_m:
            continue
        expected, _ = fd_gamma_gradient(graph, gammas, target_p, target_m,
                                        base.total_params, base.total_mults, t, h)
        return graph, gammas, target_p, target_m, expected


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def sparsify(model: Model, rng, p_dead=0.4, t=1e-4):
    """Push a random subset of channels (slot-consistently) below the threshold."""
    graph = model.graph
    grouped = {b for g in graph.shortcut_groups for b in g}
    slots = [list(g) for g in graph.shortcut_groups] + [[b] for b in graph.batchnorm_ids() if b not in grouped]
    for members in slots:
        c = model.bn[members[0]].channels
        dead = rng.random(c) < p_dead
        for b in members:
            s = model.bn[b]
            s.gamma.data[dead] = rng.uniform(-t, t, dead.sum()) * 0.5
            s.beta.data[:] = rng.normal(0, 0.5, c)
            s.running_mean[:] = rng.normal(0, 0.5, c)
            s.running_var[:] = rng.uniform(0.5, 2.0, c)
    return model


def random_model(graph, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    model = Model.init(graph, seed=seed, dtype=dtype)
    for s in model.bn.values():
        s.gamma.data[:] = rng.normal(1.0, 0.5, s.channels)
    return sparsify(model, rng), rng
