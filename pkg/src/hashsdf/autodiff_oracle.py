"""A small define-by-run computation graph with gradient-of-gradient support.

This exists purely as a correctness oracle and timing baseline for the
analytic MLP derivative kernels: it retains the full graph, emits gradients
as new graph nodes (so they can be differentiated again), and makes no
attempt at fusion.  Keep it simple and obviously correct.

Values are computed eagerly at node construction.  ReLU derivatives use the
same convention as the analytic kernels: the 0/1 mask captured in the
forward pass is a constant (strict > 0).
"""

from __future__ import annotations

import time

import numpy as np

from .relu_mlp import ShapeError, backward_second, forward


class Node:
    __slots__ = ("op", "parents", "value", "ta", "tb", "row")

    def __init__(self, op, parents, value, ta=False, tb=False, row=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.ta = ta
        self.tb = tb
        self.row = row


def const(a):
    return Node("constant", (), np.asarray(a))


def inp(a):
    return Node("input", (), np.asarray(a))


def matmul(a, b, ta=False, tb=False):
    va = a.value.T if ta else a.value
    vb = b.value.T if tb else b.value
    if va.shape[1] != vb.shape[0]:
        raise ShapeError("shape error: matmul operands do not chain")
    return Node("matmul", (a, b), va @ vb, ta=ta, tb=tb)


def relu(a):
    return Node("relu", (a,), np.maximum(a.value, 0))


def mul(a, b):
    return Node("mul", (a, b), a.value * b.value)


def add(a, b):
    return Node("add", (a, b), a.value + b.value)


def total(a):
    return Node("sum", (a,), np.asarray(a.value.sum()))


def row_of(a, i):
    return Node("index", (a,), a.value[i : i + 1, :], row=i)


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root, seed):
    """Reverse sweep from ``root``; returns {id(node): adjoint Node}.

    The adjoints are themselves graph nodes, so the result of one backward
    pass can be differentiated by a second one.
    """
    adj = {id(root): seed if isinstance(seed, Node) else const(seed)}
    for node in reversed(_topo(root)):
        g = adj.get(id(node))
        if g is None or node.op in ("constant", "input"):
            continue
        if node.op == "matmul":
            a, b = node.parents
            if node.ta:
                ga = matmul(b, g, ta=node.tb, tb=True)
            else:
                ga = matmul(g, b, tb=not node.tb)
            if node.tb:
                gb = matmul(g, a, ta=True, tb=node.ta)
            else:
                gb = matmul(a, g, ta=not node.ta)
            contribs = ((a, ga), (b, gb))
        elif node.op == "relu":
            (a,) = node.parents
            contribs = ((a, mul(g, const((a.value > 0).astype(a.value.dtype)))),)
        elif node.op == "mul":
            a, b = node.parents
            contribs = ((a, mul(g, b)), (b, mul(g, a)))
        elif node.op == "add":
            a, b = node.parents
            contribs = ((a, g), (b, g))
        elif node.op == "sum":
            (a,) = node.parents
            contribs = ((a, mul(const(np.ones_like(a.value)), g)),)
        elif node.op == "index":
            (a,) = node.parents
            pick = np.zeros((a.value.shape[0], 1), dtype=a.value.dtype)
            pick[node.row, 0] = 1.0
            contribs = ((a, matmul(const(pick), g)),)
        else:  # pragma: no cover
            raise ValueError(f"unknown op {node.op}")
        for parent, contrib in contribs:
            prev = adj.get(id(parent))
            adj[id(parent)] = contrib if prev is None else add(prev, contrib)
    return adj


class OracleGraph:
    """ReLU MLP built on the graph, column-major batch (n_0 x P)."""

    def __init__(self, weight_nodes, input_node, output_node):
        self.weight_nodes = weight_nodes
        self.input_node = input_node
        self.output_node = output_node


def oracle_forward(weights, x):
    """Mirror relu_mlp.forward on the graph; returns (y, OracleGraph).

    x is (n_0,) or (P, n_0); y comes back in the same layout as
    relu_mlp.forward so the two can be compared directly.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != weights.in_dim:
        raise ShapeError("shape error: input dim mismatch")
    x_node = inp(np.ascontiguousarray(xb.T))
    w_nodes = [inp(h) for h in weights.layers]
    a = matmul(w_nodes[0], x_node)
    for w in w_nodes[1:]:
        a = matmul(w, relu(a))
    y = a.value.T
    return (y[0] if single else y), OracleGraph(w_nodes, x_node, a)


def oracle_grad(graph, dl_dy):
    """Adjoint nodes for the weights and the input given an output cotangent.

    dl_dy is (P, n_L) or (n_L,) in the row layout of relu_mlp.  Returns
    (weight_adjoint_nodes, input_adjoint_node); missing adjoints (no path)
    come back as zero constants.
    """
    g = np.asarray(dl_dy)
    if g.ndim == 1:
        g = g[None, :]
    adj = backward(graph.output_node, const(np.ascontiguousarray(g.T)))

    def get(node):
        a = adj.get(id(node))
        return a if a is not None else const(np.zeros_like(node.value))

    return [get(w) for w in graph.weight_nodes], get(graph.input_node)


def oracle_grad_of_grad(graph, jac_cotangent):
    """Second-order weight gradients of sum_p <M_p, (dy/dx)_p> by double backward.

    jac_cotangent is (P, n_L, n_0) (or (n_L, n_0) for one sample).  Each
    jacobian row is obtained as the gradient graph of the summed output row,
    contracted with its cotangent slice, and the sum of contractions is
    differentiated once more.
    """
    m = np.asarray(jac_cotangent)
    if m.ndim == 2:
        m = m[None, :, :]
    n_out = graph.output_node.value.shape[0]
    scalar = None
    for i in range(n_out):
        row_sum = total(row_of(graph.output_node, i))
        adj = backward(row_sum, const(np.asarray(1.0)))
        gx = adj[id(graph.input_node)]  # (n_0, P), differentiable
        term = total(mul(gx, const(np.ascontiguousarray(m[:, i, :].T))))
        scalar = term if scalar is None else add(scalar, term)
    adj2 = backward(scalar, const(np.asarray(1.0)))
    out = []
    for w in graph.weight_nodes:
        a = adj2.get(id(w))
        out.append(a.value if a is not None else np.zeros_like(w.value))
    return out


def bench_second_order(width, depth, batch_sizes, rng=None, runs=20):
    """Time the analytic second-order backward against the graph oracle.

    Square MLP (all dims = width, ``depth`` matrices), float32 on both paths,
    generic jacobian cotangent.  Returns a list of dicts, one per batch size,
    with median microseconds per backward pass and the speedup ratio.
    """
    from .relu_mlp import MlpWeights

    rng = rng or np.random.default_rng(0)
    dims = [width] * (depth + 1)
    weights = MlpWeights.random(dims, rng, dtype=np.float32)
    rows = []
    for batch in batch_sizes:
        x = rng.standard_normal((batch, width)).astype(np.float32)
        m = rng.standard_normal((batch, width, width)).astype(np.float32)

        def run_analytic():
            _, trace = forward(weights, x)
            return backward_second(weights, trace, m)

        def run_oracle():
            _, graph = oracle_forward(weights, x)
            return oracle_grad_of_grad(graph, m)

        ref = run_analytic()
        got = run_oracle()
        for a, b in zip(ref, got):  # paranoia: never benchmark disagreeing paths
            np.testing.assert_allclose(a, b, rtol=2e-2, atol=2e-2)

        def median_us(fn):
            times = []
            for _ in range(runs):
                t0 = time.perf_counter()
                fn()
                times.append((time.perf_counter() - t0) * 1e6)
            return float(np.median(times))

        t_analytic = median_us(run_analytic)
        t_oracle = median_us(run_oracle)
        rows.append(
            {
                "width": width,
                "depth": depth,
                "batch": batch,
                "analytic_us": t_analytic,
                "oracle_us": t_oracle,
                "speedup": t_oracle / t_analytic,
            }
        )
    return rows


def bench_rows_to_csv(rows):
    lines = ["width,depth,batch,analytic_us,oracle_us,speedup"]
    for r in rows:
        lines.append(
            f"{r['width']},{r['depth']},{r['batch']},"
            f"{r['analytic_us']:.1f},{r['oracle_us']:.1f},{r['speedup']:.2f}"
        )
    return "\n".join(lines) + "\n"
