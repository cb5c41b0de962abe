"""Bias-free ReLU MLP kernels with analytic second-order weight gradients.

A network is a list of matrices H_1..H_L applied as
y = H_L relu(H_{L-1} ... relu(H_1 x)); there is no activation on the output
layer and no biases.  The forward pass caches the 0/1 activation masks, from
which every derivative below is assembled without re-running the network:

* input_jacobian: dy/dx = H_L G_L H_{L-1} ... G_2 H_1 with the masks G as
  constant diagonal matrices.
* backward_first: ordinary reverse-mode gradients.
* backward_second: gradients of <M, dy/dx> w.r.t. each layer.  Because the
  masks are piecewise constant, d(dy/dx)_(i,j) / dH_l is the outer product of
  the partial backward product S_l^i and partial forward product P_l^j, so
  the full contraction is S_l^T M P_l^T per sample, summed over the batch.
  A ReLU network is piecewise linear, so d2y/dx2 = 0 away from mask
  boundaries; second_order_input_residual checks that directly.

Masks use the strict convention mask = (pre-activation > 0): a unit exactly
at zero is off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class MlpWeights:
    """Layer matrices of a bias-free ReLU MLP; layer l maps n_{l-1} -> n_l."""

    def __init__(self, layers):
        layers = [np.asarray(h) for h in layers]
        if not layers:
            raise ShapeError("shape error: need at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ShapeError("shape error: consecutive layer dims do not chain")
        for h in layers:
            if not np.all(np.isfinite(h)):
                raise ValueError("non-finite layer weights")
        self.layers = layers

    @classmethod
    def random(cls, dims, rng, dtype=np.float32, scale=None):
        """He-style random init for the dimension chain dims[0] -> dims[-1]."""
        layers = []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            std = scale if scale is not None else np.sqrt(2.0 / n_in)
            layers.append((rng.standard_normal((n_out, n_in)) * std).astype(dtype))
        return cls(layers)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def in_dim(self):
        return self.layers[0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].shape[0]

    @property
    def dtype(self):
        return self.layers[0].dtype

    def copy(self):
        return MlpWeights([h.copy() for h in self.layers])

    def zero_gradients(self):
        return [np.zeros_like(h) for h in self.layers]


@dataclass
class ForwardTrace:
    """Cached forward pass: input, per-hidden-layer activations and masks, output.

    masks[k] is the 0/1 mask of the ReLU following layer k+1; activations[k]
    is the corresponding post-activation.  Both lists have depth-1 entries.
    """

    x: np.ndarray
    activations: list
    masks: list
    y: np.ndarray


def forward(weights, x):
    """Run the network; returns (y, trace).  x may be (n_0,) or (P, n_0)."""
    x = np.asarray(x, dtype=weights.dtype)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != weights.in_dim:
        raise ShapeError("shape error: input dim mismatch")
    acts, masks = [], []
    a = xb
    for h in weights.layers[:-1]:
        z = a @ h.T
        m = (z > 0).astype(weights.dtype)
        a = z * m
        masks.append(m)
        acts.append(a)
    y = a @ weights.layers[-1].T
    trace = ForwardTrace(x=xb, activations=acts, masks=masks, y=y)
    return (y[0] if single else y), trace


def input_jacobian(weights, trace):
    """dy/dx per sample, shape (P, n_L, n_0), from cached masks."""
    npts = trace.x.shape[0]
    jac = np.broadcast_to(weights.layers[-1], (npts,) + weights.layers[-1].shape).copy()
    for h, m in zip(weights.layers[-2::-1], trace.masks[::-1]):
        jac = (jac * m[:, None, :]) @ h
    return jac


def input_jacobian_rows(weights, trace, rows):
    """Selected rows of dy/dx as (P, len(rows), n_0); cheaper than the full matrix."""
    npts = trace.x.shape[0]
    jac = np.broadcast_to(weights.layers[-1][rows], (npts, len(rows), weights.layers[-1].shape[1])).copy()
    for h, m in zip(weights.layers[-2::-1], trace.masks[::-1]):
        jac = (jac * m[:, None, :]) @ h
    return jac


def backward_first(weights, trace, dl_dy):
    """Reverse-mode gradients; returns ([d loss/d H_l], d loss/d x)."""
    dl_dy = np.asarray(dl_dy, dtype=weights.dtype)
    single = dl_dy.ndim == 1
    g = dl_dy[None, :] if single else dl_dy
    if g.shape != trace.y.shape:
        raise ShapeError("shape error: cotangent does not match output")
    grads = [None] * weights.depth
    upstream = g
    for l in range(weights.depth - 1, 0, -1):
        a_prev = trace.activations[l - 1]
        grads[l] = upstream.T @ a_prev
        upstream = (upstream @ weights.layers[l]) * trace.masks[l - 1]
    grads[0] = upstream.T @ trace.x
    dl_dx = upstream @ weights.layers[0]
    return grads, (dl_dx[0] if single else dl_dx)


def _partial_products(weights, trace):
    """Per-sample partial products around each layer.

    back[l] (P, n_L, n_l) is the masked product from the output down to just
    above layer l+1; fwd[l] (P, n_{l-1}, n_0) the masked product from the
    input up to just below layer l+1.  back[L-1] and fwd[0] are identities.
    """
    npts = trace.x.shape[0]
    depth = weights.depth
    n_out = weights.out_dim
    eye_out = np.broadcast_to(np.eye(n_out, dtype=weights.dtype), (npts, n_out, n_out))
    back = [None] * depth
    back[depth - 1] = eye_out
    for l in range(depth - 2, -1, -1):
        back[l] = (back[l + 1] @ weights.layers[l + 1]) * trace.masks[l][:, None, :]
    n_in = weights.in_dim
    eye_in = np.broadcast_to(np.eye(n_in, dtype=weights.dtype), (npts, n_in, n_in))
    fwd = [None] * depth
    fwd[0] = eye_in
    for l in range(1, depth):
        fwd[l] = trace.masks[l - 1][:, :, None] * (weights.layers[l - 1] @ fwd[l - 1])
    return back, fwd


def backward_second(weights, trace, jac_cotangent):
    """Gradients of sum_p <M_p, (dy/dx)_p> w.r.t. each layer.

    jac_cotangent is (P, n_L, n_0) (or (n_L, n_0) for one sample).  The masks
    are treated as constants, which is exact almost everywhere.
    """
    m = np.asarray(jac_cotangent, dtype=weights.dtype)
    if m.ndim == 2:
        m = m[None, :, :]
    back, fwd = _partial_products(weights, trace)
    grads = []
    for l in range(weights.depth):
        left = np.matmul(back[l].transpose(0, 2, 1), m)  # (P, n_l, n_0)
        grads.append(np.tensordot(left, fwd[l], axes=([0, 2], [0, 2])))
    return grads


def backward_second_row(weights, trace, row, row_cotangent):
    """backward_second specialized to a cotangent on one jacobian row.

    Equivalent to backward_second with M = e_row outer row_cotangent per
    sample, but runs as one matmul per layer: the rank-1 structure turns
    S_l^T M P_l^T into an outer product of the row of S_l and P_l @ m.
    row_cotangent is (P, n_0).
    """
    mvec = np.asarray(row_cotangent, dtype=weights.dtype)
    if mvec.ndim == 1:
        mvec = mvec[None, :]
    npts = mvec.shape[0]
    depth = weights.depth
    # svec[l]: row `row` of the backward partial product, (P, n_l)
    svec = [None] * depth
    svec[depth - 1] = np.zeros((npts, weights.out_dim), dtype=weights.dtype)
    svec[depth - 1][:, row] = 1.0
    for l in range(depth - 2, -1, -1):
        svec[l] = (svec[l + 1] @ weights.layers[l + 1]) * trace.masks[l]
    grads = []
    pvec = mvec  # fwd[l] @ m, starting from the identity
    for l in range(depth):
        grads.append(svec[l].T @ pvec)
        if l < depth - 1:
            pvec = (pvec @ weights.layers[l].T) * trace.masks[l]
    return grads


def second_order_input_residual(weights, x, rng, h=1e-3, margin=1e-3, num_directions=8):
    """Largest second directional difference |f(x+hd)+f(x-hd)-2f(x)| / h^2.

    Piecewise linearity makes this zero wherever no activation mask flips;
    the margin precondition (all |pre-activations| > margin at the three
    evaluation points) guards against flips.  Raises if the margin is
    violated so callers can skip rather than fail.
    """
    x = np.asarray(x, dtype=weights.dtype)

    def preacts_ok(pt):
        a = pt[None, :]
        for hl in weights.layers[:-1]:
            z = a @ hl.T
            if np.min(np.abs(z)) <= margin:
                return False
            a = np.maximum(z, 0)
        return True

    worst = 0.0
    for _ in range(num_directions):
        d = rng.standard_normal(x.shape[0])
        d /= np.linalg.norm(d)
        d = d.astype(weights.dtype)
        pts = [x, x + h * d, x - h * d]
        if not all(preacts_ok(p) for p in pts):
            raise ValueError("near activation boundary")
        y0, _ = forward(weights, pts[0])
        yp, _ = forward(weights, pts[1])
        ym, _ = forward(weights, pts[2])
        worst = max(worst, float(np.max(np.abs(yp + ym - 2.0 * y0)) / h**2))
    return worst
