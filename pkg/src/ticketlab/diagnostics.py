"""Smoothness instrumentation: Hessian-vector products by central differences
of gradients, power-iteration top eigenvalues, perturbation curves along the
top eigendirection, and 2-D loss-landscape grids.

Every probe here uses the plain hard-label cross-entropy in inference mode
(batch-norm running statistics), whatever loss the model was trained with,
so curves stay comparable across recipes. All evaluation runs in float64:
the central differences would drown in float32 rounding otherwise.

Masks restrict curvature to the sparse subspace: probe directions and hvp
outputs are zeroed at pruned coordinates.
"""

from dataclasses import dataclass, field

import numpy as np

from .models import build_graph
from .rand import rng_for

DEFAULT_HVP_EPS = 1e-3
DEFAULT_PROBE_BATCHES = 10
DEFAULT_RESOLUTION = 21
DEFAULT_EXTENT = 1.0
DEFAULT_CLAMP = 8.0


class DiagnosticsError(RuntimeError):
    pass


@dataclass
class CurvatureProbe:
    batches: list                      # [(x, y), ...]
    eps: float = DEFAULT_HVP_EPS
    max_iters: int = 100
    tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.batches:
            raise DiagnosticsError("need at least one probe batch")
        if not self.eps > 0:
            raise DiagnosticsError(f"eps must be positive, got {self.eps}")
        if self.max_iters < 1:
            raise DiagnosticsError("max_iters must be >= 1")
        if not self.tol > 0:
            raise DiagnosticsError(f"tol must be positive, got {self.tol}")


@dataclass
class LandscapeGrid:
    mode: str = "weight"               # weight | input
    directions: tuple = None           # optional pair; generated if absent
    extents: tuple = (DEFAULT_EXTENT, DEFAULT_EXTENT)
    resolution: int = DEFAULT_RESOLUTION
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        if self.mode not in ("weight", "input"):
            raise DiagnosticsError(f"unknown landscape mode {self.mode!r}")
        if int(self.resolution) != self.resolution or self.resolution < 1 \
                or self.resolution % 2 == 0:
            raise DiagnosticsError(
                "resolution must be a positive odd integer so the grid has "
                f"a center, got {self.resolution}")
        if len(self.extents) != 2 or not all(e > 0 for e in self.extents):
            raise DiagnosticsError(
                f"extents must be two positive reals, got {self.extents}")
        if not self.clamp > 0:
            raise DiagnosticsError(f"clamp must be positive, got {self.clamp}")
        if self.directions is not None and len(self.directions) != 2:
            raise DiagnosticsError("directions must be a pair")


@dataclass
class PowerResult:
    value: float
    vector: np.ndarray
    rayleighs: list
    converged: bool
    iters: int


@dataclass
class EigResult:
    value: float                      # mean Rayleigh quotient over batches
    per_batch: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    iters: list = field(default_factory=list)
    vector: dict = None               # final iterate of the last batch


class _FlatLoss:
    """Hard-CE loss of a model on one fixed batch, as a function of the flat
    float64 parameter vector. Swaps float64 shadows into the model's tensors
    for its lifetime and restores the originals on exit."""

    def __init__(self, model, mask, batch):
        x, y = batch
        self._x = np.asarray(x)
        self._t = np.eye(model.spec.num_classes, dtype=np.float64)[
            np.asarray(y, dtype=np.int64)]
        g, logits = build_graph(model)
        t_node = g.input("t")
        ls = g.log_softmax(logits, axis=1)
        g.mark_loss(g.neg(g.mean(g.sum(g.mul(ls, t_node), axis=1))))
        self.g = g
        self._leaves = g.trainable_leaves()
        self.names = [l.name for l in self._leaves]
        self.shapes = [l.tensor.data.shape for l in self._leaves]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self._saved = [l.tensor.data for l in self._leaves]
        self.w0 = np.concatenate([a.astype(np.float64).reshape(-1)
                                  for a in self._saved])
        self.n = self.w0.size
        self._mask_flat = None
        if mask is not None:
            m = np.ones(self.n)
            pos = 0
            for name, size, shape in zip(self.names, self.sizes, self.shapes):
                if name in mask.prunable:
                    m[pos:pos + size] = mask.blocks[name].reshape(-1)
                pos += size
            self._mask_flat = m

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def close(self):
        for leaf, orig in zip(self._leaves, self._saved):
            leaf.tensor.data = orig

    def project(self, v):
        return v if self._mask_flat is None else v * self._mask_flat

    def pack(self, d):
        parts = []
        for name, shape in zip(self.names, self.shapes):
            if name not in d:
                raise DiagnosticsError(f"direction missing block {name}")
            a = np.asarray(d[name], dtype=np.float64)
            if a.shape != shape:
                raise DiagnosticsError(
                    f"{name}: direction shape {a.shape} != {shape}")
            parts.append(a.reshape(-1))
        return np.concatenate(parts)

    def unpack(self, flat):
        out = {}
        pos = 0
        for name, shape, size in zip(self.names, self.shapes, self.sizes):
            out[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return out

    def _bind(self, w):
        pos = 0
        for leaf, shape, size in zip(self._leaves, self.shapes, self.sizes):
            leaf.tensor.data = w[pos:pos + size].reshape(shape)
            pos += size

    def loss(self, w):
        self._bind(w)
        out = self.g.forward({"x": self._x, "t": self._t}, training=False,
                             update_stats=False, dtype=np.float64)
        return float(out.data)

    def loss_at_input(self, x):
        self._bind(self.w0)
        out = self.g.forward({"x": x, "t": self._t}, training=False,
                             update_stats=False, dtype=np.float64)
        return float(out.data)

    def grad(self, w):
        self.loss(w)
        self.g.backward()
        parts = []
        for leaf, shape in zip(self._leaves, self.shapes):
            gg = leaf.grad if leaf.grad is not None else np.zeros(shape)
            parts.append(np.asarray(gg, dtype=np.float64).reshape(-1))
        return np.concatenate(parts)


# -- Hessian-vector products -------------------------------------------------

def hvp_flat(grad_fn, w0, v, eps=DEFAULT_HVP_EPS):
    """(grad(w + eps*vhat) - grad(w - eps*vhat)) / (2 eps) * ||v||."""
    w0 = np.asarray(w0, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise DiagnosticsError("zero direction: ||v|| must be > 0")
    vhat = v / nv
    gp = np.asarray(grad_fn(w0 + eps * vhat), dtype=np.float64)
    gm = np.asarray(grad_fn(w0 - eps * vhat), dtype=np.float64)
    with np.errstate(invalid="ignore"):  # let the finite check do the talking
        out = (gp - gm) / (2.0 * eps) * nv
    if not np.all(np.isfinite(out)):
        raise DiagnosticsError(f"non-finite hvp result (eps={eps})")
    return out


def hvp(model, mask, batch, v, eps=DEFAULT_HVP_EPS):
    """Hessian-vector product of the hard-CE loss on `batch`, with `v` given
    per parameter block. Masked coordinates are zeroed in both the probe
    direction and the result."""
    with _FlatLoss(model, mask, batch) as p:
        vf = p.project(p.pack(v))
        out = p.project(hvp_flat(p.grad, p.w0, vf, eps))
        return p.unpack(out)


# -- power iteration ---------------------------------------------------------

def power_iteration(matvec, dim, seed=0, start=None, max_iters=100, tol=1e-3):
    """Top eigenvalue estimate via normalized power iteration; the Rayleigh
    quotient sequence is recorded. Stops when the quotient's relative change
    falls below tol, else returns the last estimate flagged unconverged."""
    if start is None:
        start = np.random.default_rng(seed).standard_normal(dim)
    v = np.asarray(start, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise DiagnosticsError("power iteration start vector is zero")
    v = v / nv
    rayleighs = []
    prev = None
    converged = False
    for _ in range(max_iters):
        hv = np.asarray(matvec(v), dtype=np.float64)
        lam = float(v @ hv)
        rayleighs.append(lam)
        if prev is not None and abs(lam - prev) <= tol * max(abs(lam), 1e-300):
            converged = True
            break
        prev = lam
        nhv = float(np.linalg.norm(hv))
        if nhv == 0.0:
            # v sits in the kernel; the quotient is exactly 0 and stationary
            converged = True
            break
        v = hv / nhv
    return PowerResult(value=rayleighs[-1], vector=v, rayleighs=rayleighs,
                       converged=converged, iters=len(rayleighs))


def top_eigenvalue(model, mask, probe):
    """Mean top Hessian eigenvalue across the probe's batches (one power
    iteration per batch, seeded start, Rayleigh-quotient stopping)."""
    values, conv, iters = [], [], []
    vector = None
    for i, batch in enumerate(probe.batches):
        with _FlatLoss(model, mask, batch) as p:
            start = p.project(
                rng_for(probe.seed, "power", str(i)).standard_normal(p.n))
            if float(np.linalg.norm(start)) == 0.0:
                raise DiagnosticsError("probe direction vanished under mask")

            def matvec(u):
                return p.project(hvp_flat(p.grad, p.w0, u, probe.eps))

            res = power_iteration(matvec, p.n, start=start,
                                  max_iters=probe.max_iters, tol=probe.tol)
            values.append(res.value)
            conv.append(res.converged)
            iters.append(res.iters)
            vector = p.unpack(res.vector)
    return EigResult(value=float(np.mean(values)), per_batch=values,
                     converged=conv, iters=iters, vector=vector)


# -- perturbation curves -----------------------------------------------------

def perturb_curve_flat(loss_fn, w0, direction, distances):
    d = np.asarray(direction, dtype=np.float64)
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        raise DiagnosticsError("zero direction: ||v|| must be > 0")
    dhat = d / nd
    w0 = np.asarray(w0, dtype=np.float64)
    return [(float(t), float(loss_fn(w0 + float(t) * dhat)))
            for t in distances]


def eig_perturb_curve(model, data, distances, direction, mask=None):
    """(t, loss) of the hard-CE loss at w + t * dhat. The direction usually
    comes from top_eigenvalue's final iterate; t = 0 reproduces the
    unperturbed loss exactly."""
    with _FlatLoss(model, mask, data) as p:
        d = p.project(p.pack(direction))
        return perturb_curve_flat(p.loss, p.w0, d, distances)


# -- loss landscapes ---------------------------------------------------------

def _filter_normalize(d, w):
    """Rescale each filter of direction `d` to the norm of the matching
    filter of `w`: leading-axis slices for conv blocks, output columns for
    dense blocks, elementwise magnitudes for rank-1 blocks."""
    d = np.asarray(d, dtype=np.float64).copy()
    w = np.asarray(w, dtype=np.float64)
    if d.ndim >= 3:
        for i in range(d.shape[0]):
            nd = np.linalg.norm(d[i])
            d[i] = d[i] * (np.linalg.norm(w[i]) / nd) if nd > 0 else 0.0
    elif d.ndim == 2:
        for j in range(d.shape[1]):
            nd = np.linalg.norm(d[:, j])
            d[:, j] = d[:, j] * (np.linalg.norm(w[:, j]) / nd) if nd > 0 else 0.0
    else:
        d = np.sign(d) * np.abs(w)
    return d


def make_weight_directions(model, seed=0, mask=None):
    """Two seeded random filter-normalized weight-space directions, zeroed
    at masked coordinates."""
    dirs = []
    for k in ("d1", "d2"):
        d = {}
        for name, p in model.params.items():
            rng = rng_for(seed, "landscape", k, name)
            d[name] = _filter_normalize(rng.standard_normal(p.data.shape),
                                        p.data)
        if mask is not None:
            for n in mask.prunable:
                if n in d:
                    d[n] = d[n] * mask.blocks[n]
        dirs.append(d)
    return dirs[0], dirs[1]


def _check_not_parallel(u, v):
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DiagnosticsError("landscape direction has zero norm")
    if abs(float(u @ v)) / (nu * nv) > 1.0 - 1e-9:
        raise DiagnosticsError("landscape directions are parallel")


def _offsets(extent, resolution):
    if resolution == 1:
        return np.array([0.0])
    return np.linspace(-extent, extent, resolution)


def grid_losses(loss_fn, a_offsets, b_offsets, clamp):
    """Dense evaluation of loss_fn(a, b), clamped from above everywhere
    except the center (zero-offset) cell, which keeps its raw value."""
    m = np.empty((len(a_offsets), len(b_offsets)))
    for i, a in enumerate(a_offsets):
        for j, b in enumerate(b_offsets):
            m[i, j] = loss_fn(float(a), float(b))
    out = np.minimum(m, clamp)
    ci, cj = len(a_offsets) // 2, len(b_offsets) // 2
    if len(a_offsets) % 2 and len(b_offsets) % 2 \
            and a_offsets[ci] == 0.0 and b_offsets[cj] == 0.0:
        out[ci, cj] = m[ci, cj]
    return out


def landscape(model, data, grid, mask=None, seed=0):
    """resolution x resolution loss matrix around the current weights
    (weight mode) or around the batch inputs (input mode)."""
    x, y = data
    aoffs = _offsets(grid.extents[0], grid.resolution)
    boffs = _offsets(grid.extents[1], grid.resolution)
    if grid.mode == "weight":
        if grid.directions is None:
            d1, d2 = make_weight_directions(model, seed, mask)
        else:
            d1, d2 = grid.directions
        with _FlatLoss(model, mask, data) as p:
            f1 = p.project(p.pack(d1))
            f2 = p.project(p.pack(d2))
            _check_not_parallel(f1, f2)
            return grid_losses(
                lambda a, b: p.loss(p.w0 + a * f1 + b * f2), aoffs, boffs,
                grid.clamp)
    if grid.directions is None:
        d1, d2 = (rng_for(seed, "landscape-input", k)
                  .standard_normal(np.shape(x)) for k in ("d1", "d2"))
    else:
        d1, d2 = (np.asarray(d, dtype=np.float64) for d in grid.directions)
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 / np.linalg.norm(d2)
    _check_not_parallel(d1.reshape(-1), d2.reshape(-1))
    x64 = np.asarray(x, dtype=np.float64)
    with _FlatLoss(model, mask, data) as p:
        return grid_losses(
            lambda a, b: p.loss_at_input(x64 + a * d1 + b * d2), aoffs, boffs,
            grid.clamp)


def probe_batches(x, y, n=DEFAULT_PROBE_BATCHES, batch_size=128, seed=0):
    """n seeded random batches for curvature probes, each drawn without
    replacement from (x, y)."""
    if n < 1:
        raise DiagnosticsError("need at least one probe batch")
    out = []
    size = min(batch_size, x.shape[0])
    for i in range(n):
        idx = rng_for(seed, "probe-batch", str(i)).choice(
            x.shape[0], size=size, replace=False)
        out.append((x[idx], y[idx]))
    return out
