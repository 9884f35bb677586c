"""Dense float32 tensors and a small reverse-mode autodiff graph.

The graph is declarative: ops append topologically ordered nodes, leaves are
either named inputs (bound per evaluation), parameter leaves (views onto a
model's Tensor blocks), or constants. `forward_eval` runs the node list in
order and retains every intermediate value; `backward_grad` walks it in
reverse and accumulates gradients into the trainable leaves.

Numerics: default evaluation is float32 end to end. Batch-norm statistics and
an optional whole-graph float64 mode (used by the finite-difference checker
and the curvature probes, which would otherwise drown in float32 cancellation)
are the only places 64-bit appears.

Concurrency: a graph instance holds its activations on its own nodes, so a
single instance must never be evaluated by two threads at once. Distinct
instances are independent.
"""

import numpy as np

BN_EPS = 1e-10  # small enough that bias-free conv->BN stays scale-invariant
BN_MOMENTUM = 0.1


class GraphError(ValueError):
    """Graph construction or evaluation rejected."""


class ShapeMismatch(GraphError):
    """Incompatible operand shapes; carries the offending node id."""

    def __init__(self, node_id, message):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class GraphStateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class Tensor:
    """Dense row-major float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:  # keep 0-d; ascontiguousarray would 1-d it
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def copy(self):
        t = Tensor(self.data.copy())
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _unbroadcast(grad, shape):
    # Sum gradient over axes that numpy broadcasting expanded.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


class Node:
    __slots__ = ("id", "op", "src", "attrs", "name", "tensor", "trainable",
                 "const", "value", "grad", "saved")

    def __init__(self, node_id, op, src=(), attrs=None):
        self.id = node_id
        self.op = op
        self.src = tuple(src)
        self.attrs = attrs or {}
        self.name = None        # leaves only
        self.tensor = None      # param leaves: backing Tensor
        self.trainable = False
        self.const = None       # const leaves
        self.value = None
        self.grad = None
        self.saved = None

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Graph:
    """Topologically ordered op records with a single scalar loss root."""

    def __init__(self):
        self.nodes = []
        self.loss_id = None
        self.training = True
        self.update_stats = True
        self.output_finite = True
        self._forwarded = False
        self._dtype = np.float32

    # -- construction ------------------------------------------------------

    def _new(self, op, src=(), attrs=None):
        for s in src:
            if s.id >= len(self.nodes) or self.nodes[s.id] is not s:
                raise GraphError("source node does not belong to this graph")
        node = Node(len(self.nodes), op, [s.id for s in src], attrs)
        self.nodes.append(node)
        return node

    def input(self, name):
        node = self._new("input")
        node.name = name
        return node

    def param(self, name, tensor, trainable=True):
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        node = self._new("param")
        node.name = name
        node.tensor = tensor
        node.trainable = trainable
        return node

    def const(self, value):
        node = self._new("const")
        node.const = np.asarray(value, dtype=np.float32)
        return node

    def add(self, a, b):
        return self._new("add", (a, b))

    def sub(self, a, b):
        return self._new("sub", (a, b))

    def mul(self, a, b):
        return self._new("mul", (a, b))

    def neg(self, a):
        return self._new("neg", (a,))

    def scale(self, a, alpha):
        return self._new("scale", (a,), {"alpha": float(alpha)})

    def matmul(self, a, b):
        return self._new("matmul", (a, b))

    def conv2d(self, x, w, stride=1, pad=0):
        return self._new("conv2d", (x, w), {"stride": int(stride), "pad": int(pad)})

    def batchnorm(self, x, gamma, beta, running_mean, running_var,
                  momentum=BN_MOMENTUM):
        if not isinstance(running_mean, Tensor) or not isinstance(running_var, Tensor):
            raise GraphError("running statistics must be Tensors")
        return self._new("batchnorm", (x, gamma, beta),
                         {"rm": running_mean, "rv": running_var,
                          "momentum": float(momentum)})

    def relu(self, a):
        return self._new("relu", (a,))

    def swish(self, a):
        return self._new("swish", (a,))

    def mish(self, a):
        return self._new("mish", (a,))

    def softmax(self, a, axis=-1):
        return self._new("softmax", (a,), {"axis": int(axis)})

    def log_softmax(self, a, axis=-1):
        return self._new("log_softmax", (a,), {"axis": int(axis)})

    def sum(self, a, axis=None):
        return self._new("sum", (a,), {"axis": axis})

    def mean(self, a, axis=None):
        return self._new("mean", (a,), {"axis": axis})

    def reshape(self, a, shape):
        return self._new("reshape", (a,), {"shape": tuple(shape)})

    def flatten(self, a):
        return self._new("flatten", (a,))

    def global_avg_pool(self, a):
        return self._new("global_avg_pool", (a,))

    def mark_loss(self, node):
        if self.loss_id is not None and self.loss_id != node.id:
            raise GraphError("loss root already designated")
        self.loss_id = node.id

    # -- introspection -----------------------------------------------------

    def value_of(self, node):
        if node.value is None:
            raise GraphStateError("node has no value; run forward first")
        return node.value

    def trainable_leaves(self):
        return [n for n in self.nodes if n.op == "param" and n.trainable]

    def param_leaf(self, name):
        for n in self.nodes:
            if n.op == "param" and n.name == name:
                return n
        raise KeyError(name)

    # -- evaluation --------------------------------------------------------

    def forward(self, inputs=None, training=True, update_stats=None, dtype=np.float32):
        """Evaluate the loss root; retains every intermediate for backward."""
        if self.loss_id is None:
            raise GraphError("no loss root designated")
        inputs = inputs or {}
        self.training = training
        self.update_stats = training if update_stats is None else update_stats
        self._dtype = dtype
        for node in self.nodes:
            node.grad = None
            node.saved = None
            _FORWARD[node.op](self, node, inputs)
        root = self.nodes[self.loss_id].value
        self.output_finite = bool(np.all(np.isfinite(root)))
        self._forwarded = True
        return Tensor(np.asarray(root, dtype=np.float32))

    def backward(self):
        """Populate gradients of the loss root w.r.t. trainable leaves."""
        if not self._forwarded:
            raise GraphStateError("backward before forward")
        root = self.nodes[self.loss_id]
        if np.ndim(root.value) != 0:
            raise GraphError("loss root is not scalar")
        for node in self.nodes:
            node.grad = None
        root.grad = np.array(1.0, dtype=self._dtype)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            back = _BACKWARD.get(node.op)
            if back is not None:
                back(self, node)
        grads = {}
        for leaf in self.trainable_leaves():
            g = leaf.grad
            if g is None:
                g = np.zeros(leaf.tensor.shape, dtype=self._dtype)
            if self._dtype is np.float32:
                leaf.tensor.grad = np.asarray(g, dtype=np.float32)
            grads[leaf.name] = Tensor(np.asarray(g, dtype=np.float32))
        return grads

    def relu_input_signs(self):
        """Sign pattern of every ReLU pre-activation from the last forward."""
        signs = []
        for node in self.nodes:
            if node.op == "relu":
                signs.append(np.sign(self.nodes[node.src[0]].value))
        return signs


def forward_eval(graph, inputs=None, training=True, update_stats=None,
                 dtype=np.float32):
    return graph.forward(inputs, training=training, update_stats=update_stats,
                         dtype=dtype)


def backward_grad(graph):
    return graph.backward()


# -- forward implementations ------------------------------------------------

def _accum(node, grad):
    if node.grad is None:
        node.grad = np.zeros(np.shape(node.value), dtype=grad.dtype)
    node.grad = node.grad + grad


def _fw_input(g, node, inputs):
    if node.name not in inputs:
        raise GraphError(f"input '{node.name}' not bound")
    val = inputs[node.name]
    if isinstance(val, Tensor):
        val = val.data
    node.value = np.asarray(val, dtype=g._dtype)


def _fw_param(g, node, inputs):
    node.value = np.asarray(node.tensor.data, dtype=g._dtype)


def _fw_const(g, node, inputs):
    node.value = np.asarray(node.const, dtype=g._dtype)


def _srcs(g, node):
    return [g.nodes[i].value for i in node.src]


def _check_broadcast(g, node, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(node.id, f"{node.op} operands {a.shape} vs {b.shape}")


def _fw_add(g, node, inputs):
    a, b = _srcs(g, node)
    _check_broadcast(g, node, a, b)
    node.value = a + b


def _bw_add(g, node):
    a, b = (g.nodes[i] for i in node.src)
    _accum(a, _unbroadcast(node.grad, np.shape(a.value)))
    _accum(b, _unbroadcast(node.grad, np.shape(b.value)))


def _fw_sub(g, node, inputs):
    a, b = _srcs(g, node)
    _check_broadcast(g, node, a, b)
    node.value = a - b


def _bw_sub(g, node):
    a, b = (g.nodes[i] for i in node.src)
    _accum(a, _unbroadcast(node.grad, np.shape(a.value)))
    _accum(b, _unbroadcast(-node.grad, np.shape(b.value)))


def _fw_mul(g, node, inputs):
    a, b = _srcs(g, node)
    _check_broadcast(g, node, a, b)
    node.value = a * b


def _bw_mul(g, node):
    a, b = (g.nodes[i] for i in node.src)
    _accum(a, _unbroadcast(node.grad * b.value, np.shape(a.value)))
    _accum(b, _unbroadcast(node.grad * a.value, np.shape(b.value)))


def _fw_neg(g, node, inputs):
    (a,) = _srcs(g, node)
    node.value = -a


def _bw_neg(g, node):
    _accum(g.nodes[node.src[0]], -node.grad)


def _fw_scale(g, node, inputs):
    (a,) = _srcs(g, node)
    node.value = a * g._dtype(node.attrs["alpha"])


def _bw_scale(g, node):
    _accum(g.nodes[node.src[0]], node.grad * g._dtype(node.attrs["alpha"]))


def _fw_matmul(g, node, inputs):
    a, b = _srcs(g, node)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(node.id, f"matmul {a.shape} @ {b.shape}")
    node.value = a @ b


def _bw_matmul(g, node):
    a, b = (g.nodes[i] for i in node.src)
    _accum(a, node.grad @ b.value.T)
    _accum(b, a.value.T @ node.grad)


def conv_output_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride,
                                 j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _fw_conv2d(g, node, inputs):
    x, w = _srcs(g, node)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(node.id, f"conv2d needs 4-D operands, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(node.id, f"conv2d channels {x.shape[1]} vs {w.shape[1]}")
    stride, pad = node.attrs["stride"], node.attrs["pad"]
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch(node.id, f"conv2d output extent empty for input {x.shape}")
    w2 = w.reshape(cout, cin * kh * kw)
    # (cout, ckk) @ (ckk, n*p) in a single BLAS call
    flat = cols.transpose(1, 0, 2).reshape(cin * kh * kw, n * oh * ow)
    out = (w2 @ flat).reshape(cout, n, oh * ow).transpose(1, 0, 2)
    node.value = np.ascontiguousarray(out.reshape(n, cout, oh, ow))
    node.saved = (cols, oh, ow)


def _bw_conv2d(g, node):
    xn, wn = (g.nodes[i] for i in node.src)
    x, w = xn.value, wn.value
    stride, pad = node.attrs["stride"], node.attrs["pad"]
    cols, oh, ow = node.saved
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    gout = node.grad.reshape(n, cout, oh * ow)
    dw = np.einsum("nop,nkp->ok", gout, cols, optimize=True)
    _accum(wn, dw.reshape(w.shape))
    w2 = w.reshape(cout, cin * kh * kw)
    dcols = np.einsum("ok,nop->nkp", w2, gout, optimize=True)
    dcols = dcols.reshape(n, cin, kh, kw, oh, ow)
    dx_pad = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=node.grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dx_pad[:, :, i:i + stride * oh:stride,
                   j:j + stride * ow:stride] += dcols[:, :, i, j]
    if pad:
        dx = dx_pad[:, :, pad:-pad, pad:-pad]
    else:
        dx = dx_pad
    _accum(xn, dx)


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ValueError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")


def _bn_param_shape(x, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(x.shape))


def _fw_batchnorm(g, node, inputs):
    x, gamma, beta = _srcs(g, node)
    try:
        axes = _bn_axes(x)
    except ValueError as exc:
        raise ShapeMismatch(node.id, str(exc))
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(node.id, f"batchnorm affine shape {gamma.shape} vs channels {c}")
    pshape = _bn_param_shape(x, axes)
    rm, rv = node.attrs["rm"], node.attrs["rv"]
    # the whole normalization runs in float64 and casts once at the end:
    # with float32 internals a power-of-two weight rescale of the upstream
    # conv would not cancel bit-cleanly through (x - mean) * inv_std
    x64 = x.astype(np.float64)
    if g.training:
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        if g.update_stats:
            m = node.attrs["momentum"]
            rm.data = np.asarray((1 - m) * rm.data.astype(np.float64) + m * mean,
                                 dtype=np.float32)
            rv.data = np.asarray((1 - m) * rv.data.astype(np.float64) + m * var,
                                 dtype=np.float32)
    else:
        mean = rm.data.astype(np.float64)
        var = rv.data.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x64 - mean.reshape(pshape)) * inv_std.reshape(pshape)
    out = (gamma.astype(np.float64).reshape(pshape) * xhat
           + beta.astype(np.float64).reshape(pshape))
    node.value = out.astype(g._dtype)
    node.saved = (xhat.astype(g._dtype), inv_std.astype(g._dtype), axes, pshape)


def _bw_batchnorm(g, node):
    xn, gn, bn = (g.nodes[i] for i in node.src)
    xhat, inv_std, axes, pshape = node.saved
    gy = node.grad
    gamma = gn.value
    _accum(gn, (gy * xhat).sum(axis=axes))
    _accum(bn, gy.sum(axis=axes))
    gxhat = gy * gamma.reshape(pshape)
    if g.training:
        count = np.prod([xhat.shape[i] for i in axes])
        mean_g = gxhat.mean(axis=axes, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
        dx = inv_std.reshape(pshape) * (gxhat - mean_g - xhat * mean_gx)
        del count
    else:
        dx = gxhat * inv_std.reshape(pshape)
    _accum(xn, dx)


def _fw_relu(g, node, inputs):
    (x,) = _srcs(g, node)
    node.value = np.maximum(x, 0)


def _bw_relu(g, node):
    xn = g.nodes[node.src[0]]
    # derivative at exactly 0 is 0 (fixed tie-break for determinism)
    _accum(xn, node.grad * (xn.value > 0))


def _fw_swish(g, node, inputs):
    (x,) = _srcs(g, node)
    s = _sigmoid(x)
    node.value = x * s
    node.saved = s


def _bw_swish(g, node):
    xn = g.nodes[node.src[0]]
    s = node.saved
    _accum(xn, node.grad * (s + xn.value * s * (1 - s)))


def _fw_mish(g, node, inputs):
    (x,) = _srcs(g, node)
    t = np.tanh(_softplus(x))
    node.value = x * t
    node.saved = t


def _bw_mish(g, node):
    xn = g.nodes[node.src[0]]
    x = xn.value
    t = node.saved
    _accum(xn, node.grad * (t + x * (1 - t * t) * _sigmoid(x)))


def _fw_softmax(g, node, inputs):
    (x,) = _srcs(g, node)
    ax = node.attrs["axis"]
    z = x - x.max(axis=ax, keepdims=True)
    e = np.exp(z)
    node.value = e / e.sum(axis=ax, keepdims=True)


def _bw_softmax(g, node):
    xn = g.nodes[node.src[0]]
    ax = node.attrs["axis"]
    y = node.value
    inner = (node.grad * y).sum(axis=ax, keepdims=True)
    _accum(xn, y * (node.grad - inner))


def _fw_log_softmax(g, node, inputs):
    (x,) = _srcs(g, node)
    ax = node.attrs["axis"]
    z = x - x.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    node.value = z - lse


def _bw_log_softmax(g, node):
    xn = g.nodes[node.src[0]]
    ax = node.attrs["axis"]
    soft = np.exp(node.value)
    _accum(xn, node.grad - soft * node.grad.sum(axis=ax, keepdims=True))


def _fw_sum(g, node, inputs):
    (x,) = _srcs(g, node)
    node.value = x.sum(axis=node.attrs["axis"])


def _bw_sum(g, node):
    xn = g.nodes[node.src[0]]
    ax = node.attrs["axis"]
    shape = np.shape(xn.value)
    grad = node.grad
    if ax is not None:
        grad = np.expand_dims(grad, ax)
    _accum(xn, np.broadcast_to(grad, shape).copy())


def _fw_mean(g, node, inputs):
    (x,) = _srcs(g, node)
    node.value = x.mean(axis=node.attrs["axis"])


def _bw_mean(g, node):
    xn = g.nodes[node.src[0]]
    ax = node.attrs["axis"]
    shape = np.shape(xn.value)
    count = np.prod(shape) if ax is None else shape[ax]
    grad = node.grad
    if ax is not None:
        grad = np.expand_dims(grad, ax)
    _accum(xn, np.broadcast_to(grad, shape) / count)


def _fw_reshape(g, node, inputs):
    (x,) = _srcs(g, node)
    try:
        node.value = x.reshape(node.attrs["shape"])
    except ValueError:
        raise ShapeMismatch(node.id, f"cannot reshape {x.shape} to {node.attrs['shape']}")


def _bw_reshape(g, node):
    xn = g.nodes[node.src[0]]
    _accum(xn, node.grad.reshape(np.shape(xn.value)))


def _fw_flatten(g, node, inputs):
    (x,) = _srcs(g, node)
    node.value = x.reshape(x.shape[0], -1)


def _bw_flatten(g, node):
    xn = g.nodes[node.src[0]]
    _accum(xn, node.grad.reshape(np.shape(xn.value)))


def _fw_gap(g, node, inputs):
    (x,) = _srcs(g, node)
    if x.ndim != 4:
        raise ShapeMismatch(node.id, f"global_avg_pool needs 4-D input, got {x.shape}")
    node.value = x.mean(axis=(2, 3))


def _bw_gap(g, node):
    xn = g.nodes[node.src[0]]
    n, c, h, w = np.shape(xn.value)
    _accum(xn, np.broadcast_to(node.grad[:, :, None, None], (n, c, h, w)) / (h * w))


_FORWARD = {
    "input": _fw_input, "param": _fw_param, "const": _fw_const,
    "add": _fw_add, "sub": _fw_sub, "mul": _fw_mul, "neg": _fw_neg,
    "scale": _fw_scale, "matmul": _fw_matmul, "conv2d": _fw_conv2d,
    "batchnorm": _fw_batchnorm, "relu": _fw_relu, "swish": _fw_swish,
    "mish": _fw_mish, "softmax": _fw_softmax, "log_softmax": _fw_log_softmax,
    "sum": _fw_sum, "mean": _fw_mean, "reshape": _fw_reshape,
    "flatten": _fw_flatten, "global_avg_pool": _fw_gap,
}

_BACKWARD = {
    "add": _bw_add, "sub": _bw_sub, "mul": _bw_mul, "neg": _bw_neg,
    "scale": _bw_scale, "matmul": _bw_matmul, "conv2d": _bw_conv2d,
    "batchnorm": _bw_batchnorm, "relu": _bw_relu, "swish": _bw_swish,
    "mish": _bw_mish, "softmax": _bw_softmax, "log_softmax": _bw_log_softmax,
    "sum": _bw_sum, "mean": _bw_mean, "reshape": _bw_reshape,
    "flatten": _bw_flatten, "global_avg_pool": _bw_gap,
}

OP_KINDS = sorted(set(_BACKWARD))


def grad_check(graph, inputs=None, eps=1e-4, max_coords=None, seed=0,
               training=True):
    """Max relative error between backward and central finite differences.

    Runs the graph in float64 so the difference quotient is not swamped by
    float32 cancellation. Coordinates whose +/-eps evaluations flip any ReLU
    pre-activation sign sit within eps of a kink and are skipped.
    """
    inputs = inputs or {}
    graph.forward(inputs, training=training, update_stats=False, dtype=np.float64)
    analytic = {name: np.asarray(g.data, dtype=np.float64)
                for name, g in graph.backward().items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in graph.trainable_leaves():
        # float64 shadow so the +/-eps steps are exact, not rounded to the
        # float32 grid (which would contaminate the difference quotient)
        saved = leaf.tensor.data
        shadow = saved.astype(np.float64)
        leaf.tensor.data = shadow
        flat = shadow.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        try:
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                graph.forward(inputs, training=training, update_stats=False,
                              dtype=np.float64)
                plus = float(graph.nodes[graph.loss_id].value)
                signs_plus = graph.relu_input_signs()
                flat[i] = orig - eps
                graph.forward(inputs, training=training, update_stats=False,
                              dtype=np.float64)
                minus = float(graph.nodes[graph.loss_id].value)
                signs_minus = graph.relu_input_signs()
                flat[i] = orig
                if any(not np.array_equal(a, b)
                       for a, b in zip(signs_plus, signs_minus)):
                    continue
                numeric = (plus - minus) / (2 * eps)
                a = analytic[leaf.name].reshape(-1)[i]
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
                worst = max(worst, err)
        finally:
            leaf.tensor.data = saved
    # leave the graph evaluated at the unperturbed point
    graph.forward(inputs, training=training, update_stats=False, dtype=np.float64)
    return worst
