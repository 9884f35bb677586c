"""Declarative architectures: MLPs and mini residual conv nets.

An ArchSpec is an ordered list of layer descriptors; each layer consumes the
previous layer's output, except residual_add which also pulls the output of
an earlier named layer. Skip injection is a spec-to-spec transform that adds
identity residual_add edges around shape-preserving 3x3 convs (after the BN,
before the activation) and never touches parameters.

Parameter blocks are named "<layer>.w" / "<layer>.b" / "<layer>.gamma" etc.;
these names key pruning masks and checkpoints, so they must stay stable.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Graph, Tensor
from .rand import rng_for

ACTIVATION_KINDS = ("relu", "swish", "mish")

# threshold used by activation_sparsity when none is given: ReLU produces
# exact zeros, smooth activations only near-zeros
DEFAULT_SPARSITY_THRESHOLD = {"relu": 0.0, "swish": 1e-6, "mish": 1e-6}


class ArchError(ValueError):
    """Architecture validation failure."""


@dataclass
class Layer:
    kind: str                 # conv2d | batchnorm | dense | activation |
    name: str                 # residual_add | pool | flatten
    out_ch: int = 0           # conv2d
    k: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = False        # conv2d / dense
    units: int = 0            # dense
    act: str = ""             # activation
    from_name: str = ""       # residual_add: source layer output
    project: bool = False     # residual_add: 1x1 conv + BN on the skip path
    block: str = ""           # residual-block membership tag


@dataclass
class ArchSpec:
    name: str
    input_shape: tuple        # (C, H, W) or (F,)
    num_classes: int
    activation_kind: str = "relu"
    injected_skips: bool = False
    layers: list = field(default_factory=list)

    def to_dict(self):
        defaults = Layer(kind="", name="")
        out = {"name": self.name, "input_shape": list(self.input_shape),
               "num_classes": self.num_classes,
               "activation_kind": self.activation_kind,
               "injected_skips": self.injected_skips,
               "layers": []}
        for l in self.layers:
            d = {"kind": l.kind, "name": l.name}
            for f in ("out_ch", "k", "stride", "pad", "bias", "units", "act",
                      "from_name", "project", "block"):
                v = getattr(l, f)
                if v != getattr(defaults, f):
                    d[f] = v
            out["layers"].append(d)
        return out

    @staticmethod
    def from_dict(d):
        layers = [Layer(**{k: v for k, v in ld.items()}) for ld in d["layers"]]
        return ArchSpec(name=d["name"], input_shape=tuple(d["input_shape"]),
                        num_classes=d["num_classes"],
                        activation_kind=d["activation_kind"],
                        injected_skips=d["injected_skips"], layers=layers)

    def arch_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _infer_shapes(spec):
    """Output shape of every layer, keyed by name. Raises ArchError on
    incompatibilities, reporting both shapes for bad residual edges."""
    shapes = {}
    cur = tuple(spec.input_shape)
    names = set()
    prev_kind = None
    for i, l in enumerate(spec.layers):
        if l.name in names:
            raise ArchError(f"duplicate layer name {l.name}")
        names.add(l.name)
        if l.kind == "conv2d":
            if len(cur) != 3:
                raise ArchError(f"{l.name}: conv2d needs (C,H,W) input, got {cur}")
            c, h, w = cur
            oh = (h + 2 * l.pad - l.k) // l.stride + 1
            ow = (w + 2 * l.pad - l.k) // l.stride + 1
            if oh <= 0 or ow <= 0:
                raise ArchError(f"{l.name}: empty output for input {cur}")
            nxt = spec.layers[i + 1] if i + 1 < len(spec.layers) else None
            if l.bias and nxt is not None and nxt.kind == "batchnorm":
                raise ArchError(f"{l.name}: conv feeding batchnorm must be bias-free")
            cur = (l.out_ch, oh, ow)
        elif l.kind == "batchnorm":
            if len(cur) not in (1, 3):
                raise ArchError(f"{l.name}: batchnorm input {cur}")
        elif l.kind == "dense":
            if len(cur) != 1:
                raise ArchError(f"{l.name}: dense needs flat input, got {cur}")
            cur = (l.units,)
        elif l.kind == "activation":
            if l.act not in ACTIVATION_KINDS:
                raise ArchError(f"{l.name}: unknown activation {l.act!r}")
        elif l.kind == "residual_add":
            if l.from_name not in shapes:
                raise ArchError(f"{l.name}: unknown source {l.from_name!r}")
            src = shapes[l.from_name]
            if not l.project:
                if src != cur:
                    raise ArchError(
                        f"{l.name}: identity skip endpoints differ: "
                        f"source {l.from_name} is {src}, target is {cur}")
            else:
                if len(src) != 3 or len(cur) != 3:
                    raise ArchError(f"{l.name}: projection needs conv shapes, "
                                    f"got {src} -> {cur}")
                if src[1] % cur[1] or src[2] % cur[2]:
                    raise ArchError(f"{l.name}: projection stride not integral "
                                    f"for {src} -> {cur}")
        elif l.kind == "pool":
            if len(cur) != 3:
                raise ArchError(f"{l.name}: pool needs (C,H,W), got {cur}")
            cur = (cur[0],)
        elif l.kind == "flatten":
            cur = (int(np.prod(cur)),)
        else:
            raise ArchError(f"{l.name}: unknown layer kind {l.kind!r}")
        shapes[l.name] = cur
        prev_kind = l.kind
    del prev_kind
    return shapes


def validate_spec(spec):
    if spec.activation_kind not in ACTIVATION_KINDS:
        raise ArchError(f"unknown activation kind {spec.activation_kind!r}")
    shapes = _infer_shapes(spec)
    if not spec.layers or spec.layers[-1].kind != "dense":
        raise ArchError("last layer must be the dense classification head")
    if shapes[spec.layers[-1].name] != (spec.num_classes,):
        raise ArchError("head width differs from num_classes")
    return shapes


class Model:
    """An ArchSpec plus its named parameter blocks and BN running state."""

    def __init__(self, spec, params, bn_state):
        self.spec = spec
        self.params = params          # name -> Tensor
        self.bn_state = bn_state      # name -> Tensor (mean / var)

    def param_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def weight_block_names(self):
        """Names of conv/dense weight matrices (the prunable blocks)."""
        return [n for n in self.params if n.endswith(".w")]

    def copy(self):
        return Model(self.spec,
                     {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.bn_state.items()})

    def state_dict(self):
        out = {}
        for k, v in self.params.items():
            out[k] = v.data
        for k, v in self.bn_state.items():
            out[k] = v.data
        return out

    def load_state(self, named):
        for k in self.params:
            if k not in named:
                raise KeyError(f"missing parameter block {k}")
            if named[k].shape != self.params[k].data.shape:
                raise ValueError(f"{k}: shape {named[k].shape} != "
                                 f"{self.params[k].data.shape}")
            self.params[k].data = np.asarray(named[k], dtype=np.float32).copy()
        for k in self.bn_state:
            if k not in named:
                raise KeyError(f"missing BN state {k}")
            self.bn_state[k].data = np.asarray(named[k], dtype=np.float32).copy()


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def build_model(spec, seed):
    """He-initialized model, deterministic in (spec, seed)."""
    shapes = validate_spec(spec)
    params = {}
    bn_state = {}
    cur = tuple(spec.input_shape)
    for l in spec.layers:
        rng = rng_for(seed, "init", spec.name, l.name)
        if l.kind == "conv2d":
            fan_in = cur[0] * l.k * l.k
            params[f"{l.name}.w"] = Tensor(_he(rng, (l.out_ch, cur[0], l.k, l.k),
                                               fan_in))
            if l.bias:
                params[f"{l.name}.b"] = Tensor(np.zeros(l.out_ch))
        elif l.kind == "batchnorm":
            c = cur[0]
            params[f"{l.name}.gamma"] = Tensor(np.ones(c))
            params[f"{l.name}.beta"] = Tensor(np.zeros(c))
            bn_state[f"{l.name}.mean"] = Tensor(np.zeros(c))
            bn_state[f"{l.name}.var"] = Tensor(np.ones(c))
        elif l.kind == "dense":
            fan_in = cur[0]
            params[f"{l.name}.w"] = Tensor(_he(rng, (cur[0], l.units), fan_in))
            if l.bias:
                params[f"{l.name}.b"] = Tensor(np.zeros(l.units))
        elif l.kind == "residual_add" and l.project:
            src = shapes[l.from_name]
            tgt = shapes[l.name]
            fan_in = src[0]
            params[f"{l.name}.proj.w"] = Tensor(_he(rng, (tgt[0], src[0], 1, 1),
                                                    fan_in))
            params[f"{l.name}.proj.gamma"] = Tensor(np.ones(tgt[0]))
            params[f"{l.name}.proj.beta"] = Tensor(np.zeros(tgt[0]))
            bn_state[f"{l.name}.proj.mean"] = Tensor(np.zeros(tgt[0]))
            bn_state[f"{l.name}.proj.var"] = Tensor(np.ones(tgt[0]))
        cur = shapes[l.name]
    return Model(spec, params, bn_state)


def build_graph(model, include_loss=False):
    """Autograd graph computing logits from input "x". Returns
    (graph, logits_node). The graph's param leaves alias the model's Tensors,
    so in-place weight updates are visible without rebuilding."""
    spec = model.spec
    shapes = validate_spec(spec)
    g = Graph()
    node = g.input("x")
    outputs = {}
    cur = tuple(spec.input_shape)
    for l in spec.layers:
        if l.kind == "conv2d":
            w = g.param(f"{l.name}.w", model.params[f"{l.name}.w"])
            node = g.conv2d(node, w, stride=l.stride, pad=l.pad)
            if l.bias:
                b = g.param(f"{l.name}.b", model.params[f"{l.name}.b"])
                node = g.add(node, g.reshape(b, (1, l.out_ch, 1, 1)))
        elif l.kind == "batchnorm":
            gamma = g.param(f"{l.name}.gamma", model.params[f"{l.name}.gamma"])
            beta = g.param(f"{l.name}.beta", model.params[f"{l.name}.beta"])
            node = g.batchnorm(node, gamma, beta,
                               model.bn_state[f"{l.name}.mean"],
                               model.bn_state[f"{l.name}.var"])
        elif l.kind == "dense":
            w = g.param(f"{l.name}.w", model.params[f"{l.name}.w"])
            node = g.matmul(node, w)
            if l.bias:
                b = g.param(f"{l.name}.b", model.params[f"{l.name}.b"])
                node = g.add(node, b)
        elif l.kind == "activation":
            node = getattr(g, l.act)(node)
        elif l.kind == "residual_add":
            skip = outputs[l.from_name]
            if l.project:
                src = shapes[l.from_name]
                tgt = shapes[l.name]
                stride = src[1] // tgt[1]
                w = g.param(f"{l.name}.proj.w", model.params[f"{l.name}.proj.w"])
                skip = g.conv2d(skip, w, stride=stride, pad=0)
                gamma = g.param(f"{l.name}.proj.gamma",
                                model.params[f"{l.name}.proj.gamma"])
                beta = g.param(f"{l.name}.proj.beta",
                               model.params[f"{l.name}.proj.beta"])
                skip = g.batchnorm(skip, gamma, beta,
                                   model.bn_state[f"{l.name}.proj.mean"],
                                   model.bn_state[f"{l.name}.proj.var"])
            node = g.add(node, skip)
        elif l.kind == "pool":
            node = g.global_avg_pool(node)
        elif l.kind == "flatten":
            if len(cur) != 1:
                node = g.flatten(node)
        outputs[l.name] = node
        cur = shapes[l.name]
    return g, node


def activation(kind, x):
    """Elementwise activation on a plain Tensor (no graph)."""
    if kind not in ACTIVATION_KINDS:
        raise ArchError(f"unknown activation kind {kind!r}")
    v = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if kind == "relu":
        return Tensor(np.maximum(v, 0))
    if kind == "swish":
        return Tensor(v / (1.0 + np.exp(-v)))
    sp = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return Tensor(v * np.tanh(sp))


def inject_skips(spec):
    """Add identity residual_add edges around every shape-preserving 3x3
    conv inside a residual block: the edge runs from the conv's input to
    just after the conv's batchnorm, before the activation. Convs that
    change shape (stride 2 or channel growth) are left alone. No parameters
    are added or renamed."""
    if spec.injected_skips:
        raise ArchError("skips already injected")
    shapes = _infer_shapes(spec)
    new_layers = []
    pending = []  # (insert_after_name, Layer)
    prev_name = None  # output feeding the next layer; None = model input
    for i, l in enumerate(spec.layers):
        if (l.kind == "conv2d" and l.block and l.k == 3 and prev_name is not None
                and shapes.get(prev_name) == shapes[l.name]):
            # identity edge lands after this conv's BN if one follows
            if i + 1 < len(spec.layers) and spec.layers[i + 1].kind == "batchnorm":
                after = spec.layers[i + 1].name
            else:
                after = l.name
            pending.append((after, Layer(kind="residual_add",
                                         name=f"{l.name}.inj",
                                         from_name=prev_name, block=l.block)))
        prev_name = l.name
    insert_after = {}
    for after, layer in pending:
        insert_after.setdefault(after, []).append(layer)
    for l in spec.layers:
        new_layers.append(replace(l))
        for extra in insert_after.get(l.name, ()):
            new_layers.append(extra)
    out = replace(spec, injected_skips=True, layers=new_layers)
    validate_spec(out)
    return out


def activation_sparsity(model, batch, threshold=None):
    """Fraction of activation-layer outputs with |value| <= threshold,
    per layer, measured in inference mode over the whole batch."""
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if threshold is None:
        threshold = DEFAULT_SPARSITY_THRESHOLD[model.spec.activation_kind]
    g, logits = build_graph(model)
    # any scalar root works; only the activation values are read
    g.mark_loss(g.mean(logits))
    g.forward({"x": x}, training=False)
    # activation nodes appear in the graph in layer order
    act_layers = [l for l in model.spec.layers if l.kind == "activation"]
    act_nodes = [n for n in g.nodes if n.op in ("relu", "swish", "mish")]
    if len(act_layers) != len(act_nodes):
        raise RuntimeError("activation layer/node mismatch")
    result = {}
    for l, n in zip(act_layers, act_nodes):
        v = g.value_of(n)
        result[l.name] = float((np.abs(v) <= threshold).mean())
    return result


# -- the two desk-scale architectures ---------------------------------------

def mlp_300_100(input_shape=(1, 8, 8), num_classes=10, activation_kind="relu"):
    """LeNet-style fully connected net: 300 and 100 hidden units."""
    layers = [Layer(kind="flatten", name="in.flat")]
    widths = [300, 100]
    for i, wth in enumerate(widths, start=1):
        layers.append(Layer(kind="dense", name=f"fc{i}", units=wth, bias=True))
        layers.append(Layer(kind="activation", name=f"fc{i}.act",
                            act=activation_kind))
    layers.append(Layer(kind="dense", name="head", units=num_classes, bias=True))
    return ArchSpec(name="mlp-300-100", input_shape=tuple(input_shape),
                    num_classes=num_classes, activation_kind=activation_kind,
                    layers=layers)


def miniresnet8(input_shape=(1, 8, 8), num_classes=10, activation_kind="relu"):
    """Stem conv then three residual blocks (widths 16/32/64, stride-2 at
    each block entry, two 3x3 convs per block, projection on the block
    skip), global average pool, dense head."""
    a = activation_kind
    L = [
        Layer(kind="conv2d", name="stem.conv", out_ch=16, k=3, stride=1, pad=1),
        Layer(kind="batchnorm", name="stem.bn"),
        Layer(kind="activation", name="stem.act", act=a),
    ]
    prev_out = "stem.act"
    for bi, width in enumerate((16, 32, 64), start=1):
        b = f"b{bi}"
        L += [
            Layer(kind="conv2d", name=f"{b}.conv1", out_ch=width, k=3,
                  stride=2, pad=1, block=b),
            Layer(kind="batchnorm", name=f"{b}.bn1", block=b),
            Layer(kind="activation", name=f"{b}.act1", act=a, block=b),
            Layer(kind="conv2d", name=f"{b}.conv2", out_ch=width, k=3,
                  stride=1, pad=1, block=b),
            Layer(kind="batchnorm", name=f"{b}.bn2", block=b),
            Layer(kind="residual_add", name=f"{b}.skip", from_name=prev_out,
                  project=True, block=b),
            Layer(kind="activation", name=f"{b}.act2", act=a, block=b),
        ]
        prev_out = f"{b}.act2"
    L += [
        Layer(kind="pool", name="pool"),
        Layer(kind="dense", name="head", units=num_classes, bias=True),
    ]
    return ArchSpec(name="miniresnet-8", input_shape=tuple(input_shape),
                    num_classes=num_classes, activation_kind=activation_kind,
                    layers=L)


ARCH_FACTORIES = {"mlp-300-100": mlp_300_100, "miniresnet-8": miniresnet8}


def make_arch(name, input_shape, num_classes, activation_kind="relu",
              injected_skips=False):
    if name not in ARCH_FACTORIES:
        raise ArchError(f"unknown architecture {name!r} "
                        f"(have: {sorted(ARCH_FACTORIES)})")
    spec = ARCH_FACTORIES[name](input_shape=input_shape,
                                num_classes=num_classes,
                                activation_kind=activation_kind)
    if injected_skips:
        spec = inject_skips(spec)
    return spec
