"""Model assembly: residual backbones, the regularised classification head,
freeze/unfreeze control, and parameter accounting.

A ModelGraph is an ordered list of LayerSpec entries. The parameterised-
layer index list used by the freeze policies counts, in topological order:
each conv as one entry, each dense as one entry, and each batch-norm gamma
and beta as one entry apiece (running statistics are buffers, not
parameters). Head layers sit at the tail of that list.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AlreadyHasHead, InputTooSmall, KOutOfRange, ShapeMismatch
from .layers import (
    BatchNormState,
    ConvParams,
    DenseParams,
    DropoutParams,
    ResidualBlockParams,
    batchnorm_forward,
    conv2d_forward,
    dense_forward,
    dropout,
    global_avg_pool,
    leaky_relu,
    max_pool2d,
    relu,
    residual_block_forward,
    softmax,
)
from .tensor import DTYPES, Tensor

HEAD_LAYER_KINDS = (
    "gap", "dense", "bn", "leaky_relu", "dropout",
    "dense", "bn", "leaky_relu", "dropout", "dense", "softmax",
)


@dataclass
class HeadSpec:
    widths: tuple = (128, 64)
    dropout_rates: tuple = (0.3, 0.4)
    leaky_alpha: float = 0.01
    classes: int = 41

    def __post_init__(self):
        if len(self.widths) != len(self.dropout_rates):
            raise ValueError("widths and dropout_rates must pair up")
        if any(w <= 0 for w in self.widths):
            raise ValueError("head widths must be positive")
        if any(not 0 <= r < 1 for r in self.dropout_rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class LayerSpec:
    kind: str  # conv | bn | leaky_relu | dropout | gap | maxpool | dense | softmax | block
    params: object = None
    config: dict = field(default_factory=dict)
    in_head: bool = False


@dataclass
class ParamGroup:
    name: str
    tensors: dict  # full tensor name -> Tensor
    in_head: bool

    @property
    def trainable(self):
        return all(t.requires_grad for t in self.tensors.values())

    @property
    def count(self):
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class ModelGraph:
    layers: list
    input_spec: tuple | None = None  # (C, H, W)
    class_count: int | None = None
    dtype: str = "f32"
    feature_channels: int | None = None
    descriptor: dict | None = None

    def forward(self, x, mode="infer"):
        if self.input_spec is not None and x.ndim == 4:
            if tuple(x.shape[1:]) != tuple(self.input_spec):
                raise ShapeMismatch(
                    f"input {tuple(x.shape[1:])} != model input {tuple(self.input_spec)}"
                )
        h = x
        for layer in self.layers:
            h = _forward_layer(h, layer, mode)
        return h

    def parameter_groups(self):
        groups = []
        for i, layer in enumerate(self.layers):
            groups.extend(_layer_groups(f"layer{i:02d}", layer))
        return groups

    def named_tensors(self):
        """All persistent state: parameters plus batch-norm running stats."""
        out = {}
        for i, layer in enumerate(self.layers):
            _collect_tensors(f"layer{i:02d}", layer, out)
        return out

    def parameters(self):
        out = []
        for g in self.parameter_groups():
            out.extend(g.tensors.values())
        return out

    def reseed_dropout(self, seed, epoch):
        for i, layer in enumerate(self.layers):
            if layer.kind == "dropout":
                layer.params.rng_state = np.random.default_rng(
                    np.random.SeedSequence([int(seed), int(epoch), i])
                )

    def has_head(self):
        return any(layer.in_head for layer in self.layers)


def _forward_layer(h, layer, mode):
    kind = layer.kind
    if kind == "conv":
        return conv2d_forward(h, layer.params)
    if kind == "bn":
        layer.params.mode = mode
        return batchnorm_forward(h, layer.params)
    if kind == "relu":
        return relu(h)
    if kind == "leaky_relu":
        return leaky_relu(h, layer.config["alpha"])
    if kind == "dropout":
        layer.params.mode = mode
        return dropout(h, layer.params)
    if kind == "gap":
        return global_avg_pool(h)
    if kind == "maxpool":
        return max_pool2d(
            h,
            layer.config["window"],
            layer.config["stride"],
            layer.config.get("padding", (0, 0)),
        )
    if kind == "dense":
        return dense_forward(h, layer.params)
    if kind == "softmax":
        return softmax(h)
    if kind == "block":
        return residual_block_forward(h, layer.params, mode)
    raise ValueError(f"unknown layer kind {kind!r}")


def _conv_groups(name, p, in_head):
    tensors = {f"{name}.kernel": p.kernel}
    if p.bias is not None:
        tensors[f"{name}.bias"] = p.bias
    return [ParamGroup(name, tensors, in_head)]


def _bn_groups(name, s, in_head):
    return [
        ParamGroup(f"{name}.gamma", {f"{name}.gamma": s.gamma}, in_head),
        ParamGroup(f"{name}.beta", {f"{name}.beta": s.beta}, in_head),
    ]


def _layer_groups(name, layer):
    kind, p, in_head = layer.kind, layer.params, layer.in_head
    if kind == "conv":
        return _conv_groups(f"{name}.conv", p, in_head)
    if kind == "bn":
        return _bn_groups(f"{name}.bn", p, in_head)
    if kind == "dense":
        return [
            ParamGroup(
                f"{name}.dense",
                {f"{name}.dense.weight": p.weight, f"{name}.dense.bias": p.bias},
                in_head,
            )
        ]
    if kind == "block":
        groups = []
        groups += _conv_groups(f"{name}.conv1", p.conv1, in_head)
        groups += _bn_groups(f"{name}.bn1", p.bn1, in_head)
        groups += _conv_groups(f"{name}.conv2", p.conv2, in_head)
        groups += _bn_groups(f"{name}.bn2", p.bn2, in_head)
        if p.conv3 is not None:
            groups += _conv_groups(f"{name}.conv3", p.conv3, in_head)
            groups += _bn_groups(f"{name}.bn3", p.bn3, in_head)
        if p.proj_conv is not None:
            groups += _conv_groups(f"{name}.proj_conv", p.proj_conv, in_head)
            groups += _bn_groups(f"{name}.proj_bn", p.proj_bn, in_head)
        return groups
    return []


def _collect_tensors(name, layer, out):
    for g in _layer_groups(name, layer):
        out.update(g.tensors)
    # batch-norm running statistics are buffers: persisted but never trained
    def add_bn_buffers(bn_name, s):
        out[f"{bn_name}.running_mean"] = s.running_mean
        out[f"{bn_name}.running_var"] = s.running_var

    if layer.kind == "bn":
        add_bn_buffers(f"{name}.bn", layer.params)
    elif layer.kind == "block":
        p = layer.params
        add_bn_buffers(f"{name}.bn1", p.bn1)
        add_bn_buffers(f"{name}.bn2", p.bn2)
        if p.bn3 is not None:
            add_bn_buffers(f"{name}.bn3", p.bn3)
        if p.proj_bn is not None:
            add_bn_buffers(f"{name}.proj_bn", p.proj_bn)


# ---------------------------------------------------------------------------
# construction


def _he_conv(rng, out_c, in_c, kh, kw, dtype, stride=(1, 1), padding="same", bias=False):
    std = float(np.sqrt(2.0 / (in_c * kh * kw)))
    kernel = (rng.standard_normal((out_c, in_c, kh, kw)) * std).astype(dtype)
    b = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(
        Tensor(kernel, requires_grad=True), b, stride=stride, padding=padding
    )


def _bn_state(c, dtype):
    return BatchNormState(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        running_mean=Tensor(np.zeros(c, dtype=dtype)),
        running_var=Tensor(np.ones(c, dtype=dtype)),
    )


def _he_dense(rng, out_dim, in_dim, dtype):
    std = float(np.sqrt(2.0 / in_dim))
    w = (rng.standard_normal((out_dim, in_dim)) * std).astype(dtype)
    return DenseParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
    )


def _basic_block(rng, in_c, out_c, stride, dtype):
    strided = stride != 1
    return ResidualBlockParams(
        kind="basic",
        conv1=_he_conv(rng, out_c, in_c, 3, 3, dtype, stride=(stride, stride)),
        bn1=_bn_state(out_c, dtype),
        conv2=_he_conv(rng, out_c, out_c, 3, 3, dtype),
        bn2=_bn_state(out_c, dtype),
        proj_conv=_he_conv(rng, out_c, in_c, 1, 1, dtype, stride=(stride, stride))
        if (strided or in_c != out_c)
        else None,
        proj_bn=_bn_state(out_c, dtype) if (strided or in_c != out_c) else None,
    )


def _bottleneck_block(rng, in_c, mid_c, out_c, stride, dtype):
    strided = stride != 1
    return ResidualBlockParams(
        kind="bottleneck",
        conv1=_he_conv(rng, mid_c, in_c, 1, 1, dtype),
        bn1=_bn_state(mid_c, dtype),
        conv2=_he_conv(rng, mid_c, mid_c, 3, 3, dtype, stride=(stride, stride)),
        bn2=_bn_state(mid_c, dtype),
        conv3=_he_conv(rng, out_c, mid_c, 1, 1, dtype),
        bn3=_bn_state(out_c, dtype),
        proj_conv=_he_conv(rng, out_c, in_c, 1, 1, dtype, stride=(stride, stride))
        if (strided or in_c != out_c)
        else None,
        proj_bn=_bn_state(out_c, dtype) if (strided or in_c != out_c) else None,
    )


def build_backbone(preset, input_spec, seed=0, dtype="f32"):
    """Headless feature extractor.

    * "resnet50": 7x7/2 stem, 3x3/2 max-pool, bottleneck stages (3,4,6,3)
      with widths 64/128/256/512 (outputs x4); needs spatial dims >= 32.
    * "mini": 3x3 stem and 3 stages of 2 basic blocks at widths 16/32/64,
      sized so desk-scale tests run in minutes; needs spatial dims >= 16.

    Both stop before pooling; feature_channels records the output width.
    """
    c, h, w = input_spec
    np_dtype = DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype).type
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    layers = []

    if preset == "resnet50":
        if min(h, w) < 32:
            raise InputTooSmall("resnet50 preset needs spatial dims >= 32")
        layers.append(
            LayerSpec("conv", _he_conv(rng, 64, c, 7, 7, np_dtype, stride=(2, 2)))
        )
        layers.append(LayerSpec("bn", _bn_state(64, np_dtype)))
        layers.append(LayerSpec("relu"))
        layers.append(
            LayerSpec(
                "maxpool",
                config={"window": (3, 3), "stride": (2, 2), "padding": (1, 1)},
            )
        )
        in_c = 64
        for stage, (blocks, mid) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512))):
            out_c = mid * 4
            for b in range(blocks):
                stride = 2 if (stage > 0 and b == 0) else 1
                layers.append(
                    LayerSpec(
                        "block",
                        _bottleneck_block(rng, in_c, mid, out_c, stride, np_dtype),
                    )
                )
                in_c = out_c
        feature_channels = in_c
    elif preset == "mini":
        if min(h, w) < 16:
            raise InputTooSmall("mini preset needs spatial dims >= 16")
        layers.append(LayerSpec("conv", _he_conv(rng, 16, c, 3, 3, np_dtype)))
        layers.append(LayerSpec("bn", _bn_state(16, np_dtype)))
        layers.append(LayerSpec("relu"))
        in_c = 16
        for stage, width in enumerate((16, 32, 64)):
            for b in range(2):
                stride = 2 if (stage > 0 and b == 0) else 1
                layers.append(
                    LayerSpec("block", _basic_block(rng, in_c, width, stride, np_dtype))
                )
                in_c = width
        feature_channels = in_c
    else:
        raise ValueError(f"unknown preset {preset!r}")

    return ModelGraph(
        layers=layers,
        input_spec=tuple(input_spec),
        class_count=None,
        dtype=dtype if isinstance(dtype, str) else np.dtype(dtype).name,
        feature_channels=feature_channels,
        descriptor={
            "preset": preset,
            "input": list(input_spec),
            "seed": int(seed),
            "dtype": dtype,
            "head": None,
        },
    )


def attach_head(backbone, h=None, seed=0):
    """Append the classification head: GAP, then for each (width, rate) a
    dense/BN/LeakyReLU/dropout stack, then the class dense and softmax."""
    if backbone.has_head() or backbone.class_count is not None:
        raise AlreadyHasHead("model already carries a classification head")
    if h is None:
        h = HeadSpec()
    np_dtype = DTYPES[backbone.dtype]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    feat = backbone.feature_channels
    if feat is None:
        raise ShapeMismatch("backbone does not declare feature channels")

    layers = [LayerSpec("gap", in_head=True)]
    in_dim = feat
    for width, rate in zip(h.widths, h.dropout_rates):
        layers.append(
            LayerSpec("dense", _he_dense(rng, width, in_dim, np_dtype), in_head=True)
        )
        layers.append(LayerSpec("bn", _bn_state(width, np_dtype), in_head=True))
        layers.append(
            LayerSpec("leaky_relu", config={"alpha": h.leaky_alpha}, in_head=True)
        )
        layers.append(LayerSpec("dropout", DropoutParams(rate=rate), in_head=True))
        in_dim = width
    layers.append(
        LayerSpec("dense", _he_dense(rng, h.classes, in_dim, np_dtype), in_head=True)
    )
    layers.append(LayerSpec("softmax", in_head=True))

    backbone.layers.extend(layers)
    backbone.class_count = h.classes
    if backbone.descriptor is not None:
        backbone.descriptor["head"] = {
            "widths": list(h.widths),
            "dropout_rates": list(h.dropout_rates),
            "leaky_alpha": h.leaky_alpha,
            "classes": h.classes,
            "seed": int(seed),
        }
    return backbone


def strip_head(model):
    """Drop head layers (for head replacement during fine-tuning)."""
    model.layers = [l for l in model.layers if not l.in_head]
    model.class_count = None
    if model.descriptor is not None:
        model.descriptor["head"] = None
    return model


def build_from_descriptor(desc):
    model = build_backbone(
        desc["preset"], tuple(desc["input"]), seed=desc.get("seed", 0),
        dtype=desc.get("dtype", "f32"),
    )
    head = desc.get("head")
    if head is not None:
        attach_head(
            model,
            HeadSpec(
                widths=tuple(head["widths"]),
                dropout_rates=tuple(head["dropout_rates"]),
                leaky_alpha=head["leaky_alpha"],
                classes=head["classes"],
            ),
            seed=head.get("seed", 0),
        )
    return model


# ---------------------------------------------------------------------------
# trainability policies


def set_trainable(model, policy, k=None):
    """Set per-group trainable flags.

    Policies: freeze_all | unfreeze_all | head_only | unfreeze_last_k (with
    k counting groups from the tail of the parameterised-layer index list,
    head groups included at the end).
    """
    groups = model.parameter_groups()
    if policy == "freeze_all":
        flags = [False] * len(groups)
    elif policy == "unfreeze_all":
        flags = [True] * len(groups)
    elif policy == "head_only":
        flags = [g.in_head for g in groups]
    elif policy == "unfreeze_last_k":
        if k is None or not 0 <= k <= len(groups):
            raise KOutOfRange(
                f"k must lie in [0, {len(groups)}], got {k}"
            )
        cut = len(groups) - k
        flags = [i >= cut for i in range(len(groups))]
    else:
        raise ValueError(f"unknown policy {policy!r}")
    for g, flag in zip(groups, flags):
        for t in g.tensors.values():
            t.requires_grad = flag
    return model


def parameter_summary(model):
    groups = model.parameter_groups()
    per_layer = [
        {"name": g.name, "params": g.count, "trainable": g.trainable} for g in groups
    ]
    trainable = sum(e["params"] for e in per_layer if e["trainable"])
    total = sum(e["params"] for e in per_layer)
    return {
        "total": total,
        "trainable": trainable,
        "frozen": total - trainable,
        "per_layer": per_layer,
    }
