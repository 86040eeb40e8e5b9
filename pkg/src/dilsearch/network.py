"""ResNet-18-topology segmentation networks as declarative specs.

A :class:`NetworkSpec` describes the stem, four stages of two "basic"
residual units, and a 1x1 classifier head followed by bilinear upsampling.
Parameters live outside the spec in a :class:`Parameters` container so a
spec can be converted (stride -> dilation) or searched without touching
weights.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import Tensor, add, batchnorm2d, bilinear_upsample, conv2d, maxpool2d, relu, weighted_sum

CHANNEL_PLANS = {
    "standard": (64, 128, 256, 512),
    "light_v1": (64, 128, 64, 64),
    "light_v2": (64, 128, 32, 32),
}
DEFAULT_STRIDES = (1, 2, 2, 2)
STEM_CHANNELS = 64
STEM_STRIDE = 4  # 7x7/2 conv then 3x3/2 max-pool
UNITS_PER_STAGE = 2
IN_CHANNELS = 3


@dataclass(frozen=True)
class UnitSpec:
    """One basic residual unit.

    ``first_dilation`` overrides the dilation of the first 3x3 conv; the
    dilated converter sets it on units whose stride it removed. ``orig_stride``
    remembers the stride such a unit had before conversion, which is why it
    keeps its projection shortcut.
    """

    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    has_projection: bool = False
    kind: str = "plain"
    first_dilation: Optional[int] = None
    orig_stride: Optional[int] = None
    candidates: tuple = ()

    @property
    def conv1_dilation(self):
        return self.dilation if self.first_dilation is None else self.first_dilation

    def validate(self):
        if self.dilation < 1 or self.conv1_dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        source_stride = self.stride if self.orig_stride is None else self.orig_stride
        needs_proj = source_stride != 1 or self.in_channels != self.out_channels
        if self.has_projection != needs_proj:
            raise ValueError(
                f"has_projection={self.has_projection} but stride={source_stride}, "
                f"channels {self.in_channels}->{self.out_channels}"
            )
        if self.kind not in ("plain", "gated"):
            raise ValueError(f"unknown unit kind {self.kind!r}")
        if self.kind == "gated":
            c = list(self.candidates)
            if not c or c != sorted(set(c)) or c[0] < 1:
                raise ValueError(f"gate candidates must be strictly increasing and >= 1, got {self.candidates}")


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    num_classes: int
    channel_plan: tuple
    stages: tuple
    head_upsample: int = 32
    converted: bool = False
    bn_stale: bool = False
    in_channels: int = IN_CHANNELS
    stem_channels: int = STEM_CHANNELS

    def units(self):
        """Yield ``(name, UnitSpec)`` in forward order."""
        for s, stage in enumerate(self.stages):
            for u, unit in enumerate(stage):
                yield f"layer{s + 1}.{u}", unit

    def unit(self, name):
        for n, u in self.units():
            if n == name:
                return u
        raise KeyError(name)

    def gated_units(self):
        return [n for n, u in self.units() if u.kind == "gated"]

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.stages) != 4 or any(len(s) != UNITS_PER_STAGE for s in self.stages):
            raise ValueError("expected 4 stages of 2 residual units")
        prev = self.stem_channels
        for name, u in self.units():
            u.validate()
            if u.in_channels != prev:
                raise ValueError(f"{name}: in_channels {u.in_channels} != previous out_channels {prev}")
            prev = u.out_channels
        if output_stride(self) != self.head_upsample:
            raise ValueError(f"head upsample {self.head_upsample} != output stride {output_stride(self)}")
        return self

    def with_units(self, updates):
        """Return a copy with units replaced by ``{name: UnitSpec}``."""
        stages = []
        for s, stage in enumerate(self.stages):
            stages.append(tuple(updates.get(f"layer{s + 1}.{u}", unit) for u, unit in enumerate(stage)))
        return replace(self, stages=tuple(stages))

    def to_dict(self):
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["stages"] = [[_unit_to_dict(u) for u in stage] for stage in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_plan"] = tuple(d["channel_plan"])
        d["stages"] = tuple(tuple(_unit_from_dict(u) for u in stage) for stage in d["stages"])
        return cls(**d)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _unit_to_dict(u):
    d = asdict(u)
    d["candidates"] = list(u.candidates)
    return d


def _unit_from_dict(d):
    d = dict(d)
    d["candidates"] = tuple(d.get("candidates", ()))
    return UnitSpec(**d)


def output_stride(spec, stages=None):
    """Input-to-feature-map downsampling after ``stages`` stages (all if None)."""
    s = STEM_STRIDE
    for stage in spec.stages[: len(spec.stages) if stages is None else stages]:
        for u in stage:
            s *= u.stride
    return s


def build_network(variant, num_classes):
    """Unconverted (output stride 32) spec for ``standard``, ``light_v1`` or ``light_v2``."""
    if variant not in CHANNEL_PLANS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(CHANNEL_PLANS)}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    plan = CHANNEL_PLANS[variant]
    stages = []
    cin = STEM_CHANNELS
    for cout, stride in zip(plan, DEFAULT_STRIDES):
        units = []
        for u in range(UNITS_PER_STAGE):
            s = stride if u == 0 else 1
            units.append(UnitSpec(cin, cout, s, 1, has_projection=(s != 1 or cin != cout)))
            cin = cout
        stages.append(tuple(units))
    return NetworkSpec(variant, num_classes, plan, tuple(stages)).validate()


# ------------------------------------------------------------------ parameters

@dataclass
class Parameters:
    """Trainable tensors plus BN running statistics, keyed by dotted names."""

    tensors: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def trainable(self):
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def copy(self):
        return Parameters(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype):
        return Parameters(
            {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def arrays(self):
        """Flat name -> array mapping (buffers prefixed with ``buffer:``)."""
        out = {k: t.data for k, t in self.tensors.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays):
        p = cls()
        for k, v in arrays.items():
            if k.startswith("buffer:"):
                p.buffers[k[len("buffer:"):]] = v
            else:
                p.tensors[k] = Tensor(v, requires_grad=True, name=k)
        return p


def _bn_shapes(prefix, c):
    return {f"{prefix}.weight": (c,), f"{prefix}.bias": (c,)}


def _residual_shapes(prefix, cin, cout):
    shapes = {f"{prefix}.conv1.weight": (cout, cin, 3, 3)}
    shapes.update(_bn_shapes(f"{prefix}.bn1", cout))
    shapes[f"{prefix}.conv2.weight"] = (cout, cout, 3, 3)
    shapes.update(_bn_shapes(f"{prefix}.bn2", cout))
    return shapes


def param_shapes(spec):
    """Name -> shape for every trainable tensor of ``spec``."""
    shapes = {"stem.conv.weight": (spec.stem_channels, spec.in_channels, 7, 7)}
    shapes.update(_bn_shapes("stem.bn", spec.stem_channels))
    for name, u in spec.units():
        if u.kind == "gated":
            for i in range(len(u.candidates)):
                shapes.update(_residual_shapes(f"{name}.branch{i}", u.in_channels, u.out_channels))
            shapes[f"{name}.gate.log_alpha"] = (len(u.candidates),)
        else:
            shapes.update(_residual_shapes(name, u.in_channels, u.out_channels))
        if u.has_projection:
            shapes[f"{name}.proj.conv.weight"] = (u.out_channels, u.in_channels, 1, 1)
            shapes.update(_bn_shapes(f"{name}.proj.bn", u.out_channels))
    cfinal = spec.stages[-1][-1].out_channels
    shapes["head.weight"] = (spec.num_classes, cfinal, 1, 1)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def parameter_count(spec, include_gates=True):
    return sum(
        int(np.prod(s)) for k, s in param_shapes(spec).items() if include_gates or not k.endswith("log_alpha")
    )


HEAD_INIT_STD = 0.01


def init_params(spec, seed=0, dtype=np.float32):
    """He-normal convs, unit BN scale / zero shift, small-variance head."""
    rng = np.random.default_rng(seed)
    p = Parameters()
    for name, shape in param_shapes(spec).items():
        if name == "head.weight":
            arr = rng.normal(0.0, HEAD_INIT_STD, shape)
        elif name.endswith("conv.weight") or name.endswith("conv1.weight") or name.endswith("conv2.weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif name.endswith(".weight"):  # BN scale
            arr = np.ones(shape)
        else:  # BN shift, head bias, gate logits
            arr = np.zeros(shape)
        p.tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        if (name.endswith(".weight") and len(shape) == 1):
            base = name[: -len(".weight")]
            p.buffers[f"{base}.running_mean"] = np.zeros(shape, dtype=dtype)
            p.buffers[f"{base}.running_var"] = np.ones(shape, dtype=dtype)
    return p


# ------------------------------------------------------------------ forward

@dataclass
class RunMode:
    """How batch norm behaves during a forward pass.

    ``collect``, when given, receives per-BN-layer float64 ``[sum, sumsq,
    count]`` of the BN inputs; it is used to recompute running statistics.
    """

    training: bool = False
    momentum: float = 0.1
    eps: float = 1e-5
    collect: Optional[dict] = None


INFER = RunMode()


def _bn(x, params, prefix, mode):
    if mode.collect is not None:
        d = x.data.astype(np.float64)
        acc = mode.collect.setdefault(prefix, [0.0, 0.0, 0])
        acc[0] = acc[0] + d.sum(axis=(0, 2, 3))
        acc[1] = acc[1] + (d * d).sum(axis=(0, 2, 3))
        acc[2] += d.shape[0] * d.shape[2] * d.shape[3]
    return batchnorm2d(
        x,
        params[f"{prefix}.weight"],
        params[f"{prefix}.bias"],
        params.buffers[f"{prefix}.running_mean"],
        params.buffers[f"{prefix}.running_var"],
        training=mode.training,
        momentum=mode.momentum,
        eps=mode.eps,
    )


def _residual_fn(x, params, prefix, stride, d1, d2, mode):
    h = conv2d(x, params[f"{prefix}.conv1.weight"], stride=stride, dilation=d1, padding=d1)
    h = relu(_bn(h, params, f"{prefix}.bn1", mode))
    h = conv2d(h, params[f"{prefix}.conv2.weight"], dilation=d2, padding=d2)
    return _bn(h, params, f"{prefix}.bn2", mode)


def _skip(x, unit, params, prefix, mode):
    if not unit.has_projection:
        return x
    s = conv2d(x, params[f"{prefix}.proj.conv.weight"], stride=unit.stride)
    return _bn(s, params, f"{prefix}.proj.bn", mode)


def _check_channels(x, unit):
    if x.ndim != 4 or x.shape[1] != unit.in_channels:
        raise ValueError(f"residual unit expects {unit.in_channels} input channels, got shape {x.shape}")


def residual_unit_forward(x, unit, params, prefix, mode=INFER):
    """``relu(skip(x) + F(x))`` with F = conv-BN-ReLU-conv-BN."""
    _check_channels(x, unit)
    if unit.kind != "plain":
        raise ValueError(f"{prefix} is a gated unit; use gated_unit_forward")
    f = _residual_fn(x, params, prefix, unit.stride, unit.conv1_dilation, unit.dilation, mode)
    return relu(add(_skip(x, unit, params, prefix, mode), f))


def gated_unit_forward(x, unit, params, prefix, gate, mode=INFER):
    """``relu(skip(x) + sum_i gate[i] * F_i(x))``, F_i dilated by ``candidates[i]``.

    ``gate`` is a 1-D tensor (a relaxed one-hot sample) with one weight per
    candidate dilation. The branches are reduced in candidate order.
    """
    _check_channels(x, unit)
    n = len(unit.candidates)
    if gate.ndim != 1 or gate.shape[0] != n:
        raise ValueError(f"{prefix}: gate has shape {gate.shape}, expected ({n},)")
    branches = [
        _residual_fn(x, params, f"{prefix}.branch{i}", unit.stride, d, d, mode) for i, d in enumerate(unit.candidates)
    ]
    return relu(add(_skip(x, unit, params, prefix, mode), weighted_sum(branches, gate)))


def check_input(spec, image):
    if image.ndim != 4 or image.shape[1] != spec.in_channels:
        raise ValueError(f"image must be (N,{spec.in_channels},H,W), got {image.shape}")
    m = output_stride(spec)
    h, w = image.shape[2:]
    if h % m or w % m:
        raise ValueError(f"image size {h}x{w} must be a multiple of {m} (the network's output stride)")


def forward_backbone(spec, params, image, mode=INFER, gates=None):
    """Return the feature map after the stem and after each of the 4 stages."""
    check_input(spec, image)
    x = conv2d(image, params["stem.conv.weight"], stride=2, padding=3)
    x = relu(_bn(x, params, "stem.bn", mode))
    x = maxpool2d(x, 3, 2, 1)
    feats = [x]
    for s, stage in enumerate(spec.stages):
        for u, unit in enumerate(stage):
            name = f"layer{s + 1}.{u}"
            if unit.kind == "gated":
                if gates is None or name not in gates:
                    raise ValueError(f"no gate weights supplied for gated unit {name}")
                x = gated_unit_forward(x, unit, params, name, gates[name], mode)
            else:
                x = residual_unit_forward(x, unit, params, name, mode)
        feats.append(x)
    return feats


def forward_segmentation(spec, params, image, mode=INFER, gates=None):
    """Per-pixel class logits at input resolution (no softmax)."""
    x = forward_backbone(spec, params, image, mode, gates)[-1]
    logits = conv2d(x, params["head.weight"], params["head.bias"])
    return bilinear_upsample(logits, spec.head_upsample)


# ------------------------------------------------------------------ analytic cost

@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # conv | bn
    cin: int
    cout: int
    kernel: int
    out_h: int
    out_w: int
    macs: int


def conv_macs(cout, cin, kh, kw, oh, ow):
    return cout * cin * kh * kw * oh * ow


def layer_costs(spec, input_shape):
    """Per-layer multiply-accumulate counts for one forward pass.

    Convs cost ``Cout*Cin*kh*kw*H'*W'``; batch norm costs one MAC per output
    element. Every branch of a gated unit is counted.
    """
    n, _, h, w = input_shape
    rows = []

    def conv(name, cin, cout, k, stride, dil, pad, hw):
        oh = (hw[0] + 2 * pad - dil * (k - 1) - 1) // stride + 1
        ow = (hw[1] + 2 * pad - dil * (k - 1) - 1) // stride + 1
        rows.append(LayerCost(name, "conv", cin, cout, k, oh, ow, n * conv_macs(cout, cin, k, k, oh, ow)))
        rows.append(LayerCost(name.replace("conv", "bn"), "bn", cout, cout, 1, oh, ow, n * cout * oh * ow))
        return oh, ow

    hw = conv("stem.conv", spec.in_channels, spec.stem_channels, 7, 2, 1, 3, (h, w))
    hw = ((hw[0] + 2 - 3) // 2 + 1, (hw[1] + 2 - 3) // 2 + 1)
    for name, u in spec.units():
        prefixes = [f"{name}.branch{i}" for i in range(len(u.candidates))] if u.kind == "gated" else [name]
        dils = list(u.candidates) if u.kind == "gated" else [u.dilation]
        for prefix, d in zip(prefixes, dils):
            d1 = d if u.kind == "gated" else u.conv1_dilation
            out = conv(f"{prefix}.conv1", u.in_channels, u.out_channels, 3, u.stride, d1, d1, hw)
            conv(f"{prefix}.conv2", u.out_channels, u.out_channels, 3, 1, d, d, out)
        if u.has_projection:
            conv(f"{name}.proj.conv", u.in_channels, u.out_channels, 1, u.stride, 1, 0, hw)
        hw = out
    cfinal = spec.stages[-1][-1].out_channels
    rows.append(LayerCost("head.conv", "conv", cfinal, spec.num_classes, 1, hw[0], hw[1],
                          n * conv_macs(spec.num_classes, cfinal, 1, 1, hw[0], hw[1])))
    return rows


def flop_count(spec, input_shape):
    """Total analytic multiply-accumulates of one forward pass."""
    return sum(r.macs for r in layer_costs(spec, input_shape))
