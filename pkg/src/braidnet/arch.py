"""Architecture specs: strand module stacks plus a per-gap crossing schedule.

A strand is a stack of modules (depth 0 .. D-1). Gap ``g`` sits between depth
``g`` and ``g + 1``; a crossing scheduled there mixes the depth-``g + 1`` blocks
of the two strands involved. Strand ids are 0-based and equal the class the
strand detects; positions in ``position_trace`` are 1-based like braid
positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import braid
from .braid import BraidWord
from .nn import conv_output_size

DNN = "dnn"
NDNN = "ndnn"
BRAIDNET = "braidnet"
RANDOM = "random"
KINDS = (DNN, NDNN, BRAIDNET, RANDOM)

LAYER_KINDS = ("conv", "maxpool", "dense", "relu", "sigmoid", "softmax")

DEFAULT_CHANNELS = (8, 16)
DEFAULT_HIDDEN = (128, 64)
KERNEL = 5
POOL = 2


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    units: int | None = None  # conv filters or dense width
    kernel: int | None = None  # conv kernel / pool window
    stride: int | None = None  # pool stride
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchError(f"unknown layer kind {self.kind!r}")

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv", "dense")


@dataclass(frozen=True)
class ModuleDesc:
    layers: tuple[LayerDesc, ...]

    @property
    def param_layer(self) -> LayerDesc:
        (layer,) = [l for l in self.layers if l.parametric]
        return layer


def conv_module(filters, kernel=KERNEL, padding=0, pool=POOL) -> ModuleDesc:
    return ModuleDesc((
        LayerDesc("conv", units=filters, kernel=kernel, padding=padding),
        LayerDesc("relu"),
        LayerDesc("maxpool", kernel=pool, stride=pool),
    ))


def dense_module(units, activation="relu") -> ModuleDesc:
    return ModuleDesc((LayerDesc("dense", units=units), LayerDesc(activation)))


def infer_shapes(input_shape, modules) -> list[tuple[int, ...]]:
    """Per-sample output shape of every module; raises ArchError on a broken chain."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for depth, module in enumerate(modules):
        for layer in module.layers:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ArchError(f"conv at depth {depth} needs (C, H, W) input, got {shape}")
                h, w = (conv_output_size(s, layer.kernel, layer.padding) for s in shape[1:])
                if h < 1 or w < 1:
                    raise ArchError(f"input {shape} too small for {layer.kernel}x{layer.kernel} conv at depth {depth}")
                shape = (layer.units, h, w)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or min(shape[1:]) < layer.kernel:
                    raise ArchError(f"input {shape} too small for stride-{layer.stride} pool at depth {depth}")
                shape = (shape[0],) + tuple((s - layer.kernel) // layer.stride + 1 for s in shape[1:])
            elif layer.kind == "dense":
                shape = (layer.units,)
        out.append(shape)
    return out


def fan_in(input_shape, modules, depth: int) -> int:
    prev = tuple(input_shape) if depth == 0 else infer_shapes(input_shape, modules)[depth - 1]
    layer = modules[depth].param_layer
    if layer.kind == "conv":
        return prev[0] * layer.kernel**2
    return int(np.prod(prev))


def param_shapes(input_shape, modules) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """``(weight_shape, bias_shape)`` per depth for one strand."""
    shapes = []
    prev = tuple(input_shape)
    for module, out in zip(modules, infer_shapes(input_shape, modules)):
        layer = module.param_layer
        if layer.kind == "conv":
            shapes.append(((layer.units, prev[0], layer.kernel, layer.kernel), (layer.units,)))
        else:
            shapes.append(((int(np.prod(prev)), layer.units), (layer.units,)))
        prev = out
    return shapes


def strand_stack(input_shape, head_units=1, head="sigmoid", channels=DEFAULT_CHANNELS,
                 hidden=DEFAULT_HIDDEN, conv_padding=0) -> tuple[ModuleDesc, ...]:
    modules = (
        conv_module(channels[0], padding=conv_padding),
        conv_module(channels[1], padding=conv_padding),
        dense_module(hidden[0]),
        dense_module(hidden[1]),
        dense_module(head_units, head),
    )
    infer_shapes(input_shape, modules)
    return modules


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Crossing:
    gap: int
    under: int
    over: int

    def __post_init__(self):
        if self.under == self.over:
            raise ArchError(f"a strand cannot cross itself: {self}")


@dataclass(frozen=True)
class CrossingSchedule:
    gaps: tuple[tuple[Crossing, ...], ...]
    position_trace: tuple[tuple[int, ...], ...]

    @property
    def num_crossings(self) -> int:
        return sum(len(g) for g in self.gaps)

    def __iter__(self):
        return iter(self.gaps)


def empty_schedule(strands: int, num_gaps: int) -> CrossingSchedule:
    ident = tuple(range(1, strands + 1))
    return CrossingSchedule(tuple(() for _ in range(num_gaps)), tuple(ident for _ in range(num_gaps)))


def schedule_from_word(word: BraidWord, num_gaps: int, crossings_per_gap: int) -> CrossingSchedule:
    """Consume ``crossings_per_gap`` letters per gap, left to right, shallow gaps first."""
    if num_gaps < 0 or crossings_per_gap < 0:
        raise ArchError("gap and crossing counts must be non-negative")
    need = num_gaps * crossings_per_gap
    if len(word) < need:
        raise ArchError(f"word has {len(word)} letters, schedule needs {need}")
    m = word.strands
    at = list(range(m))  # at[p] = strand id at 0-based position p
    gaps, trace = [], []
    letters = iter(word.letters)
    for g in range(num_gaps):
        crossings = []
        for _ in range(crossings_per_gap):
            letter = next(letters)
            i = letter.index
            if not 1 <= i <= m - 1:
                raise ArchError(f"letter index {i} out of range for {m} strands")
            lower, upper = at[i - 1], at[i]
            if letter.sign == braid.PLUS:
                crossings.append(Crossing(g, under=lower, over=upper))
            else:
                crossings.append(Crossing(g, under=upper, over=lower))
            at[i - 1], at[i] = upper, lower
        gaps.append(tuple(crossings))
        trace.append(_positions(at))
    return CrossingSchedule(tuple(gaps), tuple(trace))


def _positions(at) -> tuple[int, ...]:
    pos = [0] * len(at)
    for p, s in enumerate(at):
        pos[s] = p + 1
    return tuple(pos)


def random_schedule(strands: int, num_gaps: int, crossings_per_gap: int, seed: int) -> CrossingSchedule:
    """Crossings between uniformly drawn ordered strand pairs; adjacency is ignored."""
    rng = np.random.default_rng(seed)
    pairs = [(a, b) for a in range(strands) for b in range(strands) if a != b]
    at = list(range(strands))
    gaps, trace = [], []
    for g in range(num_gaps):
        crossings = []
        for k in rng.integers(0, len(pairs), size=crossings_per_gap):
            under, over = pairs[k]
            crossings.append(Crossing(g, under=under, over=over))
            pu, po = at.index(under), at.index(over)
            at[pu], at[po] = over, under
        gaps.append(tuple(crossings))
        trace.append(_positions(at))
    return CrossingSchedule(tuple(gaps), tuple(trace))


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    num_classes: int
    strands: int
    input_shape: tuple[int, ...]
    modules: tuple[ModuleDesc, ...]
    schedule: CrossingSchedule
    source_word: BraidWord | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchError(f"unknown architecture kind {self.kind!r}")
        if self.kind == DNN and self.strands != 1:
            raise ArchError("a DNN has exactly one strand")
        if self.kind == NDNN and self.schedule.num_crossings:
            raise ArchError("an NDNN has no crossings")
        if len(self.schedule.gaps) != max(len(self.modules) - 1, 0):
            raise ArchError("schedule must have one gap per pair of consecutive modules")
        for gap in self.schedule.gaps:
            for c in gap:
                if not (0 <= c.under < self.strands and 0 <= c.over < self.strands):
                    raise ArchError(f"crossing {c} references a missing strand")
        infer_shapes(self.input_shape, self.modules)

    @property
    def depth(self) -> int:
        return len(self.modules)

    @property
    def num_gaps(self) -> int:
        return len(self.modules) - 1

    @property
    def total_crossings(self) -> int:
        return self.schedule.num_crossings

    def to_dict(self) -> dict:
        return arch_to_dict(self)

    def to_json(self) -> str:
        return json.dumps(arch_to_dict(self), indent=2, sort_keys=True)


def _check_input(input_shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3:
        raise ArchError(f"input shape must be (C, H, W) or (H, W), got {input_shape}")
    return shape


def build_braidnet(num_classes: int, input_shape, crossings_per_gap: int = 1, seed: int = 0,
                   **stack_opts) -> ArchSpec:
    if num_classes < 2:
        raise ArchError("a BraidNet needs at least two classes")
    input_shape = _check_input(input_shape)
    modules = strand_stack(input_shape, **stack_opts)
    gaps = len(modules) - 1
    word = braid.random_word(num_classes, gaps * crossings_per_gap, seed)
    return ArchSpec(BRAIDNET, num_classes, num_classes, input_shape, modules,
                    schedule_from_word(word, gaps, crossings_per_gap), word, seed)


def build_ndnn(num_classes: int, input_shape, **stack_opts) -> ArchSpec:
    if num_classes < 2:
        raise ArchError("an NDNN needs at least two classes")
    input_shape = _check_input(input_shape)
    modules = strand_stack(input_shape, **stack_opts)
    return ArchSpec(NDNN, num_classes, num_classes, input_shape, modules,
                    empty_schedule(num_classes, len(modules) - 1))


def build_dnn(num_classes: int, input_shape, **stack_opts) -> ArchSpec:
    if num_classes < 2:
        raise ArchError("a DNN classifier needs at least two classes")
    input_shape = _check_input(input_shape)
    modules = strand_stack(input_shape, head_units=num_classes, head="softmax", **stack_opts)
    return ArchSpec(DNN, num_classes, 1, input_shape, modules, empty_schedule(1, len(modules) - 1))


def build_random(num_classes: int, input_shape, crossings_per_gap: int = 1, seed: int = 0,
                 **stack_opts) -> ArchSpec:
    if num_classes < 2:
        raise ArchError("the Random baseline needs at least two classes")
    input_shape = _check_input(input_shape)
    modules = strand_stack(input_shape, **stack_opts)
    sched = random_schedule(num_classes, len(modules) - 1, crossings_per_gap, seed)
    return ArchSpec(RANDOM, num_classes, num_classes, input_shape, modules, sched, None, seed)


def build(kind: str, num_classes: int, input_shape, crossings_per_gap: int = 0, seed: int = 0,
          **stack_opts) -> ArchSpec:
    if kind == BRAIDNET:
        return build_braidnet(num_classes, input_shape, crossings_per_gap, seed, **stack_opts)
    if kind == RANDOM:
        return build_random(num_classes, input_shape, crossings_per_gap, seed, **stack_opts)
    if crossings_per_gap:
        raise ArchError(f"{kind} architectures take no crossings")
    if kind == NDNN:
        return build_ndnn(num_classes, input_shape, **stack_opts)
    if kind == DNN:
        return build_dnn(num_classes, input_shape, **stack_opts)
    raise ArchError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------- serialisation


def _layer_to_dict(l: LayerDesc) -> dict:
    d = {"kind": l.kind}
    for name in ("units", "kernel", "stride"):
        if getattr(l, name) is not None:
            d[name] = getattr(l, name)
    if l.padding:
        d["padding"] = l.padding
    return d


def arch_to_dict(spec: ArchSpec) -> dict:
    return {
        "kind": spec.kind,
        "num_classes": spec.num_classes,
        "strands": spec.strands,
        "input_shape": list(spec.input_shape),
        "modules": [[_layer_to_dict(l) for l in m.layers] for m in spec.modules],
        "schedule": {
            "gaps": [[{"gap": c.gap, "under": c.under, "over": c.over} for c in g]
                     for g in spec.schedule.gaps],
            "position_trace": [[p - 1 for p in t] for t in spec.schedule.position_trace],
        },
        "source_word": None if spec.source_word is None else braid.format_word(spec.source_word),
        "seed": spec.seed,
    }


def arch_from_dict(d: dict) -> ArchSpec:
    sched = d["schedule"]
    return ArchSpec(
        kind=d["kind"],
        num_classes=d["num_classes"],
        strands=d["strands"],
        input_shape=tuple(d["input_shape"]),
        modules=tuple(ModuleDesc(tuple(LayerDesc(**l) for l in m)) for m in d["modules"]),
        schedule=CrossingSchedule(
            tuple(tuple(Crossing(**c) for c in g) for g in sched["gaps"]),
            tuple(tuple(p + 1 for p in t) for t in sched["position_trace"]),
        ),
        source_word=None if d["source_word"] is None else braid.parse_word(d["source_word"]),
        seed=d.get("seed"),
    )


def arch_from_json(text: str) -> ArchSpec:
    return arch_from_dict(json.loads(text))
