"""Runnable multi-strand networks and crossing-time weight mixing.

Parameters of all strands at one depth live in one stacked array (strand axis
first); a :class:`ParameterBlock` is a view onto one strand's slice, so mixing
and SGD mutate the same memory the batched forward pass reads.

At a crossing between depth ``g`` and ``g + 1`` the over-strand's depth-``g + 1``
weights and biases absorb a multiple of the under-strand's::

    W_under <- W_under
    W_over  <- W_over + alpha * W_under

All crossings of one gap read the pre-gap values, then write.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import arch as arch_mod
from . import nn
from .arch import ArchSpec, Crossing

EVAL_CHUNK = 256


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.01
    mix_interval: int = 1
    mix_at_inference: bool = False

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        if int(self.mix_interval) != self.mix_interval or self.mix_interval < 1:
            raise ValueError(f"mix_interval must be a positive integer, got {self.mix_interval}")


@dataclass
class ParameterBlock:
    strand: int
    depth: int
    weight: np.ndarray
    bias: np.ndarray


class BraidNetModel:
    def __init__(self, spec: ArchSpec, weights, biases):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=nn.DTYPE) for w in weights]
        self.biases = [np.asarray(b, dtype=nn.DTYPE) for b in biases]
        expected = arch_mod.param_shapes(spec.input_shape, spec.modules)
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise nn.ShapeError(f"expected {len(expected)} parameter depths")
        for d, (ws, bs) in enumerate(expected):
            if self.weights[d].shape != (spec.strands, *ws) or self.biases[d].shape != (spec.strands, *bs):
                raise nn.ShapeError(f"depth {d}: parameter shapes do not match the architecture")
        # strand s detects class s
        self.class_of_strand = tuple(range(spec.strands)) if spec.kind != arch_mod.DNN else None

    @classmethod
    def init(cls, spec: ArchSpec, seed: int) -> BraidNetModel:
        """Uniform fan-in init, one RNG stream per (seed, strand, depth)."""
        shapes = arch_mod.param_shapes(spec.input_shape, spec.modules)
        weights, biases = [], []
        for d, (ws, bs) in enumerate(shapes):
            fan = arch_mod.fan_in(spec.input_shape, spec.modules, d)
            w = np.empty((spec.strands, *ws))
            b = np.empty((spec.strands, *bs))
            for s in range(spec.strands):
                rng = np.random.default_rng([seed, s, d])
                w[s] = nn.init_uniform(rng, ws, fan)
                b[s] = nn.init_uniform(rng, bs, fan)
            weights.append(w)
            biases.append(b)
        return cls(spec, weights, biases)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def block(self, strand: int, depth: int) -> ParameterBlock:
        if not (0 <= depth < self.depth and 0 <= strand < self.spec.strands):
            raise KeyError(f"no parameter block for strand {strand} at depth {depth}")
        return ParameterBlock(strand, depth, self.weights[depth][strand], self.biases[depth][strand])

    def blocks(self):
        for d in range(self.depth):
            for s in range(self.spec.strands):
                yield self.block(s, d)

    def copy(self) -> BraidNetModel:
        return BraidNetModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    # ------------------------------------------------------------ forward

    def raw_forward(self, x, tape: nn.GradientTape | None = None) -> np.ndarray:
        """Stacked head output, shape ``(strands, B, head_units)``."""
        x = nn.as_tensor(x)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != self.spec.input_shape:
            raise nn.ShapeError(f"batch of shape {x.shape[1:]} does not match input {self.spec.input_shape}")
        h = x
        for d, module in enumerate(self.spec.modules):
            for layer in module.layers:
                if layer.kind == "conv":
                    h = nn.conv2d_forward(h, self.weights[d], self.biases[d], padding=layer.padding,
                                          tape=tape, key=d)
                elif layer.kind == "maxpool":
                    h = nn.maxpool_forward(h, layer.kernel, layer.stride, tape=tape)
                elif layer.kind == "dense":
                    if h.ndim > 3:
                        h = nn.flatten(h, 2, tape=tape)
                    h = nn.dense_forward(h, self.weights[d], self.biases[d], tape=tape, key=d)
                elif layer.kind == "relu":
                    h = nn.relu(h, tape=tape)
                elif layer.kind == "sigmoid":
                    h = nn.sigmoid(h, tape=tape)
                elif layer.kind == "softmax":
                    h = nn.softmax(h, tape=tape)
        return nn.check_finite(h, "network output")

    def forward(self, x, tape: nn.GradientTape | None = None) -> np.ndarray:
        """``(B, N)`` strand scores in (0, 1), or class probabilities for a DNN."""
        out = self.raw_forward(x, tape)
        if self.spec.kind == arch_mod.DNN:
            return out[0]
        return out[..., 0].T

    def loss_and_grad(self, out: np.ndarray, labels) -> tuple[float, np.ndarray]:
        """Mean loss and the gradient of the training objective w.r.t. ``out``.

        For strand networks the objective is the sum of per-strand one-vs-all
        losses, so each strand receives its own loss gradient unscaled.
        """
        y = _labels(labels, self.spec.num_classes)
        if self.spec.kind == arch_mod.DNN:
            return nn.ce_loss(out, y), nn.ce_grad(out, y)
        targets = (y[:, None] == np.asarray(self.class_of_strand)[None, :]).astype(nn.DTYPE)
        loss = nn.bce_loss(out, targets)
        grad = nn.bce_grad(out, targets) * out.shape[1]
        return loss, grad

    def gradients(self, x, labels) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        tape = nn.GradientTape()
        out = self.forward(x, tape)
        loss, g = self.loss_and_grad(out, labels)
        g_raw = g[None] if self.spec.kind == arch_mod.DNN else g.T[..., None]
        grads = tape.backward(g_raw)
        dw = [grads[d][0] for d in range(self.depth)]
        db = [grads[d][1] for d in range(self.depth)]
        return loss, dw, db

    def objective(self, x, labels) -> float:
        """Sum of strand losses (DNN: cross-entropy); what :meth:`gradients` differentiates."""
        out = self.forward(x)
        loss, _ = self.loss_and_grad(out, labels)
        return loss if self.spec.kind == arch_mod.DNN else loss * out.shape[1]

    # ------------------------------------------------------------ checkpoints

    def save(self, path) -> None:
        tensors = {"arch_json": np.array(self.spec.to_json())}
        for blk in self.blocks():
            tensors[f"s{blk.strand}_d{blk.depth}_weight"] = blk.weight
            tensors[f"s{blk.strand}_d{blk.depth}_bias"] = blk.bias
        nn.save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> BraidNetModel:
        t = nn.load_tensors(path)
        spec = arch_mod.arch_from_json(t["arch_json"].item())
        weights, biases = [], []
        for d in range(spec.depth):
            weights.append(np.stack([t[f"s{s}_d{d}_weight"] for s in range(spec.strands)]))
            biases.append(np.stack([t[f"s{s}_d{d}_bias"] for s in range(spec.strands)]))
        return cls(spec, weights, biases)


def _labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"label outside 0..{num_classes - 1}")
    return y


# ---------------------------------------------------------------- mixing


def _mix_depth(model: BraidNetModel, crossing: Crossing) -> int:
    depth = crossing.gap + 1
    if not 0 <= depth < model.depth:
        raise KeyError(f"crossing at gap {crossing.gap} has no depth-{depth} block")
    for s in (crossing.under, crossing.over):
        if not 0 <= s < model.spec.strands:
            raise KeyError(f"crossing references missing strand {s}")
    return depth


def apply_crossing(model: BraidNetModel, crossing: Crossing, alpha: float) -> None:
    apply_gap(model, (crossing,), alpha)


def apply_gap(model: BraidNetModel, crossings, alpha: float) -> None:
    """Apply all crossings of one gap: every read sees the pre-gap parameters."""
    crossings = tuple(crossings)
    if not crossings:
        return
    delta_w: dict[tuple[int, int], np.ndarray] = {}
    delta_b: dict[tuple[int, int], np.ndarray] = {}
    for c in crossings:
        d = _mix_depth(model, c)
        key = (d, c.over)
        dw = alpha * model.weights[d][c.under]
        db = alpha * model.biases[d][c.under]
        if key in delta_w:
            delta_w[key] = delta_w[key] + dw
            delta_b[key] = delta_b[key] + db
        else:
            delta_w[key], delta_b[key] = dw, db
    for (d, s), dw in delta_w.items():
        model.weights[d][s] += dw
        model.biases[d][s] += delta_b[(d, s)]


def apply_schedule(model: BraidNetModel, alpha: float) -> None:
    for gap in model.spec.schedule.gaps:
        apply_gap(model, gap, alpha)


# ---------------------------------------------------------------- training / inference


def forward(model: BraidNetModel, batch) -> np.ndarray:
    return model.forward(batch)


def train_step(model: BraidNetModel, batch, labels, mix: MixConfig, lr: float, batch_counter: int) -> float:
    """One SGD step; crossings are mixed first when ``batch_counter`` hits the interval."""
    labels = _labels(labels, model.spec.num_classes)
    if batch_counter % mix.mix_interval == 0:
        apply_schedule(model, mix.alpha)
    loss, dw, db = model.gradients(batch, labels)
    nn.sgd_step(model.parameters(), [*dw, *db], lr)
    if not np.isfinite(loss):
        raise nn.NonFiniteError("training loss is not finite")
    return loss


def scores(model: BraidNetModel, inputs, mix: MixConfig | None = None) -> np.ndarray:
    if mix is not None and mix.mix_at_inference:
        model = model.copy()
        apply_schedule(model, mix.alpha)
    inputs = nn.as_tensor(inputs)
    return np.concatenate([model.forward(inputs[i : i + EVAL_CHUNK])
                           for i in range(0, len(inputs), EVAL_CHUNK)])


def predict_from_scores(s, class_of_strand=None) -> np.ndarray:
    """Argmax over strand scores; ties resolve to the lowest class id."""
    s = np.atleast_2d(np.asarray(s))
    if class_of_strand is None:
        return np.argmax(s, axis=1)
    cls = np.asarray(class_of_strand)
    order = np.argsort(cls, kind="stable")
    return cls[order][np.argmax(s[:, order], axis=1)]


def predict(model: BraidNetModel, inputs, mix: MixConfig | None = None) -> np.ndarray:
    return predict_from_scores(scores(model, inputs, mix), model.class_of_strand)


def build_model(spec: ArchSpec, seed: int) -> BraidNetModel:
    return BraidNetModel.init(spec, seed)


def describe(model: BraidNetModel) -> str:
    return json.dumps({"arch": model.spec.to_dict(),
                       "parameters": int(sum(w.size for w in model.parameters()))}, indent=2)
