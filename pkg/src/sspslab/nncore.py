"""Feedforward encoder/projector machinery with explicit backprop.

Everything runs in float64.  Forward passes return a cache that suffices for
an exact backward pass; gradients live in separate buffers so parameters are
never touched outside an optimizer step.  The student/teacher pairing and
the EMA update implement the two-branch joint-embedding layout: symmetric
(shared weights) or student-teacher (teacher updated by moving average, no
gradient).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "LinearLayer",
    "L2NormLayer",
    "Mlp",
    "ModelPair",
    "OptimizerState",
    "Schedule",
    "NonFiniteGradientError",
    "init_mlp",
    "build_model_pair",
    "forward_full",
    "backward_full",
    "init_optimizer",
    "optimizer_step",
    "ema_update",
    "schedule_value",
    "write_checkpoint",
    "read_checkpoint",
]

_ACTIVATIONS = ("relu", "identity")


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer step sees NaN/inf gradients."""


@dataclass
class LinearLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("weight must be (fan_in, fan_out) with matching bias")


class L2NormLayer:
    """Parameter-free row-wise l2 normalization, y = x / ||x||."""

    def __repr__(self) -> str:  # pragma: no cover
        return "L2NormLayer()"


class Mlp:
    """A stack of linear(+activation) and l2-normalization layers."""

    def __init__(self, layers: list):
        if not layers:
            raise ValueError("Mlp needs at least one layer")
        self.layers = layers
        dims = [l.weight.shape for l in layers if isinstance(l, LinearLayer)]
        for (_, out_a), (in_b, _) in zip(dims, dims[1:]):
            if out_a != in_b:
                raise ValueError(f"layer dimensions do not chain: {out_a} -> {in_b}")
        self.input_dim = dims[0][0]
        self.output_dim = dims[-1][1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if isinstance(layer, LinearLayer):
                out.extend([layer.weight, layer.bias])
        return out

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns (output, cache); cache holds per-layer inputs/pre-activations."""
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected batch of width {self.input_dim}, got {x.shape}")
        cache = []
        for layer in self.layers:
            if isinstance(layer, LinearLayer):
                pre = x @ layer.weight + layer.bias
                out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
                cache.append((x, pre))
                x = out
            else:
                # guard keeps y = 0 (not NaN) for an all-dead row
                norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-30)
                y = x / norms
                cache.append((x, norms, y))
                x = y
        return x, cache

    def backward(
        self, cache: list, output_grad: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact gradients for the graph recorded in ``cache``.

        Returns (param_grads aligned with :meth:`parameters`, input_grad).
        """
        if len(cache) != len(self.layers):
            raise ValueError("cache does not match this model (stale cache?)")
        g = np.asarray(output_grad, dtype=np.float64)
        param_grads: list[np.ndarray] = []
        for layer, saved in zip(reversed(self.layers), reversed(cache)):
            if isinstance(layer, LinearLayer):
                x, pre = saved
                if pre.shape != g.shape:
                    raise ValueError("cache does not match output_grad (stale cache?)")
                dpre = g * (pre > 0.0) if layer.activation == "relu" else g
                param_grads.append(dpre.sum(axis=0))       # bias
                param_grads.append(x.T @ dpre)             # weight
                g = dpre @ layer.weight.T
            else:
                x, norms, y = saved
                if y.shape != g.shape:
                    raise ValueError("cache does not match output_grad (stale cache?)")
                g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms
        param_grads.reverse()
        return param_grads, g


def init_mlp(
    dims: list[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    l2norm_before_last: bool = False,
) -> Mlp:
    """Uniform fan-in init: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Hidden layers use ``hidden_activation``, the last layer is linear.  With
    ``l2norm_before_last`` an l2-normalization stage precedes the final
    linear layer (the prototype-head layout).
    """
    if len(dims) < 2:
        raise ValueError("dims must list at least input and output width")
    layers: list = []
    n_linear = len(dims) - 1
    for k in range(n_linear):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        bias = rng.uniform(-bound, bound, size=fan_out)
        is_last = k == n_linear - 1
        if is_last and l2norm_before_last:
            layers.append(L2NormLayer())
        layers.append(
            LinearLayer(weight, bias, "identity" if is_last else hidden_activation)
        )
    return Mlp(layers)


def clone_mlp(model: Mlp) -> Mlp:
    layers: list = []
    for layer in model.layers:
        if isinstance(layer, LinearLayer):
            layers.append(
                LinearLayer(layer.weight.copy(), layer.bias.copy(), layer.activation)
            )
        else:
            layers.append(L2NormLayer())
    return Mlp(layers)


@dataclass
class ModelPair:
    """Student and teacher encoder(+projector) stacks.

    In symmetric mode the teacher attributes alias the student objects, so
    both branches share parameters bitwise.  In student_teacher mode the
    teacher is a deep copy that only ever changes through :func:`ema_update`.
    """

    mode: str
    student_encoder: Mlp
    teacher_encoder: Mlp
    student_projector: Mlp | None = None
    teacher_projector: Mlp | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("symmetric", "student_teacher"):
            raise ValueError("mode must be 'symmetric' or 'student_teacher'")
        if self.mode == "symmetric":
            if self.teacher_encoder is not self.student_encoder:
                raise ValueError("symmetric mode requires shared encoder objects")
            if self.teacher_projector is not self.student_projector:
                raise ValueError("symmetric mode requires shared projector objects")

    def student_parameters(self) -> list[np.ndarray]:
        params = self.student_encoder.parameters()
        if self.student_projector is not None:
            params = params + self.student_projector.parameters()
        return params

    def teacher_parameters(self) -> list[np.ndarray]:
        params = self.teacher_encoder.parameters()
        if self.teacher_projector is not None:
            params = params + self.teacher_projector.parameters()
        return params


def build_model_pair(
    mode: str,
    encoder_dims: list[int],
    rng: np.random.Generator,
    projector_dims: list[int] | None = None,
) -> ModelPair:
    encoder = init_mlp(encoder_dims, rng)
    projector = (
        init_mlp(projector_dims, rng, l2norm_before_last=True)
        if projector_dims
        else None
    )
    if mode == "symmetric":
        return ModelPair(mode, encoder, encoder, projector, projector)
    return ModelPair(
        mode,
        encoder,
        clone_mlp(encoder),
        projector,
        clone_mlp(projector) if projector is not None else None,
    )


def forward_full(encoder: Mlp, projector: Mlp | None, batch: np.ndarray):
    """Encoder then optional projector; returns (embeddings, representations, cache)."""
    reps, cache_enc = encoder.forward(batch)
    if projector is None:
        return reps, reps, (cache_enc, None)
    emb, cache_proj = projector.forward(reps)
    return emb, reps, (cache_enc, cache_proj)


def backward_full(
    encoder: Mlp, projector: Mlp | None, cache, embedding_grad: np.ndarray
) -> list[np.ndarray]:
    """Gradients for encoder(+projector) parameters, in student_parameters order."""
    cache_enc, cache_proj = cache
    if projector is None:
        grads_enc, _ = encoder.backward(cache_enc, embedding_grad)
        return grads_enc
    grads_proj, rep_grad = projector.backward(cache_proj, embedding_grad)
    grads_enc, _ = encoder.backward(cache_enc, rep_grad)
    return grads_enc + grads_proj


@dataclass
class OptimizerState:
    kind: str  # "sgd_momentum" | "adam"
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: list[np.ndarray] | None = None        # sgd velocity / adam first moment
    second_moments: list[np.ndarray] | None = None  # adam only


def init_optimizer(kind: str, params: list[np.ndarray], lr: float, **hypers) -> OptimizerState:
    if kind not in ("sgd_momentum", "adam"):
        raise ValueError("kind must be 'sgd_momentum' or 'adam'")
    state = OptimizerState(kind=kind, lr=lr, **hypers)
    state.buffers = [np.zeros_like(p) for p in params]
    if kind == "adam":
        state.second_moments = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(
    state: OptimizerState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float | None = None,
) -> None:
    """Apply one update in place.  Weight decay enters as plain L2 on gradients."""
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ValueError("params/grads/buffers length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteGradientError(
                f"{bad} non-finite gradient entries in a parameter of shape {p.shape}"
            )
    lr = state.lr if lr is None else lr
    state.step_count += 1
    if state.kind == "sgd_momentum":
        for p, g, v in zip(params, grads, state.buffers):
            g_eff = g + state.weight_decay * p if state.weight_decay else g
            v *= state.momentum
            v += g_eff
            p -= lr * v
    else:
        t = state.step_count
        bc1 = 1.0 - state.beta1**t
        bc2 = 1.0 - state.beta2**t
        for p, g, m, v in zip(params, grads, state.buffers, state.second_moments):
            g_eff = g + state.weight_decay * p if state.weight_decay else g
            m *= state.beta1
            m += (1.0 - state.beta1) * g_eff
            v *= state.beta2
            v += (1.0 - state.beta2) * g_eff**2
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def ema_update(
    teacher_params: list[np.ndarray],
    student_params: list[np.ndarray],
    m: float,
) -> None:
    """teacher <- m*teacher + (1-m)*student, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
    if len(teacher_params) != len(student_params):
        raise ValueError("teacher/student parameter lists differ in length")
    for t, s in zip(teacher_params, student_params):
        if t.shape != s.shape:
            raise ValueError("teacher/student parameter shapes differ")
        t *= m
        t += (1.0 - m) * s


@dataclass(frozen=True)
class Schedule:
    """Scalar schedules over global step count.

    step_decay:        base * decay^floor(epoch / every_epochs), epochs via
                       steps_per_epoch
    cosine_with_warmup: linear ramp to base over warmup_steps, then cosine
                       down to end
    cosine_momentum:   base + (end-base) * (1 - cos(pi * t/T)) / 2
    """

    kind: str
    base: float
    total_steps: int
    end: float = 0.0
    warmup_steps: int = 0
    decay: float = 0.95
    every_epochs: int = 5
    steps_per_epoch: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("step_decay", "cosine_with_warmup", "cosine_momentum"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def schedule_value(s: Schedule, step: int) -> float:
    step = int(step)
    if s.kind == "step_decay":
        epoch = step // s.steps_per_epoch
        return s.base * s.decay ** (epoch // s.every_epochs)
    if s.kind == "cosine_with_warmup":
        if s.warmup_steps > 0 and step < s.warmup_steps:
            return s.base * (step + 1) / s.warmup_steps
        span = max(s.total_steps - s.warmup_steps, 1)
        t = min((step - s.warmup_steps) / span, 1.0)
        return s.end + (s.base - s.end) * 0.5 * (1.0 + np.cos(np.pi * t))
    # cosine_momentum
    t = min(step / max(s.total_steps, 1), 1.0)
    return s.base + (s.end - s.base) * 0.5 * (1.0 - np.cos(np.pi * t))


_CKPT_MAGIC = b"SSPSLAB-CKPT-1\n"


def write_checkpoint(
    path: str | Path, header: dict, arrays: list[tuple[str, np.ndarray]]
) -> None:
    """Documented container: magic line, decimal header length line, canonical
    JSON header, then the arrays as flat little-endian float64 in order.

    The header is augmented with the array names/shapes so the payload is
    self-describing.
    """
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(a.shape)} for name, a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(f"{len(blob)}\n".encode("ascii"))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`write_checkpoint`; validates magic, header and sizes."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError("not a checkpoint file (bad magic)")
    rest = raw[len(_CKPT_MAGIC):]
    newline = rest.index(b"\n")
    try:
        header_len = int(rest[:newline])
        header = json.loads(rest[newline + 1 : newline + 1 + header_len])
    except (ValueError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint header: {exc}") from exc
    payload = rest[newline + 1 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if offset + nbytes > len(payload):
            raise ValueError("corrupt checkpoint: payload shorter than declared shapes")
        arrays[entry["name"]] = (
            np.frombuffer(payload[offset : offset + nbytes], dtype="<f8")
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(payload):
        raise ValueError("corrupt checkpoint: trailing bytes after declared arrays")
    return header, arrays
