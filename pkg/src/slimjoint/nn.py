"""Width-sliced shared-weight networks: forward, backprop, SGD, sandwich training.

A sub-network at width ``a`` uses the leading ``resolve_channels(a)`` slices
of every weight tensor.  Layers whose input is sliced rescale their
pre-activation by ``sqrt(full_fan_in / used_fan_in)`` so that narrow sub-networks
keep roughly the activation scale of the full network (there is no normalization
layer to do it for them).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archspec import INPUT, ArchSpec, resolve_channels

CKPT_MAGIC = b"SJCKPT01"


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class SharedWeights:
    """Full-width parameters; ``params`` maps ``"<layer>.w"`` / ``"<layer>.b"`` to arrays.

    Conv kernels are stored HWIO: (kernel_h, kernel_w, in_per_group, out).
    Dense kernels are (in, out).
    """

    spec_name: str
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "SharedWeights":
        return SharedWeights(self.spec_name, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "SharedWeights":
        return SharedWeights(self.spec_name, {k: v.astype(dtype) for k, v in self.params.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        return b"".join(v.astype("<f4").tobytes() for v in self.params.values())


def init_weights(spec: ArchSpec, seed: int, dtype=np.float32) -> SharedWeights:
    """Fan-in scaled uniform init at full width; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            per_group = layer.in_channels_base // layer.groups
            shape = (layer.kernel_h, layer.kernel_w, per_group, layer.out_channels_base)
            fan_in = layer.kernel_h * layer.kernel_w * per_group
        elif layer.kind in ("dense", "classifier-dense"):
            shape = (layer.in_channels_base, layer.out_channels_base)
            fan_in = layer.in_channels_base
        else:
            continue
        gain = 6.0 if layer.activation == "relu" else 3.0
        bound = math.sqrt(gain / fan_in)
        params[f"{layer.id}.w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[f"{layer.id}.b"] = np.zeros(layer.out_channels_base, dtype=dtype)
    return SharedWeights(spec.name, params)


# -- forward / backward ---------------------------------------------------------------

FAN_IN_RESCALE = "sqrt"


def _fan_in_scale(full: int, used: int) -> float:
    if FAN_IN_RESCALE == "sqrt":
        return math.sqrt(full / used)
    if FAN_IN_RESCALE == "none":
        return 1.0
    return full / used


def _prepare_input(spec: ArchSpec, inputs) -> np.ndarray:
    x = np.asarray(inputs)
    w, h, c = spec.input_resolution
    n = x.shape[0] if x.ndim else 0
    if x.ndim < 2 or x[0].size != w * h * c:
        raise ShapeError(
            f"input batch of shape {x.shape} does not match spec input (w={w}, h={h}, c={c})"
        )
    if spec.layers[0].kind == "conv":
        return x.reshape(n, h, w, c)
    return x.reshape(n, w * h * c)


def _conv_windows(x, k, stride):
    p = k // 2
    if k == 1:
        return x[:, ::stride, ::stride, :] if stride > 1 else x
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H', W', C, k, k)
    oh = (x.shape[1] + stride - 1) // stride
    ow = (x.shape[2] + stride - 1) // stride
    return win[:, ::stride, ::stride][:, :oh, :ow]


def _conv_input_grad(dwin, x_shape, k, stride, dtype):
    """Scatter window gradients (N, OH, OW, k, k, C) back onto the input."""
    n, h, w, c = x_shape
    if k == 1:
        if stride == 1:
            return dwin
        dx = np.zeros(x_shape, dtype=dtype)
        dx[:, ::stride, ::stride, :] = dwin
        return dx
    p = k // 2
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dtype)
    oh, ow = dwin.shape[1], dwin.shape[2]
    for u in range(k):
        for v in range(k):
            dxp[:, u:u + stride * oh:stride, v:v + stride * ow:stride, :] += dwin[:, :, :, u, v, :]
    return dxp[:, p:p + h, p:p + w, :]


@dataclass
class _Tape:
    spec: ArchSpec
    concrete: tuple
    inputs: dict = field(default_factory=dict)  # layer id -> cached input (windows for conv)
    masks: dict = field(default_factory=dict)  # layer id -> relu mask
    shapes: dict = field(default_factory=dict)
    dtype: object = np.float32


def _forward(weights: SharedWeights, spec: ArchSpec, width, inputs, keep: bool):
    concrete = resolve_channels(spec, width)
    p = weights.params
    dtype = weights.dtype
    outs = {INPUT: _prepare_input(spec, inputs).astype(dtype, copy=False)}
    tape = _Tape(spec, concrete, dtype=dtype) if keep else None
    for layer, cl in zip(spec.layers, concrete):
        x = outs[layer.input_sources[0]]
        kind = layer.kind
        if kind == "conv":
            k, s = layer.kernel_h, layer.stride
            win = _conv_windows(x, k, s)
            W = p[f"{layer.id}.w"]
            if cl.groups == 1:
                Wsub = W[:, :, : cl.c_in, : cl.c_out]
                scale = _fan_in_scale(layer.in_channels_base, cl.c_in)
                if k == 1:
                    y = (win @ Wsub[0, 0]) * scale
                else:
                    y = np.tensordot(win, Wsub, axes=([3, 4, 5], [2, 0, 1])) * scale
            elif cl.groups == cl.c_in == cl.c_out:
                Wsub = W[:, :, 0, : cl.c_out]
                if k == 1:
                    y = win * Wsub[0, 0]
                else:
                    y = np.einsum("nijcuv,uvc->nijc", win, Wsub)
            else:
                raise NotImplementedError("only dense (G=1) and depthwise convolutions are trainable")
            y = y + p[f"{layer.id}.b"][: cl.c_out]
            if keep:
                tape.inputs[layer.id] = win
                tape.shapes[layer.id] = x.shape
        elif kind in ("dense", "classifier-dense"):
            if keep:
                tape.shapes[layer.id] = x.shape
            if x.ndim == 4:
                x = x.reshape(x.shape[0], -1)
            W = p[f"{layer.id}.w"][: cl.c_in, : cl.c_out]
            y = (x @ W) * _fan_in_scale(layer.in_channels_base, cl.c_in) + p[f"{layer.id}.b"][: cl.c_out]
            if keep:
                tape.inputs[layer.id] = x
        elif kind == "add":
            y = x + outs[layer.input_sources[1]]
        elif kind == "global-pool":
            y = x.mean(axis=(1, 2))
            if keep:
                tape.shapes[layer.id] = x.shape
        if layer.activation == "relu":
            mask = y > 0
            y = y * mask
            if keep:
                tape.masks[layer.id] = mask
        outs[layer.id] = y
    return outs[spec.layers[-1].id], tape


def forward(weights: SharedWeights, spec: ArchSpec, width, inputs) -> np.ndarray:
    """Logits of the sub-network at ``width``."""
    logits, _ = _forward(weights, spec, width, inputs, keep=False)
    return logits


def activation_pattern(weights: SharedWeights, spec: ArchSpec, width, inputs) -> bytes:
    """Packed ReLU on/off pattern of a forward pass (identifies the linear region)."""
    _, tape = _forward(weights, spec, width, inputs, keep=True)
    return b"".join(np.packbits(tape.masks[k]).tobytes() for k in sorted(tape.masks))


def _backward(weights: SharedWeights, tape: _Tape, dlogits, grads: dict | None = None):
    spec, p = tape.spec, weights.params
    if grads is None:
        grads = weights.zeros_like()
    dtype = tape.dtype
    douts = {spec.layers[-1].id: dlogits.astype(dtype, copy=False)}
    for layer, cl in zip(reversed(spec.layers), reversed(tape.concrete)):
        dy = douts.pop(layer.id, None)
        if dy is None:
            continue
        if layer.activation == "relu":
            dy = dy * tape.masks[layer.id]
        kind = layer.kind
        if kind == "conv":
            k, s = layer.kernel_h, layer.stride
            win = tape.inputs[layer.id]
            W = p[f"{layer.id}.w"]
            gW = grads[f"{layer.id}.w"]
            grads[f"{layer.id}.b"][: cl.c_out] += dy.sum(axis=(0, 1, 2))
            if cl.groups == 1:
                scale = _fan_in_scale(layer.in_channels_base, cl.c_in)
                Wsub = W[:, :, : cl.c_in, : cl.c_out]
                if k == 1:
                    flat_in = win.reshape(-1, cl.c_in)
                    flat_dy = dy.reshape(-1, cl.c_out)
                    gW[0, 0, : cl.c_in, : cl.c_out] += scale * (flat_in.T @ flat_dy)
                    dwin = (dy @ Wsub[0, 0].T) * scale
                else:
                    gsub = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # (C, k, k, O)
                    gW[:, :, : cl.c_in, : cl.c_out] += scale * gsub.transpose(1, 2, 0, 3)
                    dwin = np.tensordot(dy, Wsub, axes=([3], [3])) * scale  # (N,OH,OW,k,k,C)
            else:
                Wsub = W[:, :, 0, : cl.c_out]
                if k == 1:
                    gW[0, 0, 0, : cl.c_out] += (win * dy).sum(axis=(0, 1, 2))
                    dwin = dy * Wsub[0, 0]
                else:
                    gW[:, :, 0, : cl.c_out] += np.einsum("nijcuv,nijc->uvc", win, dy)
                    dwin = np.einsum("nijc,uvc->nijuvc", dy, Wsub)
            dx = _conv_input_grad(dwin, tape.shapes[layer.id], k, s, dtype)
        elif kind in ("dense", "classifier-dense"):
            x = tape.inputs[layer.id]
            scale = _fan_in_scale(layer.in_channels_base, cl.c_in)
            grads[f"{layer.id}.w"][: cl.c_in, : cl.c_out] += scale * (x.T @ dy)
            grads[f"{layer.id}.b"][: cl.c_out] += dy.sum(axis=0)
            dx = (dy @ p[f"{layer.id}.w"][: cl.c_in, : cl.c_out].T) * scale
            dx = dx.reshape(tape.shapes[layer.id])
        elif kind == "add":
            _accumulate(douts, layer.input_sources[1], dy)
            dx = dy
        elif kind == "global-pool":
            n, h, w, c = tape.shapes[layer.id]
            dx = np.broadcast_to((dy / (h * w))[:, None, None, :], (n, h, w, c))
        src = layer.input_sources[0]
        if src != INPUT:
            _accumulate(douts, src, dx)
    return grads


def _accumulate(douts, key, value):
    if key in douts:
        douts[key] = douts[key] + value
    else:
        douts[key] = value


# -- losses ------------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_finite(logits):
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")


def smoothed_targets(labels, class_count: int, label_smoothing: float, dtype=np.float64):
    q = np.full((len(labels), class_count), label_smoothing / class_count, dtype=dtype)
    q[np.arange(len(labels)), labels] += 1.0 - label_smoothing
    return q


def ce_loss(logits, labels, label_smoothing: float = 0.0) -> float:
    """Mean label-smoothed cross-entropy."""
    logits = np.asarray(logits)
    _check_finite(logits)
    logp = log_softmax(logits.astype(np.float64))
    q = smoothed_targets(np.asarray(labels), logits.shape[1], label_smoothing)
    return float(-(q * logp).sum(axis=1).mean())


def _loss_and_dlogits(logits, targets):
    """Soft-target cross-entropy and its gradient w.r.t. logits (mean over batch)."""
    _check_finite(logits)
    logp = log_softmax(logits.astype(np.float64))
    loss = float(-(targets * logp).sum(axis=1).mean())
    dlogits = (np.exp(logp) - targets) / logits.shape[0]
    return loss, dlogits


def grad(weights: SharedWeights, spec: ArchSpec, width, batch, label_smoothing: float = 0.0,
         soft_targets=None, out: dict | None = None):
    """Loss and gradient of the sub-network at ``width``.

    Gradients have full tensor shapes; entries outside the used slices stay
    zero.  Pass ``out`` to accumulate into an existing gradient dict.
    Returns ``(loss, grads, logits)``.
    """
    logits, tape = _forward(weights, spec, width, batch.inputs, keep=True)
    if soft_targets is None:
        targets = smoothed_targets(batch.labels, logits.shape[1], label_smoothing)
    else:
        targets = soft_targets
    loss, dlogits = _loss_and_dlogits(logits, targets)
    grads = _backward(weights, tape, dlogits, out)
    return loss, grads, logits


# -- optimization ------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    lr_schedule: str = "cosine"  # cosine | linear-decay | exponential
    gamma: float = 0.999  # per-step factor for the exponential schedule
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    label_smoothing: float = 0.0
    batch_size: int = 128
    epochs: int = 0  # optional: derive K from epochs when K is not given
    inplace_distillation: bool = True
    grad_clip: float | None = 5.0  # global L2 norm cap on the raw gradient; None disables
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "momentum", "weight_decay", "label_smoothing", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.label_smoothing >= 1:
            raise ValueError("label_smoothing must be < 1")
        if self.lr_schedule not in ("cosine", "linear-decay", "exponential"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "exponential":
        return config.learning_rate * config.gamma ** step
    frac = min(step, total_steps) / max(total_steps, 1)
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    return config.learning_rate * (1.0 - frac)


@dataclass
class SgdState:
    velocity: dict = field(default_factory=dict)


def sgd_step(weights: SharedWeights, grads: dict, config: TrainConfig, step_index: int,
             total_steps: int, state: SgdState | None = None) -> SharedWeights:
    """One momentum-SGD update in place; weight decay applies to kernels only.

    With ``config.grad_clip`` set, the raw gradient is first rescaled so its
    global L2 norm does not exceed the cap.
    """
    lr = learning_rate(config, step_index, total_steps)
    if state is None:
        state = SgdState()
    for name, w in weights.params.items():
        if grads[name].shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, expected {w.shape}")
    clip = 1.0
    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))
        if norm > config.grad_clip:
            clip = config.grad_clip / norm
    for name, w in weights.params.items():
        g = grads[name] if clip == 1.0 else grads[name] * clip
        if config.weight_decay and name.endswith(".w"):
            g = g + config.weight_decay * w
        if config.momentum:
            v = state.velocity.get(name)
            v = g.copy() if v is None else config.momentum * v + g
            state.velocity[name] = v
            g = g + config.momentum * v if config.nesterov else v
        if lr:
            w -= (lr * g).astype(w.dtype, copy=False)
    return weights


def is_full(width) -> bool:
    return bool(np.all(np.asarray(width) == 1.0))


def slimmable_train_step(weights: SharedWeights, spec: ArchSpec, widths, batch,
                         config: TrainConfig, step_index: int, total_steps: int,
                         state: SgdState | None = None) -> dict:
    """Sandwich-rule update: full width plus every listed width, one SGD step.

    Gradients of all trained widths are averaged.  With in-place
    distillation the non-full widths fit the full network's (detached)
    softmax instead of the labels.  Returns per-width losses.
    """
    if len(widths) == 0:
        raise ValueError("widths must be non-empty")
    others = [np.asarray(w, dtype=float) for w in widths if not is_full(w)]
    for w in others:
        resolve_channels(spec, w)
    grads = weights.zeros_like()
    full_loss, _, full_logits = grad(
        weights, spec, np.ones(spec.d), batch, config.label_smoothing, out=grads
    )
    losses = {"full": full_loss, "sub": []}
    soft = None
    if config.inplace_distillation and others:
        soft = np.exp(log_softmax(full_logits.astype(np.float64)))
    for w in others:
        loss, _, _ = grad(weights, spec, w, batch, config.label_smoothing,
                          soft_targets=soft, out=grads)
        losses["sub"].append(loss)
    count = 1 + len(others)
    if count > 1:
        for g in grads.values():
            g /= count
    sgd_step(weights, grads, config, step_index, total_steps, state)
    losses["passes"] = count
    return losses


def evaluate(weights: SharedWeights, spec: ArchSpec, width, dataset, batch_size: int = 2048):
    """(mean cross-entropy, top-1 error) over the whole dataset, no smoothing."""
    inputs, labels = dataset.inputs, np.asarray(dataset.labels)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_ce = 0.0
    wrong = 0
    for start in range(0, n, batch_size):
        logits = forward(weights, spec, width, inputs[start:start + batch_size])
        _check_finite(logits)
        y = labels[start:start + batch_size]
        logp = log_softmax(logits.astype(np.float64))
        total_ce -= logp[np.arange(len(y)), y].sum()
        wrong += int((logits.argmax(axis=1) != y).sum())
    return total_ce / n, wrong / n


# -- checkpoints --------------------------------------------------------------------------
#
# layout: 8-byte magic "SJCKPT01" | uint64 LE header length | UTF-8 JSON header |
#         float32 LE blob of every tensor in ``params`` order (per layer: w then b)


def save_checkpoint(path, weights: SharedWeights, spec: ArchSpec, *, config=None, step: int = 0,
                    rng_state=None, extra=None) -> None:
    tensors = []
    offset = 0
    for name, v in weights.params.items():
        tensors.append({"name": name, "shape": list(v.shape), "offset": offset})
        offset += v.size * 4
    header = {
        "format": 1,
        "spec_name": spec.name,
        "spec": spec.to_dict(),
        "config": config,
        "step": step,
        "rng_state": rng_state,
        "tensors": tensors,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(weights.to_bytes())


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def load_checkpoint(path, dtype=np.float32):
    """Return ``(weights, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    blob = raw[16 + hlen:]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        start, stop = t["offset"], t["offset"] + 4 * count
        if stop > len(blob):
            raise CheckpointError(f"{path}: blob too short for tensor {t['name']}")
        params[t["name"]] = (
            np.frombuffer(blob[start:stop], dtype="<f4").reshape(t["shape"]).astype(dtype)
        )
    return SharedWeights(header["spec_name"], params), header


def check_compatible(weights: SharedWeights, spec: ArchSpec) -> None:
    """Raise CheckpointError unless ``weights`` fit ``spec`` exactly."""
    reference = init_weights(spec, 0)
    if weights.spec_name != spec.name or set(weights.params) != set(reference.params):
        raise CheckpointError(
            f"checkpoint for {weights.spec_name!r} does not match spec {spec.name!r}"
        )
    for name, v in reference.params.items():
        if weights.params[name].shape != v.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {weights.params[name].shape} != {v.shape}"
            )
