"""Feedforward softmax classifier with analytic forward/backward passes.

Hidden layers use ReLU with inverted dropout (train-time scaling by 1/keep,
nothing at eval); the output layer is a softmax computed in the max-subtracted
stable form.  Gradients are hand-derived and checked against finite differences
in the test suite.  Everything runs in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ValidationError

CHECKPOINT_MAGIC = b"WSLCKPT1"
INIT_SCALE_RULE = "sqrt_2_over_fan_in"


@dataclass
class ModelConfig:
    input_dim: int
    hidden_sizes: list[int]
    num_classes: int
    dropout_keep_prob: float = 0.8
    init_seed: int = 0
    init_scale: str = INIT_SCALE_RULE

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValidationError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValidationError("hidden sizes must be positive")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ValidationError("dropout_keep_prob must lie in (0, 1]")
        if self.init_scale != INIT_SCALE_RULE:
            raise ValidationError(f"unknown init_scale rule {self.init_scale!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, chaining input through hidden to output."""
        sizes = [self.input_dim] + list(self.hidden_sizes) + [self.num_classes]
        return list(zip(sizes[:-1], sizes[1:]))


@dataclass
class ModelParams:
    """Per-layer weight matrices and bias vectors; immutable by convention."""

    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = self.config.layer_dims()
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ValidationError("layer count does not match config")
        for (fan_in, fan_out), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValidationError(
                    f"layer shapes {w.shape}/{b.shape} != ({fan_in},{fan_out})/({fan_out},)"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError("non-finite parameter")

    def copy(self) -> "ModelParams":
        return ModelParams(config=self.config,
                           weights=[w.copy() for w in self.weights],
                           biases=[b.copy() for b in self.biases])

    def flat_arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved in layer order (w0, b0, w1, b1, ...)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class ForwardCache:
    """Intermediates from a forward pass, consumed by backward()."""

    params: ModelParams
    inputs: list[np.ndarray]          # input to each layer
    pre_activations: list[np.ndarray]  # hidden pre-activations only
    dropout_masks: list[np.ndarray | None]
    keep_prob: float
    logits: np.ndarray


def init_params(cfg: ModelConfig) -> ModelParams:
    """Zero-mean Gaussian weights with std sqrt(2 / fan_in); zero biases."""
    rng = np.random.default_rng(cfg.init_seed)
    weights, biases = [], []
    for fan_in, fan_out in cfg.layer_dims():
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(config=cfg, weights=weights, biases=biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax via max subtraction; stable for logits up to ~1e308."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, batch: np.ndarray, train: bool = False,
            dropout_seed=None, keep_prob: float | None = None
            ) -> tuple[np.ndarray, ForwardCache]:
    """Run the network over a batch, returning posteriors and a backward cache.

    In train mode, inverted dropout with the given keep probability (defaulting
    to the config's) is applied to every hidden activation, seeded by
    ``dropout_seed``; eval mode applies no dropout and no scaling.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.config.input_dim:
        raise ValidationError(
            f"batch shape {batch.shape} incompatible with input_dim "
            f"{params.config.input_dim}"
        )
    if not np.all(np.isfinite(batch)):
        raise ValidationError("non-finite input")
    keep = params.config.dropout_keep_prob if keep_prob is None else float(keep_prob)
    if not 0.0 < keep <= 1.0:
        raise ValidationError("keep_prob must lie in (0, 1]")
    rng = np.random.default_rng(dropout_seed) if train and keep < 1.0 else None

    n_hidden = len(params.config.hidden_sizes)
    inputs, pre_acts, masks = [], [], []
    a = batch
    for l in range(n_hidden):
        inputs.append(a)
        z = a @ params.weights[l] + params.biases[l]
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        if rng is not None:
            mask = (rng.random(h.shape) < keep).astype(np.float64)
            h = h * mask / keep
            masks.append(mask)
        else:
            masks.append(None)
        a = h
    inputs.append(a)
    logits = a @ params.weights[n_hidden] + params.biases[n_hidden]
    posteriors = softmax(logits)
    cache = ForwardCache(params=params, inputs=inputs, pre_activations=pre_acts,
                         dropout_masks=masks, keep_prob=keep, logits=logits)
    return posteriors, cache


@dataclass
class ParamGrads:
    """Gradients with the same layer shapes as ModelParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def backward(cache: ForwardCache, logit_grads: np.ndarray) -> ParamGrads:
    """Chain the upstream gradient at the output logits back to all parameters.

    Exact analytic chain rule through the dropout masks recorded in the cache.
    """
    params = cache.params
    n_layers = len(params.weights)
    if logit_grads.shape != cache.logits.shape:
        raise ValidationError(
            f"upstream gradient shape {logit_grads.shape} != logits "
            f"{cache.logits.shape}"
        )
    if len(cache.inputs) != n_layers:
        raise ValidationError("cache does not match params")

    w_grads = [np.empty(0)] * n_layers
    b_grads = [np.empty(0)] * n_layers
    g = logit_grads
    w_grads[-1] = cache.inputs[-1].T @ g
    b_grads[-1] = g.sum(axis=0)
    upstream = g @ params.weights[-1].T
    for l in range(n_layers - 2, -1, -1):
        mask = cache.dropout_masks[l]
        if mask is not None:
            upstream = upstream * mask / cache.keep_prob
        dz = upstream * (cache.pre_activations[l] > 0)
        w_grads[l] = cache.inputs[l].T @ dz
        b_grads[l] = dz.sum(axis=0)
        if l > 0:
            upstream = dz @ params.weights[l].T
    return ParamGrads(weights=w_grads, biases=b_grads)


def predict(params: ModelParams, ds) -> np.ndarray:
    """Eval-mode posteriors over a whole dataset, order-preserving."""
    posteriors, _ = forward(params, ds.feature_matrix(), train=False)
    return posteriors


def penultimate_features(params: ModelParams, ds) -> np.ndarray:
    """Last-hidden-layer activations per example, eval mode."""
    if not params.config.hidden_sizes:
        raise ValidationError("model has no hidden layer")
    _, cache = forward(params, ds.feature_matrix(), train=False)
    return cache.inputs[-1]


def params_fingerprint(params: ModelParams) -> str:
    """Short stable hex digest of the serialized parameters."""
    h = hashlib.sha256()
    h.update(_header_bytes(params))
    for arr in params.flat_arrays():
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------
# Layout: magic "WSLCKPT1", uint64 little-endian header length, JSON header
# {config, layer shapes, byte offsets}, then packed little-endian float64
# arrays in layer order (weights then bias per layer).

def _header_bytes(params: ModelParams) -> bytes:
    layers = []
    offset = 0
    for w, b in zip(params.weights, params.biases):
        entry = {
            "weight_shape": list(w.shape),
            "weight_offset": offset,
            "bias_shape": list(b.shape),
            "bias_offset": offset + w.size * 8,
        }
        offset += (w.size + b.size) * 8
        layers.append(entry)
    header = {"config": asdict(params.config), "layers": layers}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    header = _header_bytes(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in params.flat_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, expect_num_classes: int | None = None,
                    expect_input_dim: int | None = None) -> ModelParams:
    """Read a checkpoint back; round-trip is value-exact for every weight."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    if expect_num_classes is not None and cfg.num_classes != expect_num_classes:
        raise CheckpointError(
            f"{path}: checkpoint has {cfg.num_classes} classes, expected "
            f"{expect_num_classes}"
        )
    if expect_input_dim is not None and cfg.input_dim != expect_input_dim:
        raise CheckpointError(
            f"{path}: checkpoint input_dim {cfg.input_dim}, expected "
            f"{expect_input_dim}"
        )
    payload = blob[16 + header_len:]
    weights, biases = [], []
    for entry in header["layers"]:
        w_shape = tuple(entry["weight_shape"])
        b_shape = tuple(entry["bias_shape"])
        w_count = int(np.prod(w_shape))
        b_count = int(np.prod(b_shape))
        w_off, b_off = entry["weight_offset"], entry["bias_offset"]
        if b_off + b_count * 8 > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        weights.append(np.frombuffer(payload, dtype="<f8", count=w_count,
                                     offset=w_off).reshape(w_shape).copy())
        biases.append(np.frombuffer(payload, dtype="<f8", count=b_count,
                                    offset=b_off).reshape(b_shape).copy())
    try:
        return ModelParams(config=cfg, weights=weights, biases=biases)
    except ValidationError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
