"""Low-rank adaptation of frozen dense layers.

``W_adapt = W + B A`` with ``W`` (m, n) frozen, ``A`` (r, n) and ``B`` (m, r)
trainable. No ``alpha / r`` scaling is applied. ``B`` starts at zero so the
adapted layer reproduces the frozen one at step 0.

The adapter head used by the training pipeline is a stack of these layers
applied per pixel (a 1x1 convolution without bias).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .utils.binary_io import BinaryReader, BinaryWriter
from .utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_RANK = 32
LORA_MAGIC = b"LORA"
DENSE_MAGIC = b"DENS"
FORMAT_VERSION = 1


class LoraError(ValueError):
    """Raised for invalid ranks, merged/unmerged misuse and bad checkpoints."""
    pass


@dataclass
class LoraLayer:
    W: np.ndarray
    A: Optional[np.ndarray]
    B: Optional[np.ndarray]
    rank: int
    merged: bool = False

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    def delta(self) -> np.ndarray:
        """Dense ``B A``; only for inspection and merging."""
        if self.merged:
            raise LoraError("merged layer has no separate low-rank update")
        return self.B @ self.A


def _check_rank(m: int, n: int, rank: int) -> None:
    if not 1 <= rank <= min(m, n):
        raise LoraError(f"rank must be in [1, {min(m, n)}] for a {m}x{n} layer, got {rank}")
    if rank > min(m, n) / 4:
        logger.warning("LoRA rank %d is not small relative to the %dx%d layer", rank, m, n)


def lora_init(W: np.ndarray, rank: int = DEFAULT_RANK, seed: Union[int, np.random.Generator] = 0) -> LoraLayer:
    """Wrap a frozen weight with zero-initialized ``B`` and ``A ~ N(0, 1/r^2)``."""
    W = np.asarray(W)
    if W.ndim != 2:
        raise LoraError(f"frozen weight must be a matrix, got shape {W.shape}")
    m, n = W.shape
    _check_rank(m, n, rank)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / rank, size=(rank, n))
    B = np.zeros((m, rank))
    return LoraLayer(W=W, A=A, B=B, rank=rank)


def lora_forward(x: np.ndarray, layer: LoraLayer) -> np.ndarray:
    """``W x + B (A x)`` over the last axis of ``x``, never forming ``B A``."""
    if layer.merged:
        raise LoraError("merged layer cannot be used in the factored training forward")
    x = np.asarray(x)
    if x.shape[-1] != layer.in_features:
        raise LoraError(f"input has {x.shape[-1]} features, layer expects {layer.in_features}")
    return x @ layer.W.T + (x @ layer.A.T) @ layer.B.T


def lora_grads(upstream: np.ndarray, x: np.ndarray, layer: LoraLayer) -> tuple[np.ndarray, np.ndarray]:
    """Gradients for ``A`` and ``B``; ``W`` receives none.

    Leading axes of ``upstream`` (..., m) and ``x`` (..., n) are summed over.
    """
    if layer.merged:
        raise LoraError("merged layer has no trainable factors")
    up = np.asarray(upstream).reshape(-1, layer.out_features)
    flat = np.asarray(x).reshape(-1, layer.in_features)
    grad_B = up.T @ (flat @ layer.A.T)
    grad_A = (up @ layer.B).T @ flat
    return grad_A, grad_B


def lora_input_grad(upstream: np.ndarray, layer: LoraLayer) -> np.ndarray:
    """dL/dx for an unmerged layer."""
    return upstream @ layer.W + (upstream @ layer.B) @ layer.A


def lora_merge(layer: LoraLayer) -> LoraLayer:
    """Fold ``B A`` into ``W`` and drop the factors."""
    if layer.merged:
        raise LoraError("layer is already merged")
    if not layer.B.any():
        merged = layer.W.copy()
    else:
        merged = layer.W + layer.B @ layer.A
    return LoraLayer(W=merged, A=None, B=None, rank=layer.rank, merged=True)


def dense_forward(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.asarray(x) @ W.T


def parameter_count(layer: LoraLayer) -> int:
    if layer.merged:
        return layer.W.size
    return layer.W.size + layer.A.size + layer.B.size


def head_forward(plane: np.ndarray, layers: Sequence[LoraLayer]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Apply the head per pixel; returns the output and each layer's input.

    Merged layers run as plain dense layers.
    """
    inputs = []
    for layer in layers:
        inputs.append(plane)
        plane = dense_forward(plane, layer.W) if layer.merged else lora_forward(plane, layer)
    return plane, inputs


def head_backward(
    grad_out: np.ndarray, layers: Sequence[LoraLayer], inputs: Sequence[np.ndarray]
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    factor_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    grad = grad_out
    for index in range(len(layers) - 1, -1, -1):
        layer = layers[index]
        factor_grads[index] = lora_grads(grad, inputs[index], layer)
        grad = lora_input_grad(grad, layer)
    return grad, factor_grads


def merge_head(layers: Sequence[LoraLayer]) -> list[LoraLayer]:
    merged = [lora_merge(layer) for layer in layers]
    logger.info("Merged %d adapter layer(s); %d parameters remain", len(merged), sum(parameter_count(l) for l in merged))
    return merged


def named_factors(layers: Sequence[LoraLayer]) -> dict[str, np.ndarray]:
    params = {}
    for index, layer in enumerate(layers):
        params[f"head.{index}.A"] = layer.A
        params[f"head.{index}.B"] = layer.B
    return params


def save_lora(path: str, layers: Sequence[LoraLayer]) -> None:
    """Write the trainable factors of every layer as a LORA checkpoint."""
    writer = BinaryWriter()
    writer.header(LORA_MAGIC, FORMAT_VERSION)
    writer.u32(len(layers))
    for layer in layers:
        if layer.merged:
            raise LoraError("cannot save factors of a merged layer")
        writer.u32(layer.out_features)
        writer.u32(layer.in_features)
        writer.u32(layer.rank)
        writer.array(layer.A, "<f4")
        writer.array(layer.B, "<f4")
    writer.save(path)


def load_lora(path: str, frozen: Sequence[np.ndarray]) -> list[LoraLayer]:
    """Read LORA factors and attach them to the given frozen weights."""
    reader = BinaryReader.from_file(path)
    reader.header(LORA_MAGIC, FORMAT_VERSION)
    count = reader.u32()
    if count != len(frozen):
        raise LoraError(f"checkpoint has {count} adapter layers, head has {len(frozen)}")
    layers = []
    for W in frozen:
        m, n, rank = reader.u32(), reader.u32(), reader.u32()
        if (m, n) != W.shape:
            raise LoraError(f"adapter shape {m}x{n} does not match frozen weight {W.shape}")
        A = reader.array(rank * n, "<f4").reshape(rank, n).astype(np.float64)
        B = reader.array(m * rank, "<f4").reshape(m, rank).astype(np.float64)
        layers.append(LoraLayer(W=W, A=A, B=B, rank=rank))
    reader.expect_end()
    return layers


def save_dense(path: str, weights: Sequence[np.ndarray]) -> None:
    """Write plain dense weights (frozen or merged) as a DENS checkpoint."""
    writer = BinaryWriter()
    writer.header(DENSE_MAGIC, FORMAT_VERSION)
    writer.u32(len(weights))
    for W in weights:
        writer.u32(W.shape[0])
        writer.u32(W.shape[1])
        writer.array(W, "<f4")
    writer.save(path)


def load_dense(path: str) -> list[np.ndarray]:
    reader = BinaryReader.from_file(path)
    reader.header(DENSE_MAGIC, FORMAT_VERSION)
    weights = []
    for _ in range(reader.u32()):
        m, n = reader.u32(), reader.u32()
        weights.append(reader.array(m * n, "<f4").reshape(m, n).astype(np.float64))
    reader.expect_end()
    return weights
