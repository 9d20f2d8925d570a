"""Register networks, losses and their exact gradients.

The register turns the dense constructed plane f_S (D channels) into
``f_proc1 = E_proc-1(f_S)`` and then ``f_reg = E_proc-2(f_src + f_proc1)``
(both D_out channels). Encoders are stacks of same-padded stride-1
convolutions with per-channel bias; every layer except an encoder's last
applies a leaky rectifier.

Convolution weights are stored as ``(k, k, C_in, C_out)``. Forward passes
run on ``sliding_window_view`` patches contracted with ``np.tensordot``;
backward passes reuse the same patch view on the padded upstream gradient
with the spatially flipped kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .featuremap import (
    FeaturePlane,
    VertexEmbeddings,
    build_dense_feature,
    dense_feature_backward,
    read_embeddings,
    write_embeddings,
)
from .utils.binary_io import BinaryReader, BinaryWriter
from .utils.logger import get_logger
from .utils.validators import first_non_finite, is_finite_array

if TYPE_CHECKING:
    from .cache_manager import PreprocessFrame

logger = get_logger(__name__)

LEAKY_SLOPE = 0.01
ALLOWED_KERNELS = (1, 3)
CHECKPOINT_MAGIC = b"RGPM"
CHECKPOINT_VERSION = 1

SeedLike = Union[int, np.random.Generator]


class RegisterError(ValueError):
    """Raised for channel mismatches, invalid layer specs and bad checkpoints."""
    pass


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    activate: bool = True

    def __post_init__(self) -> None:
        if self.kernel not in ALLOWED_KERNELS:
            raise RegisterError(f"kernel must be one of {ALLOWED_KERNELS}, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise RegisterError(f"channel counts must be positive, got {self.in_channels}->{self.out_channels}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel, self.kernel, self.in_channels, self.out_channels)


@dataclass
class ConvLayer:
    """A conv layer spec together with its weight and bias arrays."""

    spec: ConvLayerSpec
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weight.shape != self.spec.weight_shape:
            raise RegisterError(f"weight shape {self.weight.shape} does not match spec {self.spec.weight_shape}")
        if self.bias.shape != (self.spec.out_channels,):
            raise RegisterError(f"bias shape {self.bias.shape} does not match {self.spec.out_channels} output channels")


@dataclass
class ConvTape:
    """What a training forward keeps for the backward pass."""

    padded_input: np.ndarray
    pre_activation: np.ndarray


@dataclass
class RegisterTape:
    frame: "PreprocessFrame"
    f_S: FeaturePlane
    eproc1: list[ConvTape] = field(default_factory=list)
    eproc2: list[ConvTape] = field(default_factory=list)


@dataclass(frozen=True)
class LossWeights:
    lambda_feat: float = 2.0
    lambda_reg: float = 20.0

    def __post_init__(self) -> None:
        if self.lambda_feat < 0 or self.lambda_reg < 0:
            raise RegisterError(f"loss weights must be non-negative, got {self.lambda_feat}, {self.lambda_reg}")


@dataclass
class RegisterLosses:
    l_feat: float
    l_reg: float
    l_register: float


@dataclass
class RegisterParams:
    """Vertex embeddings plus both encoders."""

    emb: VertexEmbeddings
    eproc1: list[ConvLayer]
    eproc2: list[ConvLayer]

    def __post_init__(self) -> None:
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.emb.dim

    @property
    def out_dim(self) -> int:
        return self.eproc1[-1].spec.out_channels

    def validate(self) -> None:
        if not self.eproc1 or not self.eproc2:
            raise RegisterError("both encoders need at least one layer")
        _check_chain(self.eproc1, "E_proc-1")
        _check_chain(self.eproc2, "E_proc-2")
        if self.eproc1[0].spec.in_channels != self.emb.dim:
            raise RegisterError(f"E_proc-1 expects {self.eproc1[0].spec.in_channels} input channels, embeddings have {self.emb.dim}")
        d_out = self.eproc1[-1].spec.out_channels
        if self.eproc2[0].spec.in_channels != d_out or self.eproc2[-1].spec.out_channels != d_out:
            raise RegisterError(f"E_proc-2 must map {d_out} channels to {d_out} channels")

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Every trainable array by name; the arrays are the live parameters."""
        params = {"e": self.emb.e, "e_b": self.emb.e_b}
        for prefix, layers in (("eproc1", self.eproc1), ("eproc2", self.eproc2)):
            for index, layer in enumerate(layers):
                params[f"{prefix}.{index}.weight"] = layer.weight
                params[f"{prefix}.{index}.bias"] = layer.bias
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def check_finite(self) -> None:
        for name, value in self.named_parameters().items():
            if not is_finite_array(value):
                raise RegisterError(f"parameter {name} has a non-finite value at flat index {first_non_finite(value)}")


def _check_chain(layers: Sequence[ConvLayer], name: str) -> None:
    for index in range(1, len(layers)):
        previous, current = layers[index - 1].spec, layers[index].spec
        if previous.out_channels != current.in_channels:
            raise RegisterError(
                f"{name} layer {index} expects {current.in_channels} channels, previous layer gives {previous.out_channels}"
            )


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def xavier_init(shape: Sequence[int], seed: SeedLike) -> np.ndarray:
    """Zero-mean normal with std ``sqrt(2 / (fan_in + fan_out))``.

    Matrices ``(rows, cols)`` use ``fan_in = cols`` and ``fan_out = rows``.
    Conv weights ``(k, k, C_in, C_out)`` use the receptive field:
    ``fan_in = C_in k^2`` and ``fan_out = C_out k^2``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) == 4:
        field_size = shape[0] * shape[1]
        fan_in, fan_out = shape[2] * field_size, shape[3] * field_size
    else:
        raise RegisterError(f"cannot derive fan-in/fan-out from shape {shape}")
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return _rng(seed).normal(0.0, std, size=shape)


def build_encoder(in_channels: int, channels: Sequence[int], kernels: Sequence[int], seed: SeedLike) -> list[ConvLayer]:
    """Xavier-initialized encoder; biases start at zero and the last layer is linear."""
    if len(channels) != len(kernels):
        raise RegisterError(f"{len(channels)} channel sizes but {len(kernels)} kernel sizes")
    rng = _rng(seed)
    layers = []
    current = in_channels
    for index, (out, kernel) in enumerate(zip(channels, kernels)):
        spec = ConvLayerSpec(current, out, kernel, activate=index < len(channels) - 1)
        layers.append(ConvLayer(spec, xavier_init(spec.weight_shape, rng), np.zeros(out)))
        current = out
    return layers


def init_register_params(
    vertex_count: int,
    embed_dim: int,
    out_dim: int,
    seed: SeedLike,
    eproc1_channels: Optional[Sequence[int]] = None,
    eproc2_channels: Optional[Sequence[int]] = None,
) -> RegisterParams:
    """Fresh register parameters: Xavier-normal ``e`` and ``e_b``, Xavier encoders.

    ``e_b`` is drawn as a single ``(1, D)`` row, so its std is ``sqrt(2 / (1 + D))``.
    """
    rng = _rng(seed)
    eproc1_channels = list(eproc1_channels or [embed_dim, embed_dim, out_dim, out_dim])
    eproc2_channels = list(eproc2_channels or [out_dim] * 4)
    e = xavier_init((vertex_count, embed_dim), rng)
    emb = VertexEmbeddings(e=e, e_b=xavier_init((1, embed_dim), rng)[0])
    eproc1 = build_encoder(embed_dim, eproc1_channels, [3] * len(eproc1_channels), rng)
    eproc2 = build_encoder(out_dim, eproc2_channels, [3] * (len(eproc2_channels) - 1) + [1], rng)
    return RegisterParams(emb=emb, eproc1=eproc1, eproc2=eproc2)


def leaky_relu(values: np.ndarray) -> np.ndarray:
    return np.where(values > 0, values, LEAKY_SLOPE * values)


def _patches(padded: np.ndarray, kernel: int) -> np.ndarray:
    # (H, W, C, k, k)
    return sliding_window_view(padded, (kernel, kernel), axis=(0, 1))


def _pad(values: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return values
    return np.pad(values, ((pad, pad), (pad, pad), (0, 0)))


def conv2d_forward_train(plane: FeaturePlane, layer: ConvLayer) -> tuple[FeaturePlane, ConvTape]:
    spec = layer.spec
    if plane.ndim != 3 or plane.shape[2] != spec.in_channels:
        raise RegisterError(f"conv layer expects {spec.in_channels} input channels, got shape {plane.shape}")
    padded = _pad(plane, spec.padding)
    pre = np.tensordot(_patches(padded, spec.kernel), layer.weight, axes=([3, 4, 2], [0, 1, 2])) + layer.bias
    out = leaky_relu(pre) if spec.activate else pre
    return out, ConvTape(padded_input=padded, pre_activation=pre)


def conv2d_forward(plane: FeaturePlane, layer: ConvLayer) -> FeaturePlane:
    """Same-padded cross-correlation plus bias and optional leaky rectifier."""
    return conv2d_forward_train(plane, layer)[0]


def conv2d_backward(grad_out: np.ndarray, layer: ConvLayer, tape: ConvTape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode gradients of one conv layer.

    Returns
    -------
    tuple
        ``(grad_input, grad_weight, grad_bias)`` shaped like the input plane,
        the weight and the bias.
    """
    spec = layer.spec
    if grad_out.shape != tape.pre_activation.shape:
        raise RegisterError(f"upstream gradient shape {grad_out.shape} does not match output {tape.pre_activation.shape}")
    grad_pre = grad_out * np.where(tape.pre_activation > 0, 1.0, LEAKY_SLOPE) if spec.activate else grad_out
    grad_bias = grad_pre.sum(axis=(0, 1))
    grad_weight = np.tensordot(_patches(tape.padded_input, spec.kernel), grad_pre, axes=([0, 1], [0, 1])).transpose(1, 2, 0, 3)
    flipped = layer.weight[::-1, ::-1]
    grad_input = np.tensordot(_patches(_pad(grad_pre, spec.padding), spec.kernel), flipped, axes=([3, 4, 2], [0, 1, 3]))
    return grad_input, grad_weight, grad_bias


def encoder_forward_train(plane: FeaturePlane, layers: Sequence[ConvLayer]) -> tuple[FeaturePlane, list[ConvTape]]:
    tapes = []
    for layer in layers:
        plane, tape = conv2d_forward_train(plane, layer)
        tapes.append(tape)
    return plane, tapes


def encoder_forward(plane: FeaturePlane, layers: Sequence[ConvLayer]) -> FeaturePlane:
    for layer in layers:
        plane = conv2d_forward(plane, layer)
    return plane


def encoder_backward(
    grad_out: np.ndarray, layers: Sequence[ConvLayer], tapes: Sequence[ConvTape]
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    grad = grad_out
    for index in range(len(layers) - 1, -1, -1):
        grad, grad_weight, grad_bias = conv2d_backward(grad, layers[index], tapes[index])
        layer_grads[index] = (grad_weight, grad_bias)
    return grad, layer_grads


def register_forward(f_src: FeaturePlane, f_S: FeaturePlane, params: RegisterParams) -> tuple[FeaturePlane, FeaturePlane]:
    """Run both encoders.

    Returns
    -------
    tuple
        ``(f_proc1, f_reg)``, each ``(H, W, D_out)``.
    """
    _check_inputs(f_src, f_S, params)
    f_proc1 = encoder_forward(f_S, params.eproc1)
    f_reg = encoder_forward(f_src + f_proc1, params.eproc2)
    return f_proc1, f_reg


def _check_inputs(f_src: FeaturePlane, f_S: FeaturePlane, params: RegisterParams) -> None:
    if f_S.ndim != 3 or f_S.shape[2] != params.embed_dim:
        raise RegisterError(f"f_S must have {params.embed_dim} channels, got shape {f_S.shape}")
    if f_src.shape != f_S.shape[:2] + (params.out_dim,):
        raise RegisterError(f"f_src must have shape {f_S.shape[:2] + (params.out_dim,)}, got {f_src.shape}")


def register_forward_train(
    f_src: FeaturePlane, f_S: FeaturePlane, params: RegisterParams, frame: "PreprocessFrame"
) -> tuple[FeaturePlane, FeaturePlane, RegisterTape]:
    _check_inputs(f_src, f_S, params)
    f_proc1, tapes1 = encoder_forward_train(f_S, params.eproc1)
    f_reg, tapes2 = encoder_forward_train(f_src + f_proc1, params.eproc2)
    return f_proc1, f_reg, RegisterTape(frame=frame, f_S=f_S, eproc1=tapes1, eproc2=tapes2)


def register_backward(grad_f_reg: np.ndarray, params: RegisterParams, tape: RegisterTape) -> dict[str, np.ndarray]:
    """Gradients of a scalar w.r.t. every register parameter given dL/df_reg.

    ``f_src`` is a constant input and receives no gradient.
    """
    grad_sum, grads2 = encoder_backward(grad_f_reg, params.eproc2, tape.eproc2)
    grad_f_S, grads1 = encoder_backward(grad_sum, params.eproc1, tape.eproc1)
    grad_e, grad_e_b = dense_feature_backward(grad_f_S, tape.frame, params.emb.vertex_count)
    grads = {"e": grad_e, "e_b": grad_e_b}
    for prefix, layer_grads in (("eproc1", grads1), ("eproc2", grads2)):
        for index, (grad_weight, grad_bias) in enumerate(layer_grads):
            grads[f"{prefix}.{index}.weight"] = grad_weight
            grads[f"{prefix}.{index}.bias"] = grad_bias
    return grads


def loss_feat(f_dri: FeaturePlane, f_reg: FeaturePlane) -> float:
    """Mean squared difference over all H*W*C elements."""
    if f_dri.shape != f_reg.shape:
        raise RegisterError(f"feature shapes differ: {f_dri.shape} vs {f_reg.shape}")
    diff = np.asarray(f_reg, dtype=np.float64) - np.asarray(f_dri, dtype=np.float64)
    return float(np.mean(diff * diff))


def loss_feat_grad(f_dri: FeaturePlane, f_reg: FeaturePlane) -> np.ndarray:
    """dL_feat/df_reg."""
    if f_dri.shape != f_reg.shape:
        raise RegisterError(f"feature shapes differ: {f_dri.shape} vs {f_reg.shape}")
    return 2.0 * (np.asarray(f_reg, dtype=np.float64) - f_dri) / f_reg.size


def _unit_rows(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise RegisterError(f"pcos expects a matrix, got shape {values.shape}")
    norms = np.linalg.norm(values, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise RegisterError(f"row {int(zero[0])} has zero norm; cosine similarity is undefined")
    return values / norms[:, None], norms


def pcos(values: np.ndarray) -> float:
    """Sum of the off-diagonal entries of the row-wise cosine matrix."""
    unit, _ = _unit_rows(values)
    return float((unit @ unit.T).sum() - len(unit))


def pcos_grad(values: np.ndarray) -> np.ndarray:
    unit, norms = _unit_rows(values)
    total = unit.sum(axis=0)
    along = unit @ total
    return 2.0 * (total[None, :] - along[:, None] * unit) / norms[:, None]


def _pair_count(emb: VertexEmbeddings) -> int:
    n = emb.vertex_count
    if n < 2:
        raise RegisterError(f"L_reg needs at least 2 vertices, got {n}")
    return n * (n - 1)


def loss_reg(emb: VertexEmbeddings) -> float:
    """``pcos(e) / (n(V) (n(V) - 1))``; ``e_b`` is not regularized."""
    return pcos(emb.e) / _pair_count(emb)


def loss_reg_grad(emb: VertexEmbeddings) -> np.ndarray:
    """dL_reg/de."""
    return pcos_grad(emb.e) / _pair_count(emb)


def loss_register(l_feat: float, l_reg: float, weights: LossWeights) -> float:
    return weights.lambda_feat * l_feat + weights.lambda_reg * l_reg


def register_objective(
    params: RegisterParams,
    frame: "PreprocessFrame",
    f_src: FeaturePlane,
    f_dri: FeaturePlane,
    weights: LossWeights,
) -> tuple[RegisterLosses, dict[str, np.ndarray]]:
    """L_register for one driving frame with f_reg compared to f_dri directly.

    Returns the losses and the gradient of L_register for every named
    parameter.
    """
    f_S = build_dense_feature(params.emb, frame)
    _, f_reg, tape = register_forward_train(f_src, f_S, params, frame)
    l_feat = loss_feat(f_dri, f_reg)
    l_reg = loss_reg(params.emb)
    grads = register_backward(weights.lambda_feat * loss_feat_grad(f_dri, f_reg), params, tape)
    grads["e"] = grads["e"] + weights.lambda_reg * loss_reg_grad(params.emb)
    losses = RegisterLosses(l_feat=l_feat, l_reg=l_reg, l_register=loss_register(l_feat, l_reg, weights))
    return losses, grads


def _write_layers(writer: BinaryWriter, layers: Sequence[ConvLayer]) -> None:
    for layer in layers:
        spec = layer.spec
        writer.u32(spec.kernel)
        writer.u32(spec.in_channels)
        writer.u32(spec.out_channels)
        writer.u32(int(spec.activate))
        writer.array(layer.weight, "<f4")
        writer.array(layer.bias, "<f4")


def _read_layers(reader: BinaryReader, count: int) -> list[ConvLayer]:
    layers = []
    for _ in range(count):
        kernel, cin, cout, activate = reader.u32(), reader.u32(), reader.u32(), reader.u32()
        spec = ConvLayerSpec(cin, cout, kernel, activate=bool(activate))
        weight = reader.array(kernel * kernel * cin * cout, "<f4").reshape(spec.weight_shape).astype(np.float64)
        bias = reader.array(cout, "<f4").astype(np.float64)
        layers.append(ConvLayer(spec, weight, bias))
    return layers


def save_register(path: str, params: RegisterParams) -> None:
    """Write an RGPM checkpoint (embeddings block, then both encoders)."""
    params.check_finite()
    writer = BinaryWriter()
    writer.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    write_embeddings(writer, params.emb)
    writer.u32(len(params.eproc1))
    writer.u32(len(params.eproc2))
    _write_layers(writer, params.eproc1)
    _write_layers(writer, params.eproc2)
    writer.save(path)


def load_register(path: str) -> RegisterParams:
    reader = BinaryReader.from_file(path)
    reader.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    emb = read_embeddings(reader)
    n_eproc1, n_eproc2 = reader.u32(), reader.u32()
    eproc1 = _read_layers(reader, n_eproc1)
    eproc2 = _read_layers(reader, n_eproc2)
    reader.expect_end()
    return RegisterParams(emb=emb, eproc1=eproc1, eproc2=eproc2)
