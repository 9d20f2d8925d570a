"""Adaptation training and merged inference.

Training follows the source/driving scheme: the frame of pose 0 is the
source, each iteration samples ``batch_size`` driving frames with
replacement. For a driving frame the register builds f_S from the cached
geometry, computes ``f_reg = E_proc-2(f_src + E_proc-1(f_S))`` and a
LoRA-equipped per-pixel dense head maps f_reg to the prediction compared
with the driving features:

    L_register = lambda_feat * mean_b L_feat(head(f_reg_b), f_dri_b) + lambda_reg * L_reg(e)

Inference skips the register entirely: the LoRA factors are merged into the
head and the source features pass straight through it.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .cache_manager import PreprocessCache, PreprocessFrame, build_frame
from .config_manager import AdaptConfig
from .featuremap import FeaturePlane, build_dense_feature, load_plane
from .geometry import TriMesh, look_at, make_icosphere, make_intrinsics
from .lora import (
    LoraLayer,
    head_backward,
    head_forward,
    load_dense,
    load_lora,
    lora_init,
    merge_head,
    named_factors,
    parameter_count,
    save_dense,
    save_lora,
)
from .optim import AdamState, GradCheckReport, LinearSchedule, ParamGroup, adam_step, gradcheck, schedule_factor
from .registers import (
    LossWeights,
    RegisterLosses,
    RegisterParams,
    init_register_params,
    loss_feat,
    loss_feat_grad,
    loss_reg,
    loss_reg_grad,
    loss_register,
    register_backward,
    register_forward,
    register_forward_train,
    save_register,
    xavier_init,
)
from .synth import feature_path
from .utils.logger import get_logger
from .utils.performance import resource_summary

REGISTER_FILE = "register.rgpm"
ADAPTER_FILE = "adapter.lora"
HEAD_FILE = "head.dens"
MERGED_HEAD_FILE = "merged_head.dens"
METRICS_FILE = "metrics.csv"
METRICS_HEADER = ("iter", "lr_factor", "l_feat", "l_reg", "l_register")
SOURCE_POSE = 0


class TrainingError(RuntimeError):
    """Raised when training inputs are missing or inconsistent."""
    pass


class InferenceError(RuntimeError):
    """Raised when inference is requested on an unmerged path or a bad checkpoint."""
    pass


@dataclass
class AdapterModel:
    """Register parameters plus the LoRA adapter head."""

    register: RegisterParams
    head: list[LoraLayer]

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = self.register.named_parameters()
        params.update(named_factors(self.head))
        return params


@dataclass
class TrainingSample:
    pose_index: int
    frame: PreprocessFrame
    f_dri: FeaturePlane


@dataclass
class MetricsRow:
    iteration: int
    lr_factor: float
    l_feat: float
    l_reg: float
    l_register: float

    def as_csv(self) -> list:
        return [self.iteration, repr(self.lr_factor), repr(self.l_feat), repr(self.l_reg), repr(self.l_register)]


@dataclass
class InferenceResult:
    plane: FeaturePlane
    parameter_count: int
    base_parameter_count: int
    head: list[LoraLayer]


def init_head(out_dim: int, rank: int, seed) -> list[LoraLayer]:
    """One frozen ``D_out x D_out`` layer with a fresh adapter.

    The frozen weight is rounded to float32 so that the DENS checkpoint
    reproduces it exactly.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    W = xavier_init((out_dim, out_dim), rng).astype(np.float32).astype(np.float64)
    return [lora_init(W, rank=rank, seed=rng)]


def init_model(config: AdaptConfig, vertex_count: int, seed) -> AdapterModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    register = init_register_params(
        vertex_count,
        config.embed_dim,
        config.out_dim,
        rng,
        eproc1_channels=config.eproc1_channels,
        eproc2_channels=config.eproc2_channels,
    )
    return AdapterModel(register=register, head=init_head(config.out_dim, config.lora_rank, rng))


def adapted_forward(f_src: FeaturePlane, frame: Optional[PreprocessFrame], model: AdapterModel, use_register: bool = True) -> FeaturePlane:
    """Training-path prediction for one driving frame.

    With ``use_register=False`` the source features go straight into the
    unmerged head, which is what merged inference must reproduce.
    """
    features = f_src
    if use_register:
        f_S = build_dense_feature(model.register.emb, frame)
        _, features = register_forward(f_src, f_S, model.register)
    return head_forward(features, model.head)[0]


def adaptation_objective(
    model: AdapterModel,
    f_src: FeaturePlane,
    samples: Sequence[TrainingSample],
    weights: LossWeights,
) -> tuple[RegisterLosses, dict[str, np.ndarray]]:
    """L_register over a batch and its gradient for every trainable array.

    Per-sample gradients are summed in batch order.
    """
    if not samples:
        raise TrainingError("empty batch")
    register = model.register
    grads = {name: np.zeros_like(value) for name, value in model.named_parameters().items()}
    l_feat = 0.0
    scale = weights.lambda_feat / len(samples)
    for sample in samples:
        f_S = build_dense_feature(register.emb, sample.frame)
        _, f_reg, tape = register_forward_train(f_src, f_S, register, sample.frame)
        prediction, head_inputs = head_forward(f_reg, model.head)
        l_feat += loss_feat(sample.f_dri, prediction)
        grad_f_reg, factor_grads = head_backward(scale * loss_feat_grad(sample.f_dri, prediction), model.head, head_inputs)
        for name, grad in register_backward(grad_f_reg, register, tape).items():
            grads[name] += grad
        for index, (grad_A, grad_B) in enumerate(factor_grads):
            grads[f"head.{index}.A"] += grad_A
            grads[f"head.{index}.B"] += grad_B
    l_feat /= len(samples)
    l_reg = loss_reg(register.emb)
    grads["e"] += weights.lambda_reg * loss_reg_grad(register.emb)
    return RegisterLosses(l_feat=l_feat, l_reg=l_reg, l_register=loss_register(l_feat, l_reg, weights)), grads


def load_features(directory: str, cache: PreprocessCache, channels: int) -> dict[int, FeaturePlane]:
    """Read the feature plane of every cached pose as float64."""
    features = {}
    for frame in cache.frames:
        path = feature_path(directory, frame.pose_index)
        if not os.path.exists(path):
            raise TrainingError(f"missing feature plane for pose {frame.pose_index}: {path}")
        plane = load_plane(path).astype(np.float64)
        if plane.shape != (cache.height, cache.width, channels):
            raise TrainingError(
                f"feature plane {path} has shape {plane.shape}, expected {(cache.height, cache.width, channels)}"
            )
        features[frame.pose_index] = plane
    return features


class AdaptationTrainer:
    """Run the adaptation loop for one mesh and its cached poses.

    Parameters
    ----------
    config: AdaptConfig
        Resolved configuration; grid size, k and alpha must match the cache.
    mesh: TriMesh
        The mesh the cache was built for.
    cache: PreprocessCache
        Preprocessed frames; must contain the source pose.
    features: mapping
        Target feature plane per pose index, (H, W, D_out).
    """

    def __init__(self, config: AdaptConfig, mesh: TriMesh, cache: PreprocessCache, features: Mapping[int, FeaturePlane]):
        self.config = config
        self.mesh = mesh
        self.cache = cache
        self.logger = get_logger(self.__class__.__name__)
        self._check_inputs(features)
        self.features = dict(features)
        self.frames = {frame.pose_index: frame for frame in cache.frames}
        self.pose_indices = sorted(self.frames)
        init_seed, sample_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.model = init_model(config, mesh.vertex_count, np.random.default_rng(init_seed))
        self.sampler = np.random.default_rng(sample_seed)
        self.weights = LossWeights(config.lambda_feat, config.lambda_reg)
        self.schedule = LinearSchedule(config.lr_start_factor, config.lr_end_factor, max(config.iterations, 1))
        self.state = AdamState(
            groups=[
                ParamGroup("lora", named_factors(self.model.head), config.lr_lora),
                ParamGroup("register", self.model.register.named_parameters(), config.lr_register),
            ]
        )
        self.history: list[MetricsRow] = []

    def _check_inputs(self, features: Mapping[int, FeaturePlane]) -> None:
        config, cache = self.config, self.cache
        if (cache.height, cache.width) != (config.height, config.width):
            raise TrainingError(f"cache grid {cache.height}x{cache.width} does not match config {config.height}x{config.width}")
        if cache.k != config.knn_k or cache.alpha != config.alpha:
            raise TrainingError(f"cache was built with k={cache.k}, alpha={cache.alpha}; config has k={config.knn_k}, alpha={config.alpha}")
        if cache.vertex_count != self.mesh.vertex_count:
            raise TrainingError(f"cache covers {cache.vertex_count} vertices, mesh has {self.mesh.vertex_count}")
        if SOURCE_POSE not in {frame.pose_index for frame in cache.frames}:
            raise TrainingError(f"source pose {SOURCE_POSE} has no cached frame")
        for frame in cache.frames:
            if frame.pose_index not in features:
                raise TrainingError(f"no target features for pose {frame.pose_index}")
            shape = features[frame.pose_index].shape
            if shape != (config.height, config.width, config.out_dim):
                raise TrainingError(f"features for pose {frame.pose_index} have shape {shape}")

    @property
    def f_src(self) -> FeaturePlane:
        return self.features[SOURCE_POSE]

    def sample_batch(self) -> list[TrainingSample]:
        picks = self.sampler.integers(0, len(self.pose_indices), size=self.config.batch_size)
        samples = []
        for pick in picks:
            index = self.pose_indices[int(pick)]
            samples.append(TrainingSample(pose_index=index, frame=self.frames[index], f_dri=self.features[index]))
        return samples

    def run(self, metrics_path: Optional[str] = None) -> list[MetricsRow]:
        """Train for ``config.iterations`` steps and return the metrics rows.

        The loss is recorded before each update; with zero iterations a
        single row for the initial parameters is recorded.
        """
        iterations = self.config.iterations
        self.logger.info(
            "Adapting %d vertices over %d poses: %d iterations, batch %d",
            self.mesh.vertex_count, len(self.pose_indices), iterations, self.config.batch_size,
        )
        handle = open(metrics_path, "w", newline="", encoding="utf-8") if metrics_path else None
        try:
            writer = csv.writer(handle) if handle else None
            if writer:
                writer.writerow(METRICS_HEADER)
            for iteration in range(max(iterations, 1)):
                factor = schedule_factor(iteration, self.schedule)
                losses, grads = adaptation_objective(self.model, self.f_src, self.sample_batch(), self.weights)
                row = MetricsRow(iteration, factor, losses.l_feat, losses.l_reg, losses.l_register)
                self.history.append(row)
                if writer:
                    writer.writerow(row.as_csv())
                if iteration < iterations:
                    adam_step(self.state, grads, factor)
                if iteration % self.config.log_every == 0 or iteration == iterations - 1:
                    self.logger.info(
                        "iter %d: L_register=%.6f L_feat=%.6f L_reg=%.6f lr_factor=%.4f %s",
                        iteration, losses.l_register, losses.l_feat, losses.l_reg, factor, resource_summary(),
                    )
        finally:
            if handle:
                handle.close()
        return self.history

    def save(self, out_dir: str) -> dict[str, str]:
        """Write the register, adapter and frozen-head checkpoints."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "register": os.path.join(out_dir, REGISTER_FILE),
            "adapter": os.path.join(out_dir, ADAPTER_FILE),
            "head": os.path.join(out_dir, HEAD_FILE),
        }
        save_register(paths["register"], self.model.register)
        save_lora(paths["adapter"], self.model.head)
        save_dense(paths["head"], [layer.W for layer in self.model.head])
        self.logger.info("Checkpoints written to %s", out_dir)
        return paths


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    sums = np.cumsum(values)
    out = np.empty_like(values)
    for index in range(len(values)):
        start = max(0, index - window + 1)
        out[index] = (sums[index] - (sums[start - 1] if start else 0.0)) / (index - start + 1)
    return out


def load_head(run_dir: str) -> list[LoraLayer]:
    """Frozen head weights with their trained adapters, unmerged."""
    head_path = os.path.join(run_dir, HEAD_FILE)
    adapter_path = os.path.join(run_dir, ADAPTER_FILE)
    for path in (head_path, adapter_path):
        if not os.path.exists(path):
            raise InferenceError(f"checkpoint file not found: {path}")
    return load_lora(adapter_path, load_dense(head_path))


def run_inference(run_dir: str, f_src: FeaturePlane, merged: bool = True) -> InferenceResult:
    """Merge the adapters and pass the source features through the head.

    Neither the vertex embeddings nor the encoders are read.
    """
    if not merged:
        raise InferenceError("inference runs on merged adapters only; the factored path is for training")
    layers = load_head(run_dir)
    if f_src.shape[-1] != layers[0].in_features:
        raise InferenceError(f"source features have {f_src.shape[-1]} channels, head expects {layers[0].in_features}")
    base = sum(layer.W.size for layer in layers)
    merged_layers = merge_head(layers)
    plane, _ = head_forward(np.asarray(f_src, dtype=np.float64), merged_layers)
    count = sum(parameter_count(layer) for layer in merged_layers)
    if count != base:
        raise InferenceError(f"merged head has {count} parameters, base head has {base}")
    return InferenceResult(plane=plane, parameter_count=count, base_parameter_count=base, head=merged_layers)


@dataclass
class DeskInstance:
    """A tiny fully specified adaptation problem for gradient checks."""

    mesh: TriMesh
    frames: list[PreprocessFrame]
    model: AdapterModel
    f_src: FeaturePlane
    targets: list[FeaturePlane]
    weights: LossWeights = field(default_factory=LossWeights)

    def samples(self) -> list[TrainingSample]:
        return [TrainingSample(frame.pose_index, frame, target) for frame, target in zip(self.frames, self.targets)]


DESK_SIZE = 8
DESK_EMBED_DIM = 6
DESK_OUT_DIM = 4
DESK_K = 3
DESK_RANK = 2


def build_desk_instance(seed: int = 0) -> DeskInstance:
    """Icosahedron (12 vertices) seen on an 8x8 grid, D=6, D_out=4, k=3.

    ``B`` is drawn small but non-zero so that ``A`` receives gradient.
    """
    rng = np.random.default_rng(seed)
    mesh = make_icosphere(0)
    intr = make_intrinsics(DESK_SIZE, DESK_SIZE, fov_deg=60.0)
    poses = [look_at((0.0, 0.0, 3.0)), look_at((0.5, 0.3, 2.9))]
    frames = [build_frame(mesh, pose, intr, alpha=0.0, k=DESK_K, pose_index=index) for index, pose in enumerate(poses)]
    config = AdaptConfig(
        height=DESK_SIZE, width=DESK_SIZE, embed_dim=DESK_EMBED_DIM, out_dim=DESK_OUT_DIM,
        knn_k=DESK_K, alpha=0.0, lora_rank=DESK_RANK,
    )
    model = init_model(config, mesh.vertex_count, rng)
    for layer in model.head:
        layer.B[...] = rng.normal(0.0, 0.1, size=layer.B.shape)
    model.register.emb.e_b[...] = rng.normal(0.0, 0.1, size=DESK_EMBED_DIM)
    shape = (DESK_SIZE, DESK_SIZE, DESK_OUT_DIM)
    f_src = rng.normal(size=shape)
    targets = [rng.normal(size=shape) for _ in frames]
    return DeskInstance(mesh=mesh, frames=frames, model=model, f_src=f_src, targets=targets)


def gradcheck_desk(seed: int = 0, h: float = 1e-6, tolerance: float = 1e-4, max_coords: Optional[int] = None) -> GradCheckReport:
    """Finite-difference check of the full adaptation objective on the desk instance.

    Covers e, e_b, every encoder weight and bias, and the adapter factors.
    """
    instance = build_desk_instance(seed)
    samples = instance.samples()
    params = instance.model.named_parameters()
    _, grads = adaptation_objective(instance.model, instance.f_src, samples, instance.weights)

    def loss_fn(_: Mapping[str, np.ndarray]) -> float:
        return adaptation_objective(instance.model, instance.f_src, samples, instance.weights)[0].l_register

    return gradcheck(loss_fn, params, grads, h=h, tolerance=tolerance, max_coords=max_coords, seed=seed)
