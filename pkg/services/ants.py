"""
ANTs: a small aggregation network of 3D convolutions.

The correlation volume is reshaped onto the source grid, concatenated with
the source and target feature channels and passed through a few 3x3x3
convolutions (zero padding 1, stride 1, ReLU between layers). The last
layer emits THW channels, which read back as a (THW) x (THW) match volume.

Training supervises the soft-argmax displacement at sparse ground-truth
keypoints with an L2 loss. Gradients are computed analytically; float64
parameters give a shadow mode used by the finite-difference check.
"""
import os
import json
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.feature_pipeline import CorrVolume, FeaturePyramid
from services.stmatch import DEFAULT_TEMPERATURE, MatchVolume, VideoDims, soft_argmax_weights, to_grid
from services.tensor_core import GridShape, read_tensor, trilinear_weights, write_tensor
from utils.errors import ConfigError, ShapeError, TrainingDivergedError
from utils.logger import setup_logger

logger = setup_logger(__name__)

KERNEL = 3


@dataclass
class AntsConfig:
    """Network shape; the input width follows from the pyramids it will see"""
    grid: GridShape
    n_layers: int = 2
    hidden_channels: int = 16
    m: int = 1
    src_channels: Tuple[int, ...] = ()
    tgt_channels: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_channels < 1 or self.m < 1:
            raise ConfigError("hidden_channels and m must be positive")
        self.src_channels = tuple(int(c) for c in self.src_channels)
        self.tgt_channels = tuple(int(c) for c in self.tgt_channels)

    @classmethod
    def for_pyramids(cls, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid,
                     n_layers: int = 2, hidden_channels: int = 16) -> "AntsConfig":
        return cls(grid=pyr_s.grid, n_layers=n_layers, hidden_channels=hidden_channels,
                   m=pyr_s.m, src_channels=tuple(pyr_s.channels), tgt_channels=tuple(pyr_t.channels))

    @property
    def in_channels(self) -> int:
        return self.m * self.grid.cells + sum(self.src_channels) + sum(self.tgt_channels)

    def layer_channels(self) -> List[Tuple[int, int]]:
        """(C_out, C_in) per layer; the last layer always emits THW channels"""
        widths = [self.in_channels] + [self.hidden_channels] * (self.n_layers - 1) + [self.grid.cells]
        return [(widths[i + 1], widths[i]) for i in range(self.n_layers)]

    def to_dict(self) -> dict:
        return {'grid': str(self.grid), 'n_layers': self.n_layers, 'hidden_channels': self.hidden_channels,
                'm': self.m, 'src_channels': list(self.src_channels), 'tgt_channels': list(self.tgt_channels)}

    @classmethod
    def from_dict(cls, raw: dict) -> "AntsConfig":
        return cls(grid=GridShape.parse(raw['grid']), n_layers=int(raw['n_layers']),
                   hidden_channels=int(raw['hidden_channels']), m=int(raw['m']),
                   src_channels=tuple(raw['src_channels']), tgt_channels=tuple(raw['tgt_channels']))


@dataclass
class ConvLayer:
    kernel: np.ndarray  # [C_out, C_in, 3, 3, 3]
    bias: np.ndarray    # [C_out]


@dataclass
class AntsParams:
    layers: List[ConvLayer]

    @property
    def dtype(self):
        return self.layers[0].kernel.dtype

    def astype(self, dtype) -> "AntsParams":
        return AntsParams([ConvLayer(l.kernel.astype(dtype), l.bias.astype(dtype)) for l in self.layers])

    def copy(self) -> "AntsParams":
        return self.astype(self.dtype)

    def arrays(self) -> List[np.ndarray]:
        """Kernel, bias, kernel, bias, ... (views, not copies)"""
        return [a for layer in self.layers for a in (layer.kernel, layer.bias)]

    def sgd_step(self, grads: "AntsParams", lr: float) -> "AntsParams":
        return AntsParams([
            ConvLayer(p.kernel - lr * g.kernel, p.bias - lr * g.bias)
            for p, g in zip(self.layers, grads.layers)
        ])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a.astype(np.float64) ** 2) for a in self.arrays())))


@dataclass(frozen=True)
class GtCorrespondence:
    """Source keypoint position and its ground-truth displacement, both in grid units"""
    position: Tuple[float, float, float]
    displacement: Tuple[float, float, float]


@dataclass
class TrainingPair:
    corr: CorrVolume
    pyr_s: FeaturePyramid
    pyr_t: FeaturePyramid
    gts: List[GtCorrespondence]


@dataclass
class TrainResult:
    params: AntsParams
    losses: List[float] = field(default_factory=list)


def ants_init(config: AntsConfig, seed: int, zero: bool = False, dtype=np.float32) -> AntsParams:
    """Uniform(-a, a) kernels with a = sqrt(1 / (C_in * 27)), zero biases"""
    rng = np.random.default_rng(seed)
    layers = []
    for c_out, c_in in config.layer_channels():
        shape = (c_out, c_in, KERNEL, KERNEL, KERNEL)
        if zero:
            kernel = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(1.0 / (c_in * KERNEL ** 3))
            kernel = rng.uniform(-bound, bound, size=shape).astype(dtype)
        layers.append(ConvLayer(kernel=kernel, bias=np.zeros(c_out, dtype=dtype)))
    return AntsParams(layers)


# ---------------------------------------------------------------------------
# 3D convolution


def _patches(x: np.ndarray) -> np.ndarray:
    """[C, T, H, W] -> zero-padded 3x3x3 windows [C, T, H, W, 3, 3, 3] (a view)"""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    return sliding_window_view(padded, (KERNEL, KERNEL, KERNEL), axis=(1, 2, 3))


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 3D convolution (cross-correlation), stride 1, zero padding 1"""
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, got {x.shape[0]}")
    out = np.tensordot(_patches(x), kernel, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
    return np.moveaxis(out, 3, 0) + bias[:, None, None, None]


def conv3d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """
    Gradients of conv3d_forward.

    Returns:
        (d_input or None, d_kernel, d_bias)
    """
    d_kernel = np.tensordot(grad_out, _patches(x), axes=([1, 2, 3], [1, 2, 3]))
    d_bias = grad_out.sum(axis=(1, 2, 3))
    d_input = None
    if need_input_grad:
        flipped = kernel[:, :, ::-1, ::-1, ::-1]
        d_input = np.moveaxis(np.tensordot(_patches(grad_out), flipped, axes=([0, 4, 5, 6], [0, 2, 3, 4])), 3, 0)
    return d_input, d_kernel, d_bias


# ---------------------------------------------------------------------------
# network


def build_input(corr: CorrVolume, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid, dtype=np.float32) -> np.ndarray:
    """
    Network input [M*THW + sum(C_s) + sum(C_t), T, H, W] on the source grid.

    Channel m*THW + q at source cell s holds corr[m, s, q]; the source then
    target feature channels follow.
    """
    grid = corr.grid
    if pyr_s.grid != grid or pyr_t.grid != grid:
        raise ShapeError(f"pyramids ({pyr_s.grid}, {pyr_t.grid}) and correlation ({grid}) grids differ")
    n = grid.cells
    corr_part = corr.scores.transpose(0, 2, 1).reshape(corr.m * n, grid.t, grid.h, grid.w)
    return np.concatenate([corr_part] + list(pyr_s.layers) + list(pyr_t.layers), axis=0).astype(dtype)


def _forward(x: np.ndarray, params: AntsParams):
    """Run the conv stack; cache holds (input, pre-activation) per layer"""
    cache = []
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        pre = conv3d_forward(h, layer.kernel, layer.bias)
        cache.append((h, pre))
        h = pre if i == last else np.maximum(pre, 0)
    return h, cache


def ants_forward(corr: CorrVolume, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid, params: AntsParams) -> MatchVolume:
    """Match volume predicted by the network; row s = source cell, column q = target cell"""
    x = build_input(corr, pyr_s, pyr_t, dtype=params.dtype)
    if x.shape[0] != params.layers[0].kernel.shape[1]:
        raise ShapeError(f"network expects {params.layers[0].kernel.shape[1]} input channels, got {x.shape[0]}")
    out, _ = _forward(x, params)
    n = corr.grid.cells
    return MatchVolume(grid=corr.grid, scores=out.reshape(n, n).T)


def _gt_arrays(gts: Sequence[GtCorrespondence]) -> Tuple[np.ndarray, np.ndarray]:
    if not gts:
        raise ValueError("sparse flow loss needs at least one ground-truth correspondence")
    positions = np.array([g.position for g in gts], dtype=np.float64)
    displacements = np.array([g.displacement for g in gts], dtype=np.float64)
    return positions, displacements


def _loss_and_score_grad(scores: np.ndarray, grid: GridShape, gts: Sequence[GtCorrespondence],
                         temperature: float, need_grad: bool = True):
    positions, targets = _gt_arrays(gts)
    coords = grid.coords()
    weights = soft_argmax_weights(scores, temperature)
    displacement = weights @ coords - coords

    idx, corner_w = trilinear_weights(positions, grid)
    predicted = np.einsum('nk,nkd->nd', corner_w, displacement[idx])
    error = predicted - targets
    loss = float(np.mean(np.sum(error ** 2, axis=1)))
    if not need_grad:
        return loss, None

    d_pred = 2.0 * error / len(gts)
    d_disp = np.zeros_like(displacement)
    np.add.at(d_disp, idx, corner_w[:, :, None] * d_pred[:, None, :])
    d_weights = d_disp @ coords.T
    d_logits = weights * (d_weights - np.sum(weights * d_weights, axis=1, keepdims=True))
    return loss, d_logits / temperature


def sparse_flow_loss(mv: MatchVolume, gts: Sequence[GtCorrespondence],
                     temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Mean squared distance between soft-argmax displacements and ground truth at the GT positions"""
    loss, _ = _loss_and_score_grad(mv.scores, mv.grid, gts, temperature, need_grad=False)
    return loss


def ants_gradient(corr: CorrVolume, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid, params: AntsParams,
                  gts: Sequence[GtCorrespondence], temperature: float = DEFAULT_TEMPERATURE) -> Tuple[float, AntsParams]:
    """Loss and its gradient with respect to every kernel and bias"""
    x = build_input(corr, pyr_s, pyr_t, dtype=params.dtype)
    out, cache = _forward(x, params)
    grid = corr.grid
    n = grid.cells

    loss, d_scores = _loss_and_score_grad(out.reshape(n, n).T, grid, gts, temperature)
    grad = d_scores.T.reshape(n, grid.t, grid.h, grid.w).astype(params.dtype)

    grads: List[Optional[ConvLayer]] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer_in, _ = cache[i]
        d_in, d_kernel, d_bias = conv3d_backward(layer_in, params.layers[i].kernel, grad, need_input_grad=i > 0)
        grads[i] = ConvLayer(kernel=d_kernel, bias=d_bias)
        if i > 0:
            _, prev_pre = cache[i - 1]
            grad = d_in * (prev_pre > 0)
    return loss, AntsParams(grads)


def train(pairs: Sequence[TrainingPair], config: AntsConfig, lr: float, steps: int, seed: int,
          temperature: float = DEFAULT_TEMPERATURE, init: Optional[AntsParams] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """
    Plain SGD over the training pairs; the pair for each step is drawn from
    an rng seeded with `seed`, so runs are reproducible.

    Args:
        pairs: training pairs (correlations, pyramids, sparse GT)
        config: network shape
        lr: learning rate
        steps: number of SGD steps
        seed: seeds both initialization and pair sampling
        temperature: soft-argmax temperature of the loss
        init: start from these parameters instead of ants_init
        on_step: called with (step, loss) after every step

    Returns:
        TrainResult with final params and the loss of every step (measured before its update)
    """
    if not pairs:
        raise ValueError("training needs at least one pair")

    params = init.copy() if init is not None else ants_init(config, seed)
    rng = np.random.default_rng(seed)
    losses = []
    start = time.time()
    log_every = max(1, steps // 10)

    for step in range(steps):
        pair = pairs[int(rng.integers(len(pairs)))]
        loss, grads = ants_gradient(pair.corr, pair.pyr_s, pair.pyr_t, params, pair.gts, temperature)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.arrays()):
            raise TrainingDivergedError(f"step {step}: non-finite loss {loss} (lr={lr}, |params|={params.norm():.3g})")

        params = params.sgd_step(grads, lr)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
        if step % log_every == 0 or step == steps - 1:
            logger.info(f"🧠 step {step}/{steps} loss={loss:.6f}")

    logger.info(f"Training finished in {time.time() - start:.1f}s "
                f"(loss {losses[0]:.4f} -> {losses[-1]:.4f})" if losses else "Training ran zero steps")
    return TrainResult(params=params, losses=losses)


def plant_gts(matches, src_dims: VideoDims, tgt_dims: VideoDims, grid: GridShape) -> List[GtCorrespondence]:
    """Convert (source keypoint, target keypoint) pixel matches into grid-unit supervision"""
    gts = []
    for src_kp, tgt_kp in matches:
        p = to_grid(src_kp, src_dims, grid)
        q = to_grid(tgt_kp, tgt_dims, grid)
        gts.append(GtCorrespondence(position=tuple(p), displacement=tuple(q - p)))
    return gts


# ---------------------------------------------------------------------------
# gradient check and persistence


def to_float64(corr: CorrVolume, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid):
    """64-bit shadow copies of the inputs"""
    def lift(p):
        return FeaturePyramid(p.grid, [l.astype(np.float64) for l in p.layers], list(p.layer_ids))
    return CorrVolume(corr.grid, corr.scores.astype(np.float64)), lift(pyr_s), lift(pyr_t)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(corr: CorrVolume, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid, params: AntsParams,
              gts: Sequence[GtCorrespondence], temperature: float = DEFAULT_TEMPERATURE,
              eps: float = 1e-5) -> float:
    """
    Compare ants_gradient against central finite differences in float64.

    Returns:
        Largest relative error over every kernel and bias component
    """
    corr, pyr_s, pyr_t = to_float64(corr, pyr_s, pyr_t)
    params = params.astype(np.float64)
    _, analytic = ants_gradient(corr, pyr_s, pyr_t, params, gts, temperature)

    def loss_at():
        return sparse_flow_loss(ants_forward(corr, pyr_s, pyr_t, params), gts, temperature)

    worst = 0.0
    for array, grad in zip(params.arrays(), analytic.arrays()):
        flat = array.reshape(-1)
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + eps
            plus = loss_at()
            flat[j] = original - eps
            minus = loss_at()
            flat[j] = original
            numeric[j] = (plus - minus) / (2 * eps)
        worst = max(worst, float(np.max(relative_error(grad.reshape(-1), numeric))))
    logger.info(f"Gradient check: max relative error {worst:.3e}")
    return worst


def save_params(directory: str, params: AntsParams, config: AntsConfig, seed: int):
    """Directory of STT1 tensors plus params.json describing shapes, config and seed"""
    os.makedirs(directory, exist_ok=True)
    shapes = []
    for i, layer in enumerate(params.layers):
        write_tensor(os.path.join(directory, f"layer{i}.kernel.stt"), layer.kernel)
        write_tensor(os.path.join(directory, f"layer{i}.bias.stt"), layer.bias)
        shapes.append({'kernel': list(layer.kernel.shape), 'bias': list(layer.bias.shape)})
    descriptor = {'n_layers': len(params.layers), 'shapes': shapes, 'config': config.to_dict(), 'seed': seed}
    with open(os.path.join(directory, 'params.json'), 'w', encoding='utf-8') as fh:
        json.dump(descriptor, fh, indent=2)


def load_params(directory: str) -> Tuple[AntsParams, AntsConfig, int]:
    with open(os.path.join(directory, 'params.json'), 'r', encoding='utf-8') as fh:
        descriptor = json.load(fh)
    layers = []
    for i, shapes in enumerate(descriptor['shapes']):
        kernel = read_tensor(os.path.join(directory, f"layer{i}.kernel.stt"))
        bias = read_tensor(os.path.join(directory, f"layer{i}.bias.stt"))
        if list(kernel.shape) != shapes['kernel'] or list(bias.shape) != shapes['bias']:
            raise ShapeError(f"layer {i} tensors do not match params.json")
        layers.append(ConvLayer(kernel, bias))
    return AntsParams(layers), AntsConfig.from_dict(descriptor['config']), int(descriptor['seed'])
