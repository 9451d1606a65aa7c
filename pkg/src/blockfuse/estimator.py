"""Amortised CNN parameter estimator.

Builds training sets on a parameter grid, trains the three-conv-layer CNN to
regress parameters from transformed fields, selects among seeds, and predicts
parameter vectors from observed blocks.

Training inputs are the raw fields passed through a model-specific transform
(signed-log for Gaussian fields, log for Brown-Resnick); targets are
standardized per coordinate by the training minimum and range.  Training is
mini-batch Adam on MSE with early stopping on validation loss and best-weight
restoration, fully deterministic given the seed.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .brown_resnick import BrParams, BrownResnickSampler
from .gp import GpParams, gp_cholesky
from .grids import Field, GridDomain
from .params import MODEL_BROWN_RESNICK, MODEL_GAUSSIAN, ParamVector
from .rng import mix64, stream

torch.set_num_threads(1)

# even kernel widths with 'same' padding are intentional; torch warns about
# the extra zero-padded copy on every forward pass
warnings.filterwarnings(
    "ignore",
    message="Using padding='same' with even kernel lengths",
    category=UserWarning,
)

TRANSFORM_SIGNED_LOG = "signed-log"
TRANSFORM_LOG = "log"
_TRANSFORM_CODES = {TRANSFORM_SIGNED_LOG: 0, TRANSFORM_LOG: 1}
_TRANSFORM_NAMES = {v: k for k, v in _TRANSFORM_CODES.items()}

MODEL_TRANSFORMS = {
    MODEL_GAUSSIAN: TRANSFORM_SIGNED_LOG,
    MODEL_BROWN_RESNICK: TRANSFORM_LOG,
}

PREDICT_CHUNK = 256  # fixed forward-pass batch so results never depend on callers


def signed_log(y: np.ndarray) -> np.ndarray:
    """sign(y) * log|y| with the measure-zero value 0 mapped to 0."""
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros_like(y)
    nz = y != 0
    out[nz] = np.sign(y[nz]) * np.log(np.abs(y[nz]))
    return out


def apply_input_transform(tag: str, values: np.ndarray) -> np.ndarray:
    if tag == TRANSFORM_SIGNED_LOG:
        return signed_log(values)
    if tag == TRANSFORM_LOG:
        v = np.asarray(values, dtype=np.float64)
        if np.any(v <= 0):
            raise ValueError("log transform requires strictly positive field values")
        return np.log(v)
    raise ValueError(f"unknown input transform {tag!r}")


@dataclass(frozen=True)
class TrainingGridSpec:
    """Cartesian grid of candidate parameters centered on an initial guess."""

    center: ParamVector
    halfwidth: tuple[float, float]
    t1: int
    t2: int

    def __post_init__(self):
        if self.t1 < 2 or self.t2 < 2:
            raise ValueError("grid counts must be at least 2")
        if any(not hw > 0 for hw in self.halfwidth):
            raise ValueError("halfwidths must be positive")

    @property
    def size(self) -> int:
        return self.t1 * self.t2


def make_training_grid(spec: TrainingGridSpec) -> list[ParamVector]:
    """All T1*T2 grid combinations, coordinate 1 varying fastest."""
    c = spec.center.values
    axis1 = np.linspace(c[0] - spec.halfwidth[0], c[0] + spec.halfwidth[0], spec.t1)
    axis2 = np.linspace(c[1] - spec.halfwidth[1], c[1] + spec.halfwidth[1], spec.t2)
    return [
        ParamVector(np.array([v1, v2]), spec.center.model)
        for v2 in axis2
        for v1 in axis1
    ]


@dataclass(frozen=True)
class OutputScaler:
    """Per-coordinate (min, range) standardization of the targets."""

    mins: np.ndarray
    ranges: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.ranges) <= 0):
            raise ValueError("scaler ranges must be strictly positive")

    @staticmethod
    def fit(thetas: np.ndarray) -> "OutputScaler":
        mins = thetas.min(axis=0)
        ranges = thetas.max(axis=0) - mins
        # a constant coordinate gets unit range so it maps to 0 instead of NaN
        return OutputScaler(mins, np.where(ranges > 0, ranges, 1.0))

    def standardize(self, thetas: np.ndarray) -> np.ndarray:
        return (thetas - self.mins) / self.ranges

    def unstandardize(self, std: np.ndarray) -> np.ndarray:
        return std * self.ranges + self.mins


@dataclass(frozen=True, eq=False)
class TrainingSet:
    inputs: np.ndarray  # (T, 1, ny, nx) transformed fields, float32
    targets: np.ndarray  # (T, q) standardized, float32
    thetas: np.ndarray  # (T, q) raw estimation-scale parameters
    scaler: OutputScaler
    model: str
    domain: GridDomain


def _simulate_field_values(model: str, theta: np.ndarray, domain: GridDomain, rng) -> np.ndarray:
    if model == MODEL_GAUSSIAN:
        chol = gp_cholesky(domain, GpParams(theta[0], theta[1]))
        return chol @ rng.standard_normal(domain.d)
    sampler = BrownResnickSampler(domain, BrParams(theta[0], theta[1]))
    return sampler.draw(rng).values


def generate_training_set(
    model: str,
    thetas: list[ParamVector],
    domain: GridDomain,
    seed: int,
    scaler: OutputScaler | None = None,
    cache_path=None,
) -> TrainingSet:
    """One simulated field per parameter value, transformed and standardized.

    Validation sets reuse the training scaler by passing it explicitly.
    Fields for nearby grid points share nothing: field t uses the substream
    (seed, t).  When ``cache_path`` is given the simulated tensors are reused
    from disk if present.
    """
    theta_arr = np.stack([t.values for t in thetas])
    if scaler is None:
        scaler = OutputScaler.fit(theta_arr)
    transform = MODEL_TRANSFORMS[model]

    inputs = None
    if cache_path is not None:
        try:
            with np.load(cache_path) as npz:
                inputs = npz["inputs"]
        except (FileNotFoundError, KeyError):
            inputs = None
    if inputs is None:
        inputs = np.empty((len(thetas), 1, domain.ny, domain.nx), dtype=np.float32)
        if model == MODEL_GAUSSIAN:
            # Cholesky factors repeat along the fast-varying axis; cache by key.
            chol_cache: dict[tuple[float, float], np.ndarray] = {}
            for t, th in enumerate(theta_arr):
                key = (th[0], th[1])
                if key not in chol_cache:
                    if len(chol_cache) > 512:
                        chol_cache.clear()
                    chol_cache[key] = gp_cholesky(domain, GpParams(th[0], th[1]))
                vals = chol_cache[key] @ stream(seed, t).standard_normal(domain.d)
                inputs[t, 0] = apply_input_transform(transform, vals).reshape(
                    domain.ny, domain.nx
                )
        else:
            for t, th in enumerate(theta_arr):
                sampler = BrownResnickSampler(domain, BrParams(th[0], th[1]))
                vals = sampler.draw(stream(seed, t)).values
                inputs[t, 0] = apply_input_transform(transform, vals).reshape(
                    domain.ny, domain.nx
                )
        if cache_path is not None:
            np.savez_compressed(cache_path, inputs=inputs)

    targets = scaler.standardize(theta_arr).astype(np.float32)
    return TrainingSet(inputs, targets, theta_arr, scaler, model, domain)


# ---------------------------------------------------------------------------
# Network architecture
# ---------------------------------------------------------------------------

# (kind, out_channels/units, kernel) rows of the convolutional trunk.
DEFAULT_CONV_LAYERS = ((128, 10), (128, 5), (128, 3))
DEFAULT_DENSE_UNITS = 500
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class Architecture:
    """Topology descriptor; fully determines the module structure."""

    input_ny: int
    input_nx: int
    q: int = 2
    conv_layers: tuple = DEFAULT_CONV_LAYERS
    dense_units: int = DEFAULT_DENSE_UNITS

    def flatten_size(self) -> int:
        ny, nx = self.input_ny, self.input_nx
        channels = 1
        for filters, _kernel in self.conv_layers:
            channels = filters
            ny = (ny + 1) // 2  # 2x2 max pool, 'same' padding (ceil)
            nx = (nx + 1) // 2
        return channels * ny * nx


class Cnn(nn.Module):
    """Conv trunk with leaky rectifiers, max pools, then two dense layers.

    Convolutions use zero 'same' padding so the architecture stays valid on
    inputs as small as the 10x10 blocks; pooling halves each spatial dim with
    ceil semantics.
    """

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        convs = []
        in_ch = 1
        for filters, kernel in arch.conv_layers:
            convs.append(nn.Conv2d(in_ch, filters, kernel, padding="same"))
            in_ch = filters
        self.convs = nn.ModuleList(convs)
        self.pool = nn.MaxPool2d(2, 2, ceil_mode=True)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.dense = nn.Linear(arch.flatten_size(), arch.dense_units)
        self.out = nn.Linear(arch.dense_units, arch.q)

    def forward(self, x):
        for conv in self.convs:
            x = self.pool(self.act(conv(x)))
        x = torch.relu(self.dense(x.flatten(1)))
        return self.out(x)


def _init_weights(module: nn.Module, seed: int) -> None:
    """Uniform fan-in initialization from the per-seed stream."""
    rng = stream(seed, 0xC0DE)
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.Linear)):
            fan_in = layer.weight[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=tuple(layer.weight.shape))
            b = rng.uniform(-bound, bound, size=tuple(layer.bias.shape))
            with torch.no_grad():
                layer.weight.copy_(torch.from_numpy(w))
                layer.bias.copy_(torch.from_numpy(b))


@dataclass
class TrainingReport:
    final_train_loss: float
    best_val_loss: float
    epochs_run: int
    seed: int


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 200
    patience: int = 50


@dataclass(eq=False)
class TrainedNetwork:
    """Weights plus the metadata needed to map a raw field to an estimate."""

    module: Cnn
    arch: Architecture
    input_transform: str
    scaler: OutputScaler
    model: str
    report: TrainingReport = field(default=None)

    def input_domain_matches(self, domain: GridDomain) -> bool:
        return (domain.ny, domain.nx) == (self.arch.input_ny, self.arch.input_nx)


def train_cnn(
    train: TrainingSet,
    val: TrainingSet,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> TrainedNetwork:
    """Train the CNN by mini-batch Adam on MSE with early stopping.

    The best-validation-loss weights are restored on exit; batch order is
    reshuffled each epoch from the seed-derived stream with the last short
    batch kept.
    """
    if train.inputs.shape[1:] != val.inputs.shape[1:]:
        raise ValueError("train and validation inputs must share tensor shape")
    arch = Architecture(
        input_ny=train.inputs.shape[2], input_nx=train.inputs.shape[3],
        q=train.targets.shape[1],
    )
    net = Cnn(arch)
    _init_weights(net, seed)

    x_train = torch.from_numpy(train.inputs)
    y_train = torch.from_numpy(train.targets)
    x_val = torch.from_numpy(val.inputs)
    y_val = torch.from_numpy(val.targets)

    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    loss_fn = nn.MSELoss()
    n = x_train.shape[0]

    best_val = np.inf
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_epoch = 0
    train_loss = np.nan
    epochs_run = 0
    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        order = stream(seed, 0xBA7C4, epoch).permutation(n)
        net.train()
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            opt.zero_grad()
            loss = loss_fn(net(x_train[idx]), y_train[idx])
            loss.backward()
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at epoch {epoch}")
            opt.step()
            running += loss.item() * idx.numel()
        train_loss = running / n

        net.eval()
        with torch.no_grad():
            val_loss = float(loss_fn(net(x_val), y_val))
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    net.load_state_dict(best_state)
    net.eval()
    report = TrainingReport(
        final_train_loss=float(train_loss),
        best_val_loss=float(best_val),
        epochs_run=epochs_run,
        seed=seed,
    )
    return TrainedNetwork(net, arch, MODEL_TRANSFORMS[train.model], train.scaler,
                          train.model, report)


def _forward_standardized(net: TrainedNetwork, batch: np.ndarray) -> np.ndarray:
    """Forward transformed inputs in fixed-size chunks; standardized outputs."""
    outs = []
    with torch.no_grad():
        for start in range(0, batch.shape[0], PREDICT_CHUNK):
            x = torch.from_numpy(batch[start : start + PREDICT_CHUNK])
            outs.append(net.module(x).numpy())
    return np.concatenate(outs, axis=0)


def predict_values(net: TrainedNetwork, values: np.ndarray, domain: GridDomain) -> np.ndarray:
    """Estimates for a stack of raw fields given as an (n, d) array."""
    if not net.input_domain_matches(domain):
        raise ValueError(
            f"field is {domain.ny}x{domain.nx}, network expects "
            f"{net.arch.input_ny}x{net.arch.input_nx}"
        )
    transformed = apply_input_transform(net.input_transform, values).astype(np.float32)
    batch = transformed.reshape(-1, 1, domain.ny, domain.nx)
    std = _forward_standardized(net, batch)
    return net.scaler.unstandardize(std.astype(np.float64))


def predict(net: TrainedNetwork, field: Field) -> ParamVector:
    """theta-hat for one raw (untransformed) observed field."""
    est = predict_values(net, field.values[None, :], field.domain)[0]
    return ParamVector(est, net.model)


def avg_validation_bias(net: TrainedNetwork, val: TrainingSet) -> np.ndarray:
    """Per-coordinate mean of (prediction - target) on the estimation scale."""
    if val.inputs.shape[0] == 0:
        raise ValueError("validation set is empty")
    std = _forward_standardized(net, val.inputs)
    preds = net.scaler.unstandardize(std.astype(np.float64))
    return np.mean(preds - val.thetas, axis=0)


SELECT_VAL_LOSS = "min-val-loss"
SELECT_ABS_AVB = "min-abs-AVB"


def select_network(
    candidates: list[TrainedNetwork],
    criterion: str = SELECT_VAL_LOSS,
    val: TrainingSet | None = None,
) -> TrainedNetwork:
    """argmin of the criterion over candidates; ties broken by lowest seed."""
    if not candidates:
        raise ValueError("no candidate networks")
    if criterion == SELECT_VAL_LOSS:
        scores = [c.report.best_val_loss for c in candidates]
    elif criterion == SELECT_ABS_AVB:
        if val is None:
            raise ValueError("AVB selection needs a validation set")
        scores = [float(np.sum(np.abs(avg_validation_bias(c, val)))) for c in candidates]
    else:
        raise ValueError(f"unknown selection criterion {criterion!r}")
    keyed = sorted(zip(scores, [c.report.seed for c in candidates], range(len(candidates))))
    return candidates[keyed[0][2]]


# ---------------------------------------------------------------------------
# DACN v1 weight files
# ---------------------------------------------------------------------------

_DACN_MAGIC = b"DACN"
_DACN_VERSION = 1
_KIND_CONV, _KIND_DENSE = 0, 1


def save_network(net: TrainedNetwork, path) -> None:
    """Serialize weights and prediction metadata in the DACN v1 format.

    Layer records are (kind u8, ndims u8, dims u32...); tensors follow as
    binary64 in declaration order (weight then bias per layer).
    """
    layers = []
    for layer in net.module.convs:
        layers.append((_KIND_CONV, layer))
    layers.append((_KIND_DENSE, net.module.dense))
    layers.append((_KIND_DENSE, net.module.out))

    with open(path, "wb") as fh:
        fh.write(_DACN_MAGIC)
        fh.write(struct.pack("<I", _DACN_VERSION))
        fh.write(struct.pack("<II", net.arch.input_ny, net.arch.input_nx))
        fh.write(struct.pack("<B", len(layers)))
        for kind, layer in layers:
            shape = tuple(layer.weight.shape)
            fh.write(struct.pack("<BB", kind, len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<B", _TRANSFORM_CODES[net.input_transform]))
        q = net.scaler.mins.size
        fh.write(struct.pack("<B", q))
        fh.write(np.asarray(net.scaler.mins, dtype="<f8").tobytes())
        fh.write(np.asarray(net.scaler.ranges, dtype="<f8").tobytes())
        for _kind, layer in layers:
            fh.write(layer.weight.detach().numpy().astype("<f8").tobytes())
            fh.write(layer.bias.detach().numpy().astype("<f8").tobytes())


def load_network(path) -> TrainedNetwork:
    with open(path, "rb") as fh:
        if fh.read(4) != _DACN_MAGIC:
            raise ValueError(f"{path}: not a DACN file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _DACN_VERSION:
            raise ValueError(f"{path}: unsupported DACN version {version}")
        input_ny, input_nx = struct.unpack("<II", fh.read(8))
        (n_layers,) = struct.unpack("<B", fh.read(1))
        shapes = []
        for _ in range(n_layers):
            kind, ndims = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{ndims}I", fh.read(4 * ndims))
            shapes.append((kind, dims))
        (tcode,) = struct.unpack("<B", fh.read(1))
        (q,) = struct.unpack("<B", fh.read(1))
        mins = np.frombuffer(fh.read(8 * q), dtype="<f8").copy()
        ranges = np.frombuffer(fh.read(8 * q), dtype="<f8").copy()

        conv_layers = tuple(
            (dims[0], dims[2]) for kind, dims in shapes if kind == _KIND_CONV
        )
        dense_units = shapes[-2][1][0]
        arch = Architecture(input_ny, input_nx, q=q, conv_layers=conv_layers,
                            dense_units=dense_units)
        net = Cnn(arch)
        modules = list(net.convs) + [net.dense, net.out]
        for layer, (_kind, dims) in zip(modules, shapes):
            w = np.frombuffer(fh.read(8 * int(np.prod(dims))), dtype="<f8").reshape(dims)
            b = np.frombuffer(fh.read(8 * dims[0]), dtype="<f8")
            with torch.no_grad():
                layer.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                layer.bias.copy_(torch.from_numpy(b.astype(np.float32)))
        net.eval()

        transform = _TRANSFORM_NAMES[tcode]
        model = MODEL_GAUSSIAN if transform == TRANSFORM_SIGNED_LOG else MODEL_BROWN_RESNICK
        return TrainedNetwork(net, arch, transform, OutputScaler(mins, ranges), model)
