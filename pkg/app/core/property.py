import math
import numpy as np
import torch
import torch.nn.functional as F

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple

from app import logger
from app.constants import DEFAULT_CDF_BATCHES, DEFAULT_GOLDEN_TOLERANCE
from app.core.datasets import ImageDataset
from app.core.gradcore import LabeledBatch
from app.decorators.timing import timing
from app.exceptions.lab_errors import (
    BatchTooSmallError,
    DatasetError,
    EmptyBatchError,
    MeasurementError,
    ParameterError,
    PropertyError,
)
from app.utils.validators import validate_positive_int

_GRAY_WEIGHTS = (0.2989, 0.587, 0.114)
_CHANNELS = {"red": 0, "green": 1, "blue": 2}
_COARSE_GRID = 4097
_REFINE_GRID = 2001
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class MeasurementKind(str, Enum):
    BRIGHTNESS = "brightness"
    DARKNESS = "darkness"
    RED = "red"
    GREEN = "green"
    BLUE = "blue"
    H_EDGE = "h-edge"
    V_EDGE = "v-edge"
    GREEN_V_EDGE = "green-v-edge"
    RANDOM_CONV = "random-conv"


class SelectionMode(str, Enum):
    LOCAL_EXTREME = "local-extreme"
    GLOBAL_THRESHOLD = "global-threshold"
    SECAGG_THRESHOLD = "secagg-threshold"


class Extreme(str, Enum):
    MAX = "max"
    MIN = "min"


@dataclass(frozen=True)
class Measurement:
    kind: MeasurementKind
    seed: int = 0
    filter: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MeasurementKind(self.kind))
        if self.kind == MeasurementKind.RANDOM_CONV and self.filter is None:
            generator = torch.Generator().manual_seed(int(self.seed))
            weights = torch.randn(9, generator=generator, dtype=torch.float64)
            weights = weights / torch.linalg.vector_norm(weights)
            object.__setattr__(self, "filter", tuple(weights.tolist()))

    def to_dict(self) -> dict:
        data = {"kind": self.kind.value, "seed": self.seed}
        if self.filter is not None:
            data["filter"] = list(self.filter)
        return data

    @staticmethod
    def from_dict(data: dict) -> "Measurement":
        kernel = data.get("filter")
        return Measurement(data["kind"], int(data.get("seed", 0)),
                           tuple(kernel) if kernel is not None else None)


def _grayscale(images: torch.Tensor) -> torch.Tensor:
    weights = torch.tensor(_GRAY_WEIGHTS, dtype=images.dtype).reshape(1, 3, 1, 1)
    return (images * weights).sum(dim=1)


def _color(images: torch.Tensor, channel: int) -> torch.Tensor:
    means = images.mean(dim=(2, 3))
    return 3 * means[:, channel] - means.sum(dim=1)


def _h_edge(gray: torch.Tensor) -> torch.Tensor:
    return (gray[:, :, 1:] - gray[:, :, :-1]).abs().mean(dim=(1, 2))


def _v_edge(gray: torch.Tensor) -> torch.Tensor:
    return (gray[:, 1:, :] - gray[:, :-1, :]).abs().mean(dim=(1, 2))


def measure_batch(images: torch.Tensor, m: Measurement) -> torch.Tensor:
    """Measurement of every image in an (N, 3, H, W) stack, as float64"""
    if images.ndim != 4 or images.shape[1] != 3:
        raise MeasurementError(f"Expected images of shape (N, 3, H, W), got {tuple(images.shape)}")
    images = images.detach().to(torch.float64)
    kind = m.kind
    if kind == MeasurementKind.BRIGHTNESS:
        return images.mean(dim=(1, 2, 3))
    if kind == MeasurementKind.DARKNESS:
        return -images.mean(dim=(1, 2, 3))
    if kind.value in _CHANNELS:
        return _color(images, _CHANNELS[kind.value])
    gray = _grayscale(images)
    if kind == MeasurementKind.H_EDGE:
        return _h_edge(gray)
    if kind == MeasurementKind.V_EDGE:
        return _v_edge(gray)
    if kind == MeasurementKind.GREEN_V_EDGE:
        return _color(images, _CHANNELS["green"]) + _v_edge(gray)
    kernel = torch.tensor(m.filter, dtype=torch.float64).reshape(1, 1, 3, 3)
    return F.conv2d(gray.unsqueeze(1), kernel).mean(dim=(1, 2, 3))


def measure(image: torch.Tensor, m: Measurement) -> float:
    if image.ndim != 3 or image.shape[0] != 3:
        raise MeasurementError(f"Expected an image of shape (3, H, W), got {tuple(image.shape)}")
    return float(measure_batch(image.unsqueeze(0), m)[0])


@dataclass(frozen=True)
class PropertySpec:
    measurement: Measurement
    mode: SelectionMode = SelectionMode.LOCAL_EXTREME
    tau: Optional[float] = None
    extreme: Extreme = Extreme.MAX

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        object.__setattr__(self, "extreme", Extreme(self.extreme))
        if self.mode != SelectionMode.LOCAL_EXTREME and self.tau is None:
            raise PropertyError(f"Selection mode '{self.mode.value}' requires a threshold tau")

    def satisfies(self, values: torch.Tensor) -> torch.Tensor:
        """Strictly above tau for max, strictly below for min; a value equal to tau never qualifies"""
        if self.tau is None:
            raise PropertyError("Property has no threshold tau")
        return values > self.tau if self.extreme == Extreme.MAX else values < self.tau

    def to_dict(self) -> dict:
        return {
            "measurement": self.measurement.to_dict(),
            "mode": self.mode.value,
            "tau": self.tau,
            "extreme": self.extreme.value,
        }

    @staticmethod
    def from_dict(data: dict) -> "PropertySpec":
        return PropertySpec(Measurement.from_dict(data["measurement"]), data.get("mode", "local-extreme"),
                            data.get("tau"), data.get("extreme", "max"))


def _split(selected: List[int], size: int) -> Tuple[List[int], List[int]]:
    chosen = set(selected)
    return sorted(chosen), [i for i in range(size) if i not in chosen]


def zscore(values: torch.Tensor) -> torch.Tensor:
    """In-batch standardization; a constant batch maps to zeros"""
    std = values.std(unbiased=False)
    if float(std) == 0.0:
        return torch.zeros_like(values)
    return (values - values.mean()) / std


def extreme_index(values: torch.Tensor, extreme: Extreme) -> int:
    """Index of the max (or min) value; ties go to the lowest index"""
    array = values.detach().cpu().numpy()
    return int(np.argmax(array) if Extreme(extreme) == Extreme.MAX else np.argmin(array))


def select_local(batch: LabeledBatch, spec: PropertySpec) -> Tuple[List[int], List[int]]:
    """(i_rec, i_nul) with i_rec the single most extreme example"""
    if spec.mode != SelectionMode.LOCAL_EXTREME:
        raise PropertyError(f"select_local needs mode 'local-extreme', got '{spec.mode.value}'")
    if len(batch) == 0:
        raise EmptyBatchError()
    values = measure_batch(batch.images, spec.measurement)
    return _split([extreme_index(values, spec.extreme)], len(batch))


def selection_values(batch: LabeledBatch, spec: PropertySpec) -> torch.Tensor:
    """Measurements as compared against tau (z-scored in secagg mode)"""
    values = measure_batch(batch.images, spec.measurement)
    return zscore(values) if spec.mode == SelectionMode.SECAGG_THRESHOLD else values


def select_global(batch: LabeledBatch, spec: PropertySpec) -> Tuple[List[int], List[int]]:
    """(i_rec, i_nul) by comparison against tau; |i_rec| may be any size"""
    if spec.mode == SelectionMode.LOCAL_EXTREME:
        raise PropertyError("select_global needs a threshold selection mode")
    if len(batch) == 0:
        raise EmptyBatchError()
    mask = spec.satisfies(selection_values(batch, spec))
    return _split(torch.nonzero(mask).flatten().tolist(), len(batch))


def select(batch: LabeledBatch, spec: PropertySpec) -> Tuple[List[int], List[int]]:
    if spec.mode == SelectionMode.LOCAL_EXTREME:
        return select_local(batch, spec)
    return select_global(batch, spec)


@dataclass(frozen=True)
class CdfEstimate:
    """Piecewise-linear CDF through (value, probability) knots; 0 below, 1 above"""
    values: np.ndarray
    probabilities: np.ndarray
    n_samples: int

    def __post_init__(self):
        if len(self.values) == 0 or len(self.values) != len(self.probabilities):
            raise PropertyError("CDF needs matching, nonempty value and probability arrays")
        if np.any(np.diff(self.values) < 0) or np.any(np.diff(self.probabilities) < 0):
            raise PropertyError("CDF knots must be nondecreasing")

    @staticmethod
    def from_samples(samples) -> "CdfEstimate":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size == 0:
            raise PropertyError("Cannot estimate a CDF from no samples")
        values, counts = np.unique(samples, return_counts=True)
        return CdfEstimate(values, np.cumsum(counts) / samples.size, int(samples.size))

    @property
    def support(self) -> Tuple[float, float]:
        return float(self.values[0]), float(self.values[-1])

    def __call__(self, x):
        return np.interp(x, self.values, self.probabilities, left=0.0, right=1.0)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "probabilities": self.probabilities.tolist(),
                "n_samples": self.n_samples}


def _draw_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=batch_size, replace=n < batch_size)


@timing("property.estimate_order_stat_cdfs")
def estimate_order_stat_cdfs(dataset: ImageDataset, batch_size: int, measurement: Measurement,
                             n_batches: int = DEFAULT_CDF_BATCHES, seed: int = 0,
                             normalize: bool = True) -> Tuple[CdfEstimate, CdfEstimate]:
    """Empirical CDFs of the largest and second-largest (normalized) measurement per batch"""
    if batch_size < 2:
        raise BatchTooSmallError(2, batch_size)
    n_batches = validate_positive_int(n_batches, "n_batches")
    if len(dataset) == 0:
        raise DatasetError("Dataset is empty")
    values = measure_batch(dataset.images, measurement)
    rng = np.random.default_rng(seed)
    draws = torch.stack([values[torch.as_tensor(_draw_batch(rng, len(dataset), batch_size))]
                         for _ in range(n_batches)])
    if normalize:
        std = draws.std(dim=1, unbiased=False, keepdim=True)
        centered = draws - draws.mean(dim=1, keepdim=True)
        draws = torch.where(std > 0, centered / torch.where(std > 0, std, torch.ones_like(std)),
                            torch.zeros_like(centered))
    ordered = torch.sort(draws, dim=1).values.numpy()
    return CdfEstimate.from_samples(ordered[:, -1]), CdfEstimate.from_samples(ordered[:, -2])


def secagg_objective(tau, phi1: CdfEstimate, phi2: CdfEstimate, num_clients: int):
    """(1 - phi1(tau)) * phi2(tau) * phi1(tau)^(C-1); vectorized over tau"""
    num_clients = validate_positive_int(num_clients, "num_clients")
    p1 = phi1(tau)
    return (1.0 - p1) * phi2(tau) * p1 ** (num_clients - 1)


def refine_threshold(objective: Callable[[float], float], low: float, high: float,
                     tol: float = DEFAULT_GOLDEN_TOLERANCE) -> float:
    """Golden-section search for the maximizer of a unimodal objective on [low, high]"""
    if not tol > 0:
        raise ParameterError("tol must be greater than 0")
    low, high = sorted((float(low), float(high)))
    inner = [high - _INV_PHI * (high - low), low + _INV_PHI * (high - low)]
    values = [objective(inner[0]), objective(inner[1])]
    while high - low > tol:
        if values[0] > values[1]:
            high = inner[1]
            inner = [high - _INV_PHI * (high - low), inner[0]]
            values = [objective(inner[0]), values[0]]
        else:
            low = inner[0]
            inner = [inner[1], low + _INV_PHI * (high - low)]
            values = [values[1], objective(inner[1])]
    return (low + high) / 2


def optimize_threshold(phi1: CdfEstimate, phi2: CdfEstimate, num_clients: int,
                       tol: float = DEFAULT_GOLDEN_TOLERANCE) -> Tuple[float, float]:
    """
    Threshold maximizing the secure-aggregation objective and its value

    A dense scan brackets the best region, golden-section search refines it and
    a final local grid guards against plateaus of the empirical CDFs.
    """
    low = min(phi1.support[0], phi2.support[0])
    high = max(phi1.support[1], phi2.support[1])
    if not high > low:
        raise PropertyError("CDF support has zero width")

    def objective(tau):
        return float(secagg_objective(tau, phi1, phi2, num_clients))

    grid = np.linspace(low, high, _COARSE_GRID)
    best = int(np.argmax(secagg_objective(grid, phi1, phi2, num_clients)))
    step = grid[1] - grid[0]
    a, b = max(low, grid[best] - 2 * step), min(high, grid[best] + 2 * step)

    candidates = [grid[best], refine_threshold(objective, a, b, tol)]
    refine = np.linspace(a, b, _REFINE_GRID)
    candidates.append(refine[int(np.argmax(secagg_objective(refine, phi1, phi2, num_clients)))])
    tau = max(candidates, key=objective)
    p = objective(tau)
    logger.info(f"Secure-aggregation threshold {tau:.6g} reaches objective {p:.6g} for {num_clients} clients")
    return float(tau), p


def global_quantile_threshold(dataset: ImageDataset, measurement: Measurement, batch_size: int) -> float:
    """(1 - 1/B) quantile of the measurement; a random image qualifies with probability 1/B"""
    batch_size = validate_positive_int(batch_size, "batch_size")
    if len(dataset) == 0:
        raise DatasetError("Dataset is empty")
    values = measure_batch(dataset.images, measurement).numpy()
    if batch_size == 1:
        # just below the minimum so the strict comparison admits every image
        return float(np.nextafter(values.min(), -np.inf))
    return float(np.quantile(values, 1.0 - 1.0 / batch_size))


def secagg_event_rates(dataset: ImageDataset, spec: PropertySpec, batch_size: int, num_clients: int,
                       n_rounds: int, seed: int) -> dict:
    """
    Monte-Carlo rates of the two success events under per-client normalization

    `target_client` is the event the objective models (client 0 holds exactly one
    qualifying image, all others none); `exactly_one_overall` is the event
    mounting actually needs.
    """
    n_rounds = validate_positive_int(n_rounds, "n_rounds")
    values = measure_batch(dataset.images, spec.measurement)
    rng = np.random.default_rng(seed)
    target_client = exactly_one = 0
    for _ in range(n_rounds):
        counts = []
        for _client in range(num_clients):
            drawn = values[torch.as_tensor(_draw_batch(rng, len(dataset), batch_size))]
            counts.append(int(spec.satisfies(zscore(drawn)).sum()))
        if sum(counts) == 1:
            exactly_one += 1
            target_client += int(counts[0] == 1)
    return {"target_client": target_client / n_rounds, "exactly_one_overall": exactly_one / n_rounds}
