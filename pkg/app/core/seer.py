import math
import numpy as np
import torch
import torch.nn as nn

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from app import logger
from app.constants import (
    DEFAULT_ACCUMULATION,
    DEFAULT_BATCH_AUGMENT_ITERATIONS,
    DEFAULT_BETA0,
    DEFAULT_CALIBRATION_COVERAGE,
    DEFAULT_CLIP_BATCHES,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_REDRAWS,
    DEFAULT_STEPS_PER_EPOCH,
    DEFAULT_SUBSAMPLE_FRACTION,
    DEFAULT_SUBSAMPLE_MIN,
)
from app.core.augmentation import AugmentConfig, TargetCount, batch_augment, data_augment
from app.core.datasets import ImageDataset
from app.core.fedsim import AggregateUpdate, DPConfig
from app.core.gradcore import (
    GradientBundle,
    LabeledBatch,
    LossKind,
    ModelHandle,
    SubsampleMask,
    flatten_subsample,
    grouped_gradients,
    make_subsample_mask,
    per_example_gradients,
)
from app.core.property import PropertySpec, SelectionMode, select, select_global, select_local
from app.decorators.retry_on_rejection import retry_on_rejection
from app.decorators.timing import timing
from app.exceptions.lab_errors import (
    ArchitectureMismatchError,
    ArtifactError,
    BatchRejectedError,
    DimensionMismatchError,
    DivergenceError,
    EmptyBatchError,
    ParameterError,
)
from app.utils.validators import (
    validate_choice,
    validate_fraction,
    validate_nonnegative_int,
    validate_positive,
    validate_positive_int,
)

REC_LOSSES = ("l2", "l1")
CURVE_COLUMNS = ("epoch", "step", "l_rec", "l_nul", "alpha")


class SecretDecoder(nn.Module):
    """
    d: subsampled gradient -> hidden space (linear, no bias)
    r: hidden space -> flattened image (affine)

    In the fused form a single linear layer holds both: its weight acts as d and
    its bias is r, so the hidden space is the image space.
    """

    def __init__(self, n_sub: int, image_shape: Sequence[int], fused: bool = True,
                 hidden_dim: Optional[int] = None):
        super().__init__()
        self.n_sub = validate_positive_int(n_sub, "n_sub")
        self.image_shape = tuple(int(s) for s in image_shape)
        self.n_r = math.prod(self.image_shape)
        self.fused = fused
        if fused:
            self.linear = nn.Linear(self.n_sub, self.n_r)
            self.n_d = self.n_r
        else:
            if hidden_dim is None:
                raise ParameterError("An unfused decoder needs hidden_dim")
            self.n_d = validate_positive_int(hidden_dim, "hidden_dim")
            self.d = nn.Linear(self.n_sub, self.n_d, bias=False)
            self.r = nn.Linear(self.n_d, self.n_r)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def embed(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.n_sub:
            raise DimensionMismatchError(self.n_sub, v.shape[-1])
        v = v.to(self.dtype)
        if self.fused:
            return v @ self.linear.weight.T
        return self.d(v)

    def reconstruct(self, h: torch.Tensor) -> torch.Tensor:
        if self.fused:
            return h + self.linear.bias
        return self.r(h)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(self.embed(v))


def build_decoder(n_sub: int, image_shape: Sequence[int], fused: bool = True,
                  hidden_dim: Optional[int] = None, seed: int = 0,
                  dtype: torch.dtype = torch.float32) -> SecretDecoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SecretDecoder(n_sub, image_shape, fused, hidden_dim).to(dtype)


def _zero(decoder: SecretDecoder) -> torch.Tensor:
    return torch.zeros((), dtype=decoder.dtype, device=decoder.device)


def loss_nul(decoder: SecretDecoder, g_nul: Union[GradientBundle, Sequence[GradientBundle]],
             mask: SubsampleMask) -> torch.Tensor:
    """Sum of squared norms of d over the nul gradients"""
    bundles = [g_nul] if isinstance(g_nul, GradientBundle) else list(g_nul)
    total = _zero(decoder)
    for bundle in bundles:
        total = total + decoder.embed(flatten_subsample(bundle, mask)).pow(2).sum()
    return total


def surrogate_nul(decoder: SecretDecoder, g_nul_mean: Optional[GradientBundle],
                  g_nul_sample: Optional[GradientBundle], mask: SubsampleMask) -> torch.Tensor:
    """||d(mean nul gradient)||^2 + ||d(one sampled nul gradient)||^2; zero without nul examples"""
    total = _zero(decoder)
    for bundle in (g_nul_mean, g_nul_sample):
        if bundle is not None:
            total = total + decoder.embed(flatten_subsample(bundle, mask)).pow(2).sum()
    return total


def loss_rec(decoder: SecretDecoder, g_rec: GradientBundle, x_rec: torch.Tensor,
             mask: SubsampleMask, l1: bool = False) -> torch.Tensor:
    target = x_rec.reshape(-1).to(device=decoder.device, dtype=decoder.dtype)
    if target.numel() != decoder.n_r:
        raise DimensionMismatchError(decoder.n_r, target.numel(), "target")
    diff = decoder(flatten_subsample(g_rec, mask)) - target
    return diff.abs().sum() if l1 else diff.pow(2).sum()


def total_loss(l_rec, l_nul, alpha: float):
    return l_rec + alpha * l_nul


@dataclass(frozen=True)
class AlphaSchedule:
    beta0: float
    beta1: float
    epochs: int
    batch_size: int

    def at(self, kappa: float) -> float:
        """min(B, 2^beta) with beta linear from beta0 at 0 to beta1 at K"""
        if kappa < 0 or kappa > self.epochs:
            clamped = min(max(kappa, 0), self.epochs)
            logger.warning(f"Schedule position {kappa} outside [0, {self.epochs}], clamped to {clamped}")
            kappa = clamped
        if self.epochs == 0:
            beta = self.beta0
        else:
            beta = ((self.epochs - kappa) * self.beta0 + kappa * self.beta1) / self.epochs
        return min(float(self.batch_size), 2.0 ** beta)


def alpha_at(kappa: float, sched: AlphaSchedule) -> float:
    return sched.at(kappa)


@dataclass(frozen=True)
class TrainConfig:
    property_spec: PropertySpec
    epochs: int = 1
    steps_per_epoch: int = DEFAULT_STEPS_PER_EPOCH
    batch_size: int = 16
    num_clients: int = 1
    learning_rate: float = DEFAULT_LEARNING_RATE
    accumulation: int = DEFAULT_ACCUMULATION
    beta0: float = DEFAULT_BETA0
    beta1: Optional[float] = None
    seed: int = 0
    subsample_fraction: float = DEFAULT_SUBSAMPLE_FRACTION
    subsample_min: int = DEFAULT_SUBSAMPLE_MIN
    fused: bool = True
    hidden_dim: Optional[int] = None
    rec_loss: str = "l2"
    surrogate_nul: bool = True
    augment: Optional[AugmentConfig] = None
    batch_augment: bool = True
    batch_augment_iterations: int = DEFAULT_BATCH_AUGMENT_ITERATIONS
    loss: LossKind = LossKind.CROSS_ENTROPY

    def __post_init__(self):
        validate_nonnegative_int(self.epochs, "epochs")
        validate_positive_int(self.steps_per_epoch, "steps_per_epoch")
        validate_positive_int(self.batch_size, "batch_size")
        validate_positive_int(self.num_clients, "num_clients")
        validate_positive(self.learning_rate, "learning_rate")
        validate_positive_int(self.accumulation, "accumulation")
        validate_fraction(self.subsample_fraction, "subsample_fraction")
        validate_positive_int(self.subsample_min, "subsample_min")
        validate_choice(self.rec_loss, "rec_loss", REC_LOSSES)
        if not self.fused and self.hidden_dim is None:
            raise ParameterError("An unfused decoder needs hidden_dim")
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.property_spec.mode != SelectionMode.SECAGG_THRESHOLD and self.num_clients != 1:
            raise ParameterError(f"Selection mode '{self.property_spec.mode.value}' trains with a single client")

    @property
    def schedule(self) -> AlphaSchedule:
        beta1 = math.log2(self.batch_size) if self.beta1 is None else self.beta1
        return AlphaSchedule(self.beta0, beta1, self.epochs, self.batch_size)

    def to_dict(self) -> dict:
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        data["property_spec"] = self.property_spec.to_dict()
        data["augment"] = self.augment.to_dict() if self.augment is not None else None
        data["loss"] = self.loss.value
        return data

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        values = dict(data)
        values["property_spec"] = PropertySpec.from_dict(values["property_spec"])
        if values.get("augment") is not None:
            values["augment"] = AugmentConfig(**values["augment"])
        return TrainConfig(**values)


@dataclass
class AttackArtifact:
    model: ModelHandle
    decoder: SecretDecoder
    mask: SubsampleMask
    property_spec: PropertySpec
    train_config: TrainConfig
    curve: List[dict] = field(default_factory=list)
    clip_factors: Optional[Dict[str, float]] = None
    output_scale: float = 1.0

    def __post_init__(self):
        if self.mask.n_sub != self.decoder.n_sub:
            raise ArtifactError(f"Mask selects {self.mask.n_sub} entries, decoder expects {self.decoder.n_sub}")

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return self.decoder.image_shape


def init_attack(model: ModelHandle, cfg: TrainConfig) -> AttackArtifact:
    """Untrained artifact: seeded subsample mask and decoder for `model`"""
    mask = make_subsample_mask(model, cfg.subsample_fraction, cfg.subsample_min, cfg.seed)
    decoder = build_decoder(mask.n_sub, model.input_shape, cfg.fused, cfg.hidden_dim,
                            cfg.seed, model.dtype).to(model.device)
    return AttackArtifact(model, decoder, mask, cfg.property_spec, cfg)


@dataclass(frozen=True)
class StepPlan:
    batches: List[LabeledBatch]
    selections: List[Tuple[List[int], List[int]]]
    kind: str


class SeerTrainer:
    def __init__(self, model: ModelHandle, dataset: ImageDataset, cfg: TrainConfig):
        if len(dataset) == 0:
            raise EmptyBatchError("Training needs a nonempty auxiliary dataset")
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.schedule = cfg.schedule
        self.artifact = init_attack(model, cfg)
        params = list(model.params.values()) + list(self.artifact.decoder.parameters())
        self.optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    def _rng(self, stream: int, step: int, attempt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, stream, step, attempt])

    def _sample(self, rng: np.random.Generator) -> LabeledBatch:
        n, size = len(self.dataset), self.cfg.batch_size
        batch = self.dataset.batch(rng.choice(n, size=size, replace=n < size))
        if self.cfg.augment is not None:
            batch = data_augment(batch, int(rng.integers(2 ** 31)), self.cfg.augment)
        return batch

    @retry_on_rejection(max_attempts=DEFAULT_MAX_REDRAWS)
    def draw_step(self, step: int, attempt: int = 0) -> StepPlan:
        """Batches and (i_rec, i_nul) splits for one step; unusable draws raise BatchRejectedError"""
        spec = self.cfg.property_spec
        rng = self._rng(0, step, attempt)

        if spec.mode == SelectionMode.LOCAL_EXTREME:
            batch = self._sample(rng)
            return StepPlan([batch], [select_local(batch, spec)], "local")

        if spec.mode == SelectionMode.GLOBAL_THRESHOLD:
            batch = self._sample(rng)
            i_rec, i_nul = select_global(batch, spec)
            if len(i_rec) > 1:
                raise BatchRejectedError(f"{len(i_rec)} examples pass the threshold")
            return StepPlan([batch], [(i_rec, i_nul)], "global" if i_rec else "nul-only")

        target = TargetCount.EXACTLY_ONE if step % 2 == 0 else TargetCount.EXACTLY_ZERO
        target_client = int(rng.integers(self.cfg.num_clients)) if target == TargetCount.EXACTLY_ONE else -1
        batches, selections = [], []
        for client in range(self.cfg.num_clients):
            wanted = TargetCount.EXACTLY_ONE if client == target_client else TargetCount.EXACTLY_ZERO
            batch = self._sample(rng)
            if self.cfg.batch_augment:
                batch = batch_augment(batch, spec, wanted, self.cfg.batch_augment_iterations)
            i_rec, i_nul = select_global(batch, spec)
            if len(i_rec) != (1 if wanted == TargetCount.EXACTLY_ONE else 0):
                raise BatchRejectedError(f"Client {client} has {len(i_rec)} qualifying examples, needs {wanted.value}")
            batches.append(batch)
            selections.append((i_rec, i_nul))
        return StepPlan(batches, selections, target.value)

    def step_losses(self, plan: StepPlan, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        """(L_rec, L_nul) for one plan, differentiable w.r.t. the model and the decoder"""
        cfg, decoder, mask = self.cfg, self.artifact.decoder, self.artifact.mask
        # the server observes the mean over all B*C examples
        scale = 1.0 / (cfg.batch_size * len(plan.batches))
        members = [(c, i) for c, (_, i_nul) in enumerate(plan.selections) for i in i_nul]
        sampled = members[int(rng.integers(len(members)))] if members and cfg.surrogate_nul else None

        l_rec = _zero(decoder)
        nul_sum, singles = None, []
        for client, (batch, (i_rec, i_nul)) in enumerate(zip(plan.batches, plan.selections)):
            groups = [i_nul, i_rec]
            if not cfg.surrogate_nul:
                groups.extend([i] for i in i_nul)
            elif sampled is not None and sampled[0] == client:
                groups.append([sampled[1]])
            grads = grouped_gradients(self.model, batch, groups, cfg.loss, create_graph=True, scale=scale)
            nul_sum = grads[0] if nul_sum is None else nul_sum + grads[0]
            if i_rec:
                l_rec = loss_rec(decoder, grads[1], batch.images[i_rec[0]], mask, l1=cfg.rec_loss == "l1")
            singles.extend(grads[2:])

        if not cfg.surrogate_nul:
            return l_rec, loss_nul(decoder, singles, mask)
        mean = nul_sum * (1.0 / len(members)) if members else None
        return l_rec, surrogate_nul(decoder, mean, singles[0] if singles else None, mask)

    def _apply_update(self) -> None:
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)

    @timing("SeerTrainer.train")
    def train(self) -> AttackArtifact:
        cfg = self.cfg
        pending = 0
        global_step = 0
        for epoch in range(cfg.epochs):
            sums, trained, rejected = [0.0, 0.0], 0, 0
            for step in range(cfg.steps_per_epoch):
                alpha = self.schedule.at(epoch + step / cfg.steps_per_epoch)
                try:
                    plan = self.draw_step(global_step)
                except BatchRejectedError:
                    rejected += 1
                    global_step += 1
                    continue

                l_rec, l_nul = self.step_losses(plan, self._rng(1, global_step))
                loss = total_loss(l_rec, l_nul, alpha)
                if not torch.isfinite(loss):
                    logger.critical(f"Non-finite attack loss at epoch {epoch}, step {step}")
                    raise DivergenceError(epoch, step, self.artifact)
                (loss / cfg.accumulation).backward()
                pending += 1
                if pending == cfg.accumulation:
                    self._apply_update()
                    pending = 0

                record = {"epoch": epoch, "step": step, "l_rec": float(l_rec), "l_nul": float(l_nul),
                          "alpha": alpha, "mode": plan.kind}
                self.artifact.curve.append(record)
                sums[0] += record["l_rec"]
                sums[1] += record["l_nul"]
                trained += 1
                global_step += 1

            mean_rec, mean_nul = (s / trained if trained else float("nan") for s in sums)
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: alpha={alpha:.4g} L_rec={mean_rec:.4g} "
                        f"L_nul={mean_nul:.4g} rejected={rejected}")
        if pending:
            self._apply_update()
        return self.artifact


def train(model: ModelHandle, dataset: ImageDataset, cfg: TrainConfig) -> AttackArtifact:
    """Train the released model and decoder in place; returns the artifact"""
    return SeerTrainer(model, dataset, cfg).train()


def _observed_gradient(update: Union[AggregateUpdate, GradientBundle]) -> GradientBundle:
    return update.gradient if isinstance(update, AggregateUpdate) else update


def mount(artifact: AttackArtifact, update: Union[AggregateUpdate, GradientBundle],
          clip_factors: Optional[Dict[str, float]] = None,
          output_scale: Optional[float] = None) -> torch.Tensor:
    """r(d(subsampled gradient)), optionally undoing DP clipping and rescaling the output range"""
    gradient = _observed_gradient(update)
    if not gradient.matches(artifact.model.parameter_shapes()):
        raise ArchitectureMismatchError("Observed gradient does not match the artifact's model")
    factors = artifact.clip_factors if clip_factors is None else clip_factors
    if factors:
        gradient = GradientBundle(
            OrderedDict((n, t / factors.get(n, 1.0)) for n, t in gradient.entries.items()),
            gradient.reduction,
        )
    scale = artifact.output_scale if output_scale is None else output_scale
    with torch.no_grad():
        image = artifact.decoder(flatten_subsample(gradient.detach(), artifact.mask)) * scale
    return image.reshape(artifact.image_shape).cpu()


def nul_projection_norm(artifact: AttackArtifact, batch: LabeledBatch) -> float:
    """Mean ||d(g_i)|| over the batch's nul examples, each scaled as in the observed mean"""
    _, i_nul = select(batch, artifact.property_spec)
    if not i_nul:
        return 0.0
    grads = per_example_gradients(artifact.model, batch, artifact.train_config.loss)
    with torch.no_grad():
        norms = [float(torch.linalg.vector_norm(
            artifact.decoder.embed(flatten_subsample(grads[i] * (1.0 / len(batch)), artifact.mask))))
            for i in i_nul]
    return float(np.mean(norms))


def clip_factor_from_norms(norms, clip_norm: float) -> float:
    """Median of min(1, C/||g||) over sampled norms; zero norms count as unclipped"""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise EmptyBatchError("No gradient norms to estimate a clip factor from")
    factors = np.ones_like(norms)
    np.divide(clip_norm, norms, out=factors, where=norms > 0)
    return float(np.median(np.minimum(1.0, factors)))


@timing("seer.estimate_clip_factors")
def estimate_clip_factors(model: ModelHandle, dataset: ImageDataset, batch_size: int, dp: DPConfig,
                          n_batches: int = DEFAULT_CLIP_BATCHES, seed: int = 0,
                          loss: LossKind = LossKind.CROSS_ENTROPY) -> Dict[str, float]:
    """Per-layer median clipping factor over sampled per-example gradients"""
    n_batches = validate_positive_int(n_batches, "n_batches")
    batch_size = validate_positive_int(batch_size, "batch_size")
    rng = np.random.default_rng(seed)
    norms: Dict[str, List[float]] = {name: [] for name in model.parameter_names}
    n = len(dataset)
    for _ in range(n_batches):
        batch = dataset.batch(rng.choice(n, size=batch_size, replace=n < batch_size))
        for bundle in per_example_gradients(model, batch, loss):
            for name, value in bundle.layer_norms().items():
                norms[name].append(value)
    factors = {name: clip_factor_from_norms(values, dp.clip_norm) for name, values in norms.items()}
    logger.info(f"Estimated clip factors over {n_batches} batches: {factors}")
    return factors


def calibrate_output_range(reconstructions: Sequence[torch.Tensor],
                           coverage: float = DEFAULT_CALIBRATION_COVERAGE) -> float:
    """Largest scale, never above 1, that keeps a `coverage` share of reconstructions inside [0, 1]"""
    if len(reconstructions) == 0:
        raise EmptyBatchError("No reconstructions to calibrate")
    coverage = validate_fraction(coverage, "coverage")
    maxima = np.sort([float(r.detach().abs().max()) for r in reconstructions])
    # smallest count of images that must fit, as an order statistic of the maxima
    k = max(1, math.ceil(round(coverage * len(maxima), 9)))
    q = float(maxima[k - 1])
    return 1.0 if q <= 1.0 else 1.0 / q
