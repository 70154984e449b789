import math
import numpy as np
import torch

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from app import logger
from app.constants import INF, PSNR_CAP, PSNR_REC_THRESHOLD, TOP_FRACTION
from app.core.detect import audit
from app.core.fedsim import DPConfig, aggregate_round
from app.core.gradcore import LabeledBatch, ModelHandle
from app.core.property import select
from app.core.seer import AttackArtifact, mount
from app.decorators.timing import timing
from app.exceptions.lab_errors import EmptyBatchError, InputShapeError
from app.utils.validators import validate_fraction

REPORT_COLUMNS = ("batch_id", "selected_count", "psnr", "mse", "detected", "dsnr")


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    if tuple(a.shape) != tuple(b.shape):
        raise InputShapeError(a.shape, b.shape)
    a, b = a.detach().cpu().to(torch.float64), b.detach().cpu().to(torch.float64)
    return float(((a - b) ** 2).mean())


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give +inf"""
    error = mse(a, b)
    if error == 0.0:
        return INF
    return 10.0 * math.log10(peak ** 2 / error)


def rec_rate(psnrs: Sequence[float], threshold: float = PSNR_REC_THRESHOLD) -> float:
    """Fraction of values strictly above the threshold"""
    if len(psnrs) == 0:
        raise EmptyBatchError("No PSNR values")
    return sum(1 for p in psnrs if p > threshold) / len(psnrs)


def _capped(psnrs: Sequence[float]) -> np.ndarray:
    return np.minimum(np.asarray(psnrs, dtype=np.float64), PSNR_CAP)


def _mean_std(psnrs: Sequence[float]) -> Tuple[float, float]:
    capped = _capped(psnrs)
    if capped.size == 0:
        return float("nan"), float("nan")
    return float(capped.mean()), float(capped.std())


def selected_count(n: int, fraction: float) -> int:
    """ceil(fraction * n) with a floor of one"""
    return max(1, math.ceil(fraction * n - 1e-9))


def psnr_top(psnrs: Sequence[float], fraction: float = TOP_FRACTION) -> Tuple[float, float]:
    """Mean and std of the top ceil(fraction * N) values"""
    if len(psnrs) == 0:
        raise EmptyBatchError("No PSNR values")
    fraction = validate_fraction(fraction, "fraction")
    top = np.sort(_capped(psnrs))[::-1][:selected_count(len(psnrs), fraction)]
    return float(top.mean()), float(top.std())


@dataclass(frozen=True)
class BatchRecord:
    batch_id: int
    selected_count: int
    psnr: Optional[float] = None
    mse: Optional[float] = None
    detected: bool = False
    dsnr: Optional[float] = None

    @property
    def scored(self) -> bool:
        return self.psnr is not None

    def recovered(self, threshold: float = PSNR_REC_THRESHOLD) -> bool:
        return self.scored and self.psnr > threshold

    def row(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "selected_count": self.selected_count,
            "psnr": "" if self.psnr is None else self.psnr,
            "mse": "" if self.mse is None else self.mse,
            "detected": self.detected,
            "dsnr": "" if self.dsnr is None else self.dsnr,
        }


@dataclass
class EvalReport:
    records: List[BatchRecord]
    threshold: float = PSNR_REC_THRESHOLD
    reconstructions: List[torch.Tensor] = field(default_factory=list, repr=False)

    @property
    def scored_psnrs(self) -> List[float]:
        return [r.psnr for r in self.records if r.scored]

    @property
    def rec_rate(self) -> float:
        """Unscorable rounds count as failures"""
        return rec_rate([r.psnr if r.scored else -INF for r in self.records], self.threshold)

    @property
    def rec_rate_scored(self) -> float:
        scored = self.scored_psnrs
        return rec_rate(scored, self.threshold) if scored else float("nan")

    @property
    def exclusion_rate(self) -> float:
        return sum(1 for r in self.records if not r.scored) / len(self.records)

    @property
    def und_rec_rate(self) -> float:
        return sum(1 for r in self.records if r.recovered(self.threshold) and not r.detected) / len(self.records)

    @property
    def psnr_all(self) -> Tuple[float, float]:
        return _mean_std(self.scored_psnrs)

    @property
    def psnr_und(self) -> Tuple[float, float]:
        """PSNR over the scored rounds that no audit flagged"""
        return _mean_std([r.psnr for r in self.records if r.scored and not r.detected])

    @property
    def psnr_und_rec(self) -> Tuple[float, float]:
        return _mean_std([r.psnr for r in self.records
                          if r.recovered(self.threshold) and not r.detected])

    @property
    def psnr_top(self) -> Tuple[float, float]:
        scored = self.scored_psnrs
        return psnr_top(scored) if scored else (float("nan"), float("nan"))

    def summary(self) -> dict:
        return {
            "n_batches": len(self.records),
            "rec_rate": self.rec_rate,
            "rec_rate_scored": self.rec_rate_scored,
            "exclusion_rate": self.exclusion_rate,
            "und_rec_rate": self.und_rec_rate,
            "psnr_all_mean": self.psnr_all[0],
            "psnr_all_std": self.psnr_all[1],
            "psnr_top_mean": self.psnr_top[0],
            "psnr_top_std": self.psnr_top[1],
            "psnr_und_mean": self.psnr_und[0],
            "psnr_und_std": self.psnr_und[1],
            "psnr_und_rec_mean": self.psnr_und_rec[0],
            "psnr_und_rec_std": self.psnr_und_rec[1],
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class DetectionSpec:
    dsnr_threshold: float
    tsnr_threshold: float


def _ground_truth(artifact: AttackArtifact, client_batches: Sequence[LabeledBatch]):
    chosen = []
    for batch in client_batches:
        i_rec, _ = select(batch, artifact.property_spec)
        chosen.extend(batch.images[i] for i in i_rec)
    return chosen


@timing("evalkit.evaluate_attack")
def evaluate_attack(artifact: AttackArtifact, model: ModelHandle, rounds: Sequence[Sequence[LabeledBatch]],
                    detection: Optional[DetectionSpec] = None, dp: Optional[DPConfig] = None,
                    threshold: float = PSNR_REC_THRESHOLD) -> EvalReport:
    """
    Mount the attack on every round and score it against the property-selected image

    Each round is the list of client batches aggregated together. A round is
    scored only when exactly one image across its clients satisfies the property.
    """
    if len(rounds) == 0:
        raise EmptyBatchError("No rounds to evaluate")
    records, reconstructions = [], []
    for batch_id, client_batches in enumerate(rounds):
        update = aggregate_round(model, client_batches, artifact.train_config.loss, dp, round_index=batch_id)
        reconstruction = mount(artifact, update)
        reconstructions.append(reconstruction)

        detected, dsnr_value = False, None
        if detection is not None:
            reports = [audit(model, batch, detection.dsnr_threshold, detection.tsnr_threshold)
                       for batch in client_batches]
            detected = any(r.flagged for r in reports)
            dsnr_value = max(r.dsnr for r in reports)

        truth = _ground_truth(artifact, client_batches)
        if len(truth) == 1:
            scored = reconstruction.clamp(0.0, 1.0)
            records.append(BatchRecord(batch_id, 1, psnr(scored, truth[0]), mse(scored, truth[0]),
                                       detected, dsnr_value))
        else:
            records.append(BatchRecord(batch_id, len(truth), detected=detected, dsnr=dsnr_value))

    report = EvalReport(records, threshold, reconstructions)
    logger.info(f"Evaluated {len(records)} rounds: rec_rate={report.rec_rate:.4g} "
                f"psnr_all={report.psnr_all[0]:.4g} exclusion_rate={report.exclusion_rate:.4g}")
    return report
