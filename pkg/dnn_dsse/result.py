import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
from scipy.stats import binom
from sklearn.metrics import confusion_matrix
from dnn_dsse.feeder import wrap_angle


class MetricsError(ValueError):
    """Raised for mismatched shapes or samples too small for a tolerance bound."""


@dataclass(frozen=True)
class ToleranceBound:
    value: float
    proportion: float = 0.95
    confidence: float = 0.95
    sample_size: int = 0
    order_statistic: int = 0

    def __post_init__(self):
        if not 0 < self.proportion < 1 or not 0 < self.confidence < 1:
            raise MetricsError("Tolerance proportion and confidence must lie in (0, 1)")
        if self.value < 0:
            raise MetricsError(f"Tolerance bound must be nonnegative, got {self.value}")

    def to_dict(self) -> dict:
        return {'value': self.value, 'proportion': self.proportion, 'confidence': self.confidence,
                'sample_size': self.sample_size, 'order_statistic': self.order_statistic}


class Metrics:

    @classmethod
    def angle_errors(cls, estimates, truths) -> np.ndarray:
        """Signed angle differences wrapped into (-180, 180] degrees."""
        estimates, truths = cls._pair(estimates, truths)
        return wrap_angle(estimates - truths)

    @classmethod
    def mae_phase(cls, estimates, truths, mask=None) -> float:
        """
        Mean absolute phase-angle error in degrees.
        :param estimates: estimated angles in degrees
        :param truths: true angles in degrees
        :param mask: optional boolean array selecting the entries to average
        :return: The MAE in degrees
        """
        errors = np.abs(cls.angle_errors(estimates, truths))
        if mask is not None:
            errors = errors[np.broadcast_to(np.asarray(mask, dtype=bool), errors.shape)]
        if errors.size == 0:
            raise MetricsError("No entries to average")
        return float(errors.mean())

    @classmethod
    def magnitude_percent_errors(cls, estimates, truths, mask=None) -> Tuple[np.ndarray, int]:
        """
        Absolute percentage magnitude errors; entries with a zero true magnitude are excluded.
        :return: (errors of the kept entries, number of excluded entries)
        """
        estimates, truths = cls._pair(estimates, truths)
        keep = np.ones(truths.shape, dtype=bool)
        if mask is not None:
            keep &= np.broadcast_to(np.asarray(mask, dtype=bool), truths.shape)
        zero = keep & (truths == 0)
        keep &= ~zero
        errors = np.abs(estimates[keep] - truths[keep]) / np.abs(truths[keep]) * 100.0
        return errors, int(zero.sum())

    @classmethod
    def mape_magnitude(cls, estimates, truths, mask=None) -> Tuple[float, int]:
        """
        Mean absolute percentage error of magnitudes.
        :return: (MAPE in percent, number of zero-truth entries excluded)
        """
        errors, excluded = cls.magnitude_percent_errors(estimates, truths, mask)
        if excluded:
            logging.warning(f"Excluded {excluded} zero-magnitude truths from the MAPE")
        if errors.size == 0:
            raise MetricsError("No nonzero truth magnitudes to average")
        return float(errors.mean()), excluded

    @classmethod
    def minimum_sample_size(cls, proportion: float = 0.95, confidence: float = 0.95) -> int:
        """Smallest N whose maximum order statistic is a (proportion, confidence) upper tolerance bound."""
        return int(math.ceil(math.log(1.0 - confidence) / math.log(proportion)))

    @classmethod
    def tolerance_upper_bound(cls, errors, proportion: float = 0.95, confidence: float = 0.95) -> ToleranceBound:
        """
        Distribution-free one-sided upper tolerance bound: the r-th order statistic of the sample, r being the
        smallest rank with BinomialCDF(r - 1; N, proportion) >= confidence.
        :param errors: nonnegative error sample
        :return: ToleranceBound
        """
        sample = np.sort(np.asarray(errors, dtype=float).ravel())
        n = len(sample)
        if np.any(sample < 0):
            raise MetricsError("Tolerance bounds need a nonnegative error sample")
        ranks = np.arange(1, n + 1)
        covered = binom.cdf(ranks - 1, n, proportion) >= confidence
        if n == 0 or not covered.any():
            raise MetricsError(f"A ({proportion}, {confidence}) tolerance bound needs at least "
                               f"{cls.minimum_sample_size(proportion, confidence)} samples, got {n}")
        r = int(ranks[np.argmax(covered)])
        return ToleranceBound(float(sample[r - 1]), proportion, confidence, n, r)

    @classmethod
    def split_state(cls, states) -> Tuple[np.ndarray, np.ndarray]:
        """Split interleaved (magnitude, angle) state rows into magnitude and angle blocks."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return states[:, 0::2], states[:, 1::2]

    @classmethod
    def _pair(cls, estimates, truths) -> Tuple[np.ndarray, np.ndarray]:
        estimates = np.asarray(estimates, dtype=float)
        truths = np.asarray(truths, dtype=float)
        if estimates.shape != truths.shape:
            raise MetricsError(f"Estimate shape {estimates.shape} does not match truth shape {truths.shape}")
        return estimates, truths


class MetricsReport:
    """Evaluation summary of one estimator on one test set."""

    def __init__(self, method: str, kind: str = 'dsse'):
        self.method: str = method
        self.kind: str = kind
        self._rows: int = 0
        self._n_smd: Optional[int] = None
        self._phase_mae: Optional[float] = None
        self._node_mae: Dict[str, float] = {}
        self._mape: Optional[float] = None
        self._mape_excluded: int = 0
        self._phase_bound: Optional[ToleranceBound] = None
        self._magnitude_bound: Optional[ToleranceBound] = None
        self._accuracy: Optional[float] = None
        self._class_accuracy: Dict[int, float] = {}
        self._confusion: Optional[np.ndarray] = None
        self.timings: Dict[str, float] = {}
        self.notes: List[str] = []

    @property
    def rows(self) -> int:
        return self._rows

    @property
    def n_smd(self) -> Optional[int]:
        return self._n_smd

    @n_smd.setter
    def n_smd(self, value: int) -> None:
        if value is not None and value < 0:
            raise ValueError("n_smd must be nonnegative")
        self._n_smd = value

    @property
    def phase_mae(self) -> Optional[float]:
        """
        Getter for the aggregate phase-angle MAE.
        :return: The MAE in degrees
        """
        return self._phase_mae

    @property
    def node_mae(self) -> Dict[str, float]:
        return self._node_mae

    @property
    def mape(self) -> Optional[float]:
        """
        Getter for the magnitude MAPE.
        :return: The MAPE in percent
        """
        return self._mape

    @property
    def mape_excluded(self) -> int:
        return self._mape_excluded

    @property
    def phase_bound(self) -> Optional[ToleranceBound]:
        return self._phase_bound

    @property
    def magnitude_bound(self) -> Optional[ToleranceBound]:
        return self._magnitude_bound

    @property
    def accuracy(self) -> Optional[float]:
        """
        Getter for the topology identification accuracy.
        :return: Accuracy in percent
        """
        return self._accuracy

    @property
    def class_accuracy(self) -> Dict[int, float]:
        return self._class_accuracy

    @property
    def confusion(self) -> Optional[np.ndarray]:
        return self._confusion

    @classmethod
    def for_states(cls, method: str, estimates, truths, masks=None, node_names: Optional[Sequence[str]] = None,
                   n_smd: Optional[int] = None, proportion: float = 0.95,
                   confidence: float = 0.95) -> 'MetricsReport':
        """
        Score state estimates.
        :param estimates: rows of interleaved (magnitude, angle) estimates
        :param truths: rows of interleaved true states
        :param masks: boolean (rows, node-phases) array of energized node-phases; all if None
        :param node_names: 'bus.phase' per node-phase, for the per-node MAE
        :return: MetricsReport
        """
        est_mag, est_ang = Metrics.split_state(estimates)
        true_mag, true_ang = Metrics.split_state(truths)
        if est_mag.shape != true_mag.shape:
            raise MetricsError(f"Estimate shape {np.shape(estimates)} does not match truth shape {np.shape(truths)}")
        mask = np.ones(true_ang.shape, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
        report = cls(method, 'dsse')
        report._rows = len(true_ang)
        report.n_smd = n_smd
        abs_ang = np.abs(Metrics.angle_errors(est_ang, true_ang))
        report._phase_mae = float(abs_ang[mask].mean())
        if node_names is not None:
            for k, name in enumerate(node_names):
                if mask[:, k].any():
                    report._node_mae[name] = float(abs_ang[mask[:, k], k].mean())
        report._mape, report._mape_excluded = Metrics.mape_magnitude(est_mag, true_mag, mask)
        mag_errors, _ = Metrics.magnitude_percent_errors(est_mag, true_mag, mask)
        minimum = Metrics.minimum_sample_size(proportion, confidence)
        if abs_ang[mask].size >= minimum:
            report._phase_bound = Metrics.tolerance_upper_bound(abs_ang[mask], proportion, confidence)
            report._magnitude_bound = Metrics.tolerance_upper_bound(mag_errors, proportion, confidence)
        else:
            report.notes.append(f"tolerance bounds skipped: {abs_ang[mask].size} errors < {minimum}")
        return report

    @classmethod
    def for_topologies(cls, method: str, predicted, truths, classes: int,
                       n_smd: Optional[int] = None) -> 'MetricsReport':
        predicted = np.asarray(predicted, dtype=int)
        truths = np.asarray(truths, dtype=int)
        if predicted.shape != truths.shape:
            raise MetricsError("Predicted and true class arrays differ in shape")
        if len(truths) == 0:
            raise MetricsError("No rows to score")
        report = cls(method, 'ti')
        report._rows = len(truths)
        report.n_smd = n_smd
        report._confusion = confusion_matrix(truths, predicted, labels=list(range(classes)))
        report._accuracy = float(np.mean(predicted == truths) * 100.0)
        for c in range(classes):
            hits = truths == c
            if hits.any():
                report._class_accuracy[c] = float(np.mean(predicted[hits] == c) * 100.0)
        return report

    @classmethod
    def result_fields(cls) -> List[str]:
        return [
            "method",
            "kind",
            "rows",
            "n_smd",
            "phase_mae_deg",
            "phase_tolerance_deg",
            "mape_pct",
            "magnitude_tolerance_pct",
            "accuracy_pct",
        ]

    def get_values(self) -> list:
        return [
            self.method,
            self.kind,
            self.rows,
            self.n_smd,
            self.phase_mae,
            self.phase_bound.value if self.phase_bound else None,
            self.mape,
            self.magnitude_bound.value if self.magnitude_bound else None,
            self.accuracy,
        ]

    def __str__(self) -> str:
        return '\t'.join(map(str, self.get_values()))

    @classmethod
    def table(cls, reports: Sequence['MetricsReport']) -> str:
        """Aligned text table, one row per report."""
        header = cls.result_fields()
        body = [[cls._format(v) for v in r.get_values()] for r in reports]
        widths = [max(len(str(h)), *(len(row[k]) for row in body)) if body else len(h) for k, h in enumerate(header)]
        lines = ['  '.join(h.ljust(w) for h, w in zip(header, widths))]
        lines.extend('  '.join(v.ljust(w) for v, w in zip(row, widths)) for row in body)
        return '\n'.join(lines)

    @staticmethod
    def _format(value) -> str:
        if value is None:
            return '-'
        if isinstance(value, float):
            return f"{value:.4g}"
        return str(value)

    def to_dict(self) -> dict:
        return {
            'method': self.method,
            'kind': self.kind,
            'rows': self.rows,
            'n_smd': self.n_smd,
            'phase_mae_deg': self.phase_mae,
            'node_mae_deg': self.node_mae,
            'mape_pct': self.mape,
            'mape_excluded': self.mape_excluded,
            'phase_tolerance': self.phase_bound.to_dict() if self.phase_bound else None,
            'magnitude_tolerance': self.magnitude_bound.to_dict() if self.magnitude_bound else None,
            'accuracy_pct': self.accuracy,
            'class_accuracy_pct': {str(k): v for k, v in self.class_accuracy.items()},
            'confusion': self.confusion.tolist() if self.confusion is not None else None,
            'timings_s': self.timings,
            'notes': self.notes,
        }
