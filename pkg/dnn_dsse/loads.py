import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from scipy import stats, optimize
from dnn_dsse.feeder import FeederModel
from dnn_dsse.powerflow import Injections

"""
loads.py

Turns smart-meter histories into per-transformer load distributions and draws Monte-Carlo operating points from
them. Meter energies are reduced to average power per interval, summed over the meters of a transformer group, and
fitted with a Gaussian kernel density estimate whose bandwidth starts at Silverman's rule and is widened until
held-out data is reproduced. The module also hosts the two-sample Kolmogorov-Smirnov screening used for noisy meter
data.
"""

METER_COLUMNS = ['meter_id', 'transformer_group', 'interval_hours', 'energy_kwh']

# stream tags for numpy SeedSequence entropy
STREAM_LOADS = 1
STREAM_KDE = 5
STREAM_METER_NOISE = 6


class LoadModelError(ValueError):
    """Raised for malformed meter data, too few samples, or missing load distributions."""


@dataclass(frozen=True)
class SmartMeterSeries:
    meter_id: str
    transformer_group: str
    readings: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        for interval, energy in self.readings:
            if not interval > 0:
                raise LoadModelError(f"Meter {self.meter_id}: interval must be positive, got {interval}")
            if not energy >= 0:
                raise LoadModelError(f"Meter {self.meter_id}: energy must be nonnegative, got {energy}")

    def intervals(self) -> np.ndarray:
        return np.array([r[0] for r in self.readings], dtype=float)

    def energies(self) -> np.ndarray:
        return np.array([r[1] for r in self.readings], dtype=float)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    reject: bool


@dataclass(frozen=True)
class SamplerConfig:
    pf_range: Tuple[float, float] = (0.95, 1.0)
    dg_variation: Tuple[float, float] = (0.5, 1.5)
    master_seed: int = 0

    def __post_init__(self):
        lo, hi = self.pf_range
        if not (0 < lo <= hi <= 1):
            raise LoadModelError(f"pf_range must lie within (0, 1], got {self.pf_range}")
        lo, hi = self.dg_variation
        if not (0 < lo <= hi):
            raise LoadModelError(f"dg_variation must be a positive range, got {self.dg_variation}")

    @classmethod
    def from_dict(cls, data: Mapping, master_seed: int = 0) -> 'SamplerConfig':
        data = data or {}
        return cls(tuple(data.get('pf_range', (0.95, 1.0))), tuple(data.get('dg_variation', (0.5, 1.5))),
                   int(data.get('master_seed', master_seed)))


@dataclass(frozen=True, eq=False)
class LoadPdf:
    """Gaussian-kernel density over average group power in kW."""
    group_id: str
    sample_points: np.ndarray
    bandwidth: float
    point_mass: bool = False

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise LoadModelError(f"Group {self.group_id}: bandwidth must be positive")

    def density(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        # chunked to bound memory on long meter histories
        for start in range(0, len(x), 512):
            chunk = x[start:start + 512]
            out[start:start + 512] = stats.norm.pdf((chunk[:, None] - self.sample_points[None, :]) /
                                                    self.bandwidth).mean(axis=1) / self.bandwidth
        return out

    def cdf(self, x: float) -> float:
        return float(stats.norm.cdf((x - self.sample_points) / self.bandwidth).mean())

    def quantile(self, q: float) -> float:
        lo = float(self.sample_points.min()) - 10 * self.bandwidth
        hi = float(self.sample_points.max()) + 10 * self.bandwidth
        return float(optimize.brentq(lambda x: self.cdf(x) - q, lo, hi, xtol=1e-10 * max(1.0, abs(hi))))

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        centers = self.sample_points[rng.integers(0, len(self.sample_points), size=size)]
        noise = self.bandwidth * rng.standard_normal(size)
        if self.point_mass:
            noise = np.clip(noise, -4 * self.bandwidth, 4 * self.bandwidth)
        return centers + noise

    def mean(self) -> float:
        return float(self.sample_points.mean())

    def variance(self) -> float:
        return float(self.sample_points.var() + self.bandwidth ** 2)

    def to_dict(self) -> dict:
        return {'group_id': self.group_id, 'bandwidth': self.bandwidth, 'point_mass': self.point_mass,
                'sample_points': self.sample_points.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'LoadPdf':
        return cls(data['group_id'], np.asarray(data['sample_points'], dtype=float), float(data['bandwidth']),
                   bool(data.get('point_mass', False)))


class LoadModeler:

    @classmethod
    def read_meter_file(cls, path: str) -> List[SmartMeterSeries]:
        """
        Read a delimited smart-meter file with columns meter_id, transformer_group, interval_hours, energy_kwh.
        Row order within a meter defines its time slots.
        :param path: Location of the CSV file
        :return: A list of SmartMeterSeries, ordered by meter id
        """
        logging.info(f"Reading smart-meter data from {path}")
        frame = pd.read_csv(path, dtype={'meter_id': str, 'transformer_group': str})
        missing = [c for c in METER_COLUMNS if c not in frame.columns]
        if missing:
            raise LoadModelError(f"Meter file {path} lacks columns {missing}")
        return cls.series_from_frame(frame)

    @classmethod
    def series_from_frame(cls, frame: pd.DataFrame) -> List[SmartMeterSeries]:
        series = []
        for meter_id, rows in frame.groupby('meter_id', sort=True):
            groups = rows['transformer_group'].dropna().unique()
            if len(groups) != 1:
                raise LoadModelError(f"Meter {meter_id} must belong to exactly one transformer group")
            readings = tuple(zip(rows['interval_hours'].astype(float), rows['energy_kwh'].astype(float)))
            series.append(SmartMeterSeries(str(meter_id), str(groups[0]), readings))
        return series

    @classmethod
    def to_frame(cls, series: Iterable[SmartMeterSeries]) -> pd.DataFrame:
        rows = [(s.meter_id, s.transformer_group, interval, energy) for s in series for interval, energy in s.readings]
        return pd.DataFrame(rows, columns=METER_COLUMNS)

    @classmethod
    def aggregate_to_transformer(cls, series: Iterable[SmartMeterSeries],
                                 groups: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        """
        Sum average power (energy / interval) over the meters of every transformer group, slot by slot.
        :param series: SmartMeterSeries objects
        :param groups: Optional group ids that must be present
        :return: dict group id -> array of average kW per time slot
        """
        by_group: Dict[str, List[SmartMeterSeries]] = {}
        for s in series:
            if not s.transformer_group:
                raise LoadModelError(f"Meter {s.meter_id} has no transformer group")
            by_group.setdefault(s.transformer_group, []).append(s)
        for group in groups or []:
            if not by_group.get(group):
                raise LoadModelError(f"Transformer group '{group}' has no meters")

        aggregated = {}
        for group in sorted(by_group):
            members = sorted(by_group[group], key=lambda s: s.meter_id)
            reference = members[0].intervals()
            total = np.zeros(len(reference))
            for s in members:
                intervals = s.intervals()
                if intervals.shape != reference.shape or not np.allclose(intervals, reference):
                    raise LoadModelError(f"Transformer group '{group}': meter {s.meter_id} has a different time base "
                                         f"than meter {members[0].meter_id}")
                total += s.energies() / intervals
            aggregated[group] = total
        return aggregated

    @classmethod
    def fit_kde(cls, samples: Sequence[float], group_id: str = '', target_coverage: float = 0.95,
                alpha: float = 0.05, seed: int = 0, scale_step: float = 1.1, max_steps: int = 40,
                min_bandwidth: float = 1e-3, min_samples: int = 30) -> LoadPdf:
        """
        Fit a Gaussian KDE. Silverman's bandwidth on a 90% fitting split is widened by scale_step until the KS test
        between the 10% held-out split and a synthetic draw is not rejected and at least target_coverage of the
        held-out points fall inside the central target_coverage inter-quantile range of the KDE.
        :param samples: average power samples in kW
        :param group_id: transformer group the samples belong to
        :return: A LoadPdf fitted on all samples with the accepted bandwidth
        """
        data = np.asarray(samples, dtype=float)
        if len(data) < min_samples:
            raise LoadModelError(f"Group '{group_id}': {len(data)} samples, at least {min_samples} are needed")
        if np.ptp(data) <= 1e-12 * max(1.0, abs(data[0])):
            logging.warning(f"Group '{group_id}' has constant load {data[0]:.4g} kW, using a point mass")
            return LoadPdf(group_id, np.array([data[0]]), min_bandwidth, point_mass=True)

        rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_KDE]))
        order = rng.permutation(len(data))
        n_fit = int(round(0.9 * len(data)))
        fit, held = data[order[:n_fit]], data[order[n_fit:]]
        if np.ptp(fit) <= 0:
            fit = data
        silverman = stats.gaussian_kde(fit, bw_method='silverman').factor * fit.std(ddof=1)
        base = max(silverman, min_bandwidth)

        tail = (1.0 - target_coverage) / 2.0
        scale = 1.0
        for step in range(max_steps + 1):
            scale = scale_step ** step
            candidate = LoadPdf(group_id, fit, base * scale)
            synthetic = candidate.draw(rng, len(held))
            ks = cls.ks_two_sample(held, synthetic, alpha)
            lo, hi = candidate.quantile(tail), candidate.quantile(1.0 - tail)
            coverage = float(np.mean((held >= lo) & (held <= hi)))
            if not ks.reject and coverage >= target_coverage:
                logging.debug(f"Group '{group_id}': accepted bandwidth scale {scale:.3f} (coverage {coverage:.3f}, "
                              f"KS p={ks.p_value:.3f})")
                break
        else:
            logging.warning(f"Group '{group_id}': bandwidth search hit its cap, using scale {scale:.3f}")
        return LoadPdf(group_id, data, base * scale)

    @classmethod
    def fit_all(cls, series: Iterable[SmartMeterSeries], model: FeederModel, seed: int = 0,
                **kwargs) -> Dict[str, LoadPdf]:
        groups = sorted({ld.meter_group for ld in model.loads if ld.meter_group})
        aggregated = cls.aggregate_to_transformer(series, groups)
        return {g: cls.fit_kde(aggregated[g], group_id=g, seed=seed, **kwargs) for g in groups}

    @classmethod
    def group_nominal_kw(cls, model: FeederModel) -> Dict[str, float]:
        nominal: Dict[str, float] = {}
        for ld in model.loads:
            if ld.meter_group:
                nominal[ld.meter_group] = nominal.get(ld.meter_group, 0.0) + ld.total_kw
        return nominal

    @classmethod
    def scenario_rng(cls, master_seed: int, index: int, topology: int = 0, attempt: int = 0,
                     stream: int = STREAM_LOADS) -> np.random.Generator:
        """Independent generator per (seed, stream, topology, scenario, attempt) so draws do not depend on order."""
        return np.random.default_rng(np.random.SeedSequence([master_seed, stream, topology, index, attempt]))

    @classmethod
    def sample_scenario(cls, pdfs: Mapping[str, LoadPdf], model: FeederModel, cfg: SamplerConfig,
                        rng: np.random.Generator) -> Dict[str, Tuple[Tuple[str, float, float], ...]]:
        """
        Draw one operating point. Metered groups take their power from the KDE (negative draws are redrawn) and
        spread it over their loads pro rata to nameplate; unmetered loads and DG scale by a uniform factor over
        dg_variation. Every phase gets its own power factor from pf_range.
        """
        nominal = cls.group_nominal_kw(model)
        group_factor = {}
        for group in sorted(nominal):
            if group not in pdfs:
                raise LoadModelError(f"No load distribution for metered group '{group}'")
            group_factor[group] = cls._positive_draw(pdfs[group], rng) / nominal[group] if nominal[group] > 0 else 0.0

        lo, hi = cfg.pf_range
        vlo, vhi = cfg.dg_variation
        injections = {}
        for ld in model.loads:
            factor = group_factor[ld.meter_group] if ld.meter_group else rng.uniform(vlo, vhi)
            entries = []
            for key, kw, _ in ld.per_phase_pq:
                pf = rng.uniform(lo, hi)
                p = kw * factor
                entries.append((key, p, p * cls._q_ratio(pf)))
            injections[ld.id] = tuple(entries)
        for dg in model.dgs:
            p = dg.rating_kw * rng.uniform(vlo, vhi) / len(dg.phases)
            entries = []
            for ph in dg.phases:
                pf = rng.uniform(lo, hi)
                entries.append((ph, -p, -p * cls._q_ratio(pf)))
            injections[dg.id] = tuple(entries)
        return injections

    @classmethod
    def sample_loads(cls, pdfs: Mapping[str, LoadPdf], model: FeederModel, cfg: SamplerConfig, n: int,
                     topology: int = 0, start: int = 0) -> List[Injections]:
        """
        Draw n operating points; scenario i uses its own generator derived from (master_seed, i).
        """
        return [cls.sample_scenario(pdfs, model, cfg, cls.scenario_rng(cfg.master_seed, i, topology))
                for i in range(start, start + n)]

    @classmethod
    def _q_ratio(cls, pf: float) -> float:
        return 0.0 if pf >= 1.0 else float(np.tan(np.arccos(pf)))

    @classmethod
    def _positive_draw(cls, pdf: LoadPdf, rng: np.random.Generator, max_redraws: int = 100) -> float:
        for _ in range(max_redraws):
            value = float(pdf.draw(rng, 1)[0])
            if value >= 0:
                return value
        logging.warning(f"Group '{pdf.group_id}': no nonnegative draw after {max_redraws} tries, clipping at 0")
        return 0.0

    @classmethod
    def ks_two_sample(cls, x: Sequence[float], y: Sequence[float], alpha: float = 0.05) -> KsResult:
        """
        Two-sample Kolmogorov-Smirnov test, exact p-values for samples up to 50 and the asymptotic distribution
        beyond that.
        :return: KsResult with D, p and whether the null hypothesis is rejected at alpha
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(x) == 0 or len(y) == 0:
            raise LoadModelError("Kolmogorov-Smirnov test needs two nonempty samples")
        method = 'exact' if max(len(x), len(y)) <= 50 else 'asymp'
        statistic, p_value = stats.ks_2samp(x, y, alternative='two-sided', method=method)
        return KsResult(float(statistic), float(p_value), bool(p_value < alpha))

    @classmethod
    def synthesize_meter_year(cls, model: FeederModel, seed: int = 0, hours: int = 8760,
                              meters_per_group: Tuple[int, int] = (2, 5), interval_hours: float = 1.0,
                              spread: float = 0.25) -> List[SmartMeterSeries]:
        """
        Synthetic smart-meter history for every metered group of a feeder: a daily and a seasonal cycle around the
        group's nameplate power, lognormal spread per reading, split over a random number of meters.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_METER_NOISE, 0]))
        slots = int(round(hours / interval_hours))
        t = np.arange(slots) * interval_hours
        daily = 1.0 + 0.3 * np.sin(2 * np.pi * (t % 24 - 7) / 24)
        seasonal = 1.0 + 0.15 * np.cos(2 * np.pi * t / 8760.0)
        series = []
        for group, kw in sorted(cls.group_nominal_kw(model).items()):
            count = int(rng.integers(meters_per_group[0], meters_per_group[1] + 1))
            shares = rng.dirichlet(np.full(count, 4.0))
            for k in range(count):
                noise = rng.lognormal(mean=-spread ** 2 / 2, sigma=spread, size=slots)
                power = kw * shares[k] * daily * seasonal * noise
                readings = tuple(zip(np.full(slots, interval_hours), power * interval_hours))
                series.append(SmartMeterSeries(f"{group}-m{k + 1}", group, readings))
        return series
