import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple
import numpy as np

"""
noise.py

Measurement corruption. Synchrophasor channels get a two-level error: a bounded three-component Gaussian mixture for
the instrumentation channel (magnitude ratio error and phase displacement), followed by a Gaussian total vector
error in rectangular coordinates. Smart-meter energies get a truncated multiplicative Gaussian error.
"""

CHANNEL_KINDS = ('vmag', 'vang', 'imag', 'iang')
DEFAULT_BOUNDS = {'vmag': 0.012, 'vang': 1.0, 'imag': 0.024, 'iang': 2.0}
MODES = ('none', 'gaussian_tve_only', 'two_level')

# (weight, mean, std) per component
Component = Tuple[float, float, float]


def default_components(bound: float) -> Tuple[Component, ...]:
    return ((0.25, -0.4 * bound, 0.25 * bound), (0.5, 0.0, 0.25 * bound), (0.25, 0.4 * bound, 0.25 * bound))


@dataclass(frozen=True)
class GmmSpec:
    """
    Mixture per channel kind. Magnitude kinds are fractions of the true magnitude (0.012 = 1.2%), angle kinds are
    degrees. The shipped components are assumed values, not published ones.
    """
    components: Dict[str, Tuple[Component, ...]] = field(
        default_factory=lambda: {k: default_components(b) for k, b in DEFAULT_BOUNDS.items()})
    bounds: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))

    def __post_init__(self):
        for kind in CHANNEL_KINDS:
            if kind not in self.components or kind not in self.bounds:
                raise ValueError(f"GMM spec lacks channel kind '{kind}'")
            weights = np.array([c[0] for c in self.components[kind]])
            if len(weights) != 3:
                raise ValueError(f"GMM for '{kind}' must have 3 components, got {len(weights)}")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
                raise ValueError(f"GMM weights for '{kind}' must be nonnegative and sum to 1")
            if any(c[2] < 0 for c in self.components[kind]):
                raise ValueError(f"GMM standard deviations for '{kind}' must be nonnegative")
            if not self.bounds[kind] > 0:
                raise ValueError(f"GMM bound for '{kind}' must be positive")

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> 'GmmSpec':
        if not data:
            return cls()
        bounds = dict(DEFAULT_BOUNDS)
        bounds.update({k: float(v) for k, v in (data.get('bounds') or {}).items()})
        components = {k: default_components(bounds[k]) for k in CHANNEL_KINDS}
        for kind, comps in (data.get('components') or {}).items():
            components[kind] = tuple((float(w), float(m), float(s)) for w, m, s in comps)
        return cls(components, bounds)

    def to_dict(self) -> dict:
        return {'bounds': dict(self.bounds),
                'components': {k: [list(c) for c in v] for k, v in self.components.items()}}

    def table(self) -> str:
        lines = ['kind\tbound\tweight\tmean\tstd']
        for kind in CHANNEL_KINDS:
            for w, m, s in self.components[kind]:
                lines.append(f"{kind}\t{self.bounds[kind]:g}\t{w:g}\t{m:g}\t{s:g}")
        return '\n'.join(lines)


@dataclass(frozen=True)
class TveSpec:
    tve_limit: float = 0.01

    def __post_init__(self):
        if self.tve_limit < 0:
            raise ValueError(f"tve_limit must be nonnegative, got {self.tve_limit}")

    def sigma(self, magnitude):
        """Per-axis standard deviation; the TVE limit sits at three sigma of the radial error."""
        return self.tve_limit * np.abs(magnitude) / (3.0 * np.sqrt(2.0))


@dataclass(frozen=True)
class ErrorModelConfig:
    mode: str = 'gaussian_tve_only'
    gmm: GmmSpec = field(default_factory=GmmSpec)
    tve: TveSpec = field(default_factory=TveSpec)
    meter_noise_pct: float = 10.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Error model mode must be one of {MODES}, got {self.mode!r}")
        if self.meter_noise_pct < 0:
            raise ValueError("meter_noise_pct must be nonnegative")

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> 'ErrorModelConfig':
        data = data or {}
        return cls(data.get('mode', 'gaussian_tve_only'), GmmSpec.from_dict(data.get('gmm')),
                   TveSpec(float(data.get('tve_limit', 0.01))), float(data.get('meter_noise_pct', 10.0)))

    def with_mode(self, mode: str) -> 'ErrorModelConfig':
        return ErrorModelConfig(mode, self.gmm, self.tve, self.meter_noise_pct)

    def to_dict(self) -> dict:
        return {'mode': self.mode, 'tve_limit': self.tve.tve_limit, 'meter_noise_pct': self.meter_noise_pct,
                'gmm': self.gmm.to_dict()}


class MeasurementNoise:

    @classmethod
    def sample_gmm_errors(cls, spec: GmmSpec, channel_kind: str, rng: np.random.Generator,
                          size: int = 1) -> np.ndarray:
        """
        Draw channel errors from the mixture: pick a component by weight, draw its Gaussian, and redraw anything
        outside the hard bound of the channel kind.
        """
        if channel_kind not in CHANNEL_KINDS:
            raise ValueError(f"Unknown channel kind '{channel_kind}'")
        comps = np.array(spec.components[channel_kind], dtype=float)
        bound = spec.bounds[channel_kind]
        out = np.empty(size)
        pending = np.arange(size)
        for _ in range(1000):
            if len(pending) == 0:
                break
            which = rng.choice(3, size=len(pending), p=comps[:, 0] / comps[:, 0].sum())
            draws = comps[which, 1] + comps[which, 2] * rng.standard_normal(len(pending))
            ok = np.abs(draws) <= bound
            out[pending[ok]] = draws[ok]
            pending = pending[~ok]
        if len(pending):
            raise RuntimeError(f"GMM for '{channel_kind}' keeps drawing outside its bound of {bound}")
        return out

    @classmethod
    def sample_gmm_channel_error(cls, spec: GmmSpec, channel_kind: str, rng: np.random.Generator) -> float:
        return float(cls.sample_gmm_errors(spec, channel_kind, rng, 1)[0])

    @classmethod
    def apply_gaussian_tve(cls, values, spec: TveSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """
        Add independent Gaussian noise to the real and imaginary parts of complex phasors.
        :param values: complex scalar or array
        :return: (noisy values, mask of zero-magnitude phasors that were left unchanged)
        """
        x = np.atleast_1d(np.asarray(values, dtype=complex))
        zero = np.abs(x) == 0
        sigma = spec.sigma(x)
        noisy = x + sigma * rng.standard_normal(x.shape) + 1j * sigma * rng.standard_normal(x.shape)
        noisy[zero] = x[zero]
        return noisy, zero

    @classmethod
    def apply_two_level_error(cls, values, kinds: Sequence[str], cfg: ErrorModelConfig,
                              rng: np.random.Generator) -> np.ndarray:
        """
        Corrupt a vector of true phasors.
        :param values: complex array of phasors
        :param kinds: 'v' or 'i' per phasor
        :param cfg: ErrorModelConfig; mode none returns the input, gaussian_tve_only applies the TVE stage only,
                    two_level applies the mixture channel error and then the TVE stage
        :param rng: numpy Generator owned by the caller
        :return: noisy complex array
        """
        x = np.asarray(values, dtype=complex)
        if cfg.mode == 'none':
            return x
        if len(kinds) != len(x):
            raise ValueError(f"Got {len(kinds)} channel kinds for {len(x)} phasors")
        if cfg.mode == 'two_level':
            kinds = np.asarray(kinds)
            mag_err = np.zeros(len(x))
            ang_err = np.zeros(len(x))
            for prefix in ('v', 'i'):
                sel = np.flatnonzero(kinds == prefix)
                if len(sel):
                    mag_err[sel] = cls.sample_gmm_errors(cfg.gmm, f"{prefix}mag", rng, len(sel))
                    ang_err[sel] = cls.sample_gmm_errors(cfg.gmm, f"{prefix}ang", rng, len(sel))
            x = x * (1.0 + mag_err) * np.exp(1j * np.radians(ang_err))
        noisy, zero = cls.apply_gaussian_tve(x, cfg.tve, rng)
        if zero.any():
            logging.debug(f"{int(zero.sum())} zero-magnitude channels left without TVE noise")
        return noisy

    @classmethod
    def perturb_smart_meter(cls, readings, pct: float, rng: np.random.Generator) -> np.ndarray:
        """
        Multiply energies by (1 + e), e ~ N(0, (pct/300)^2) truncated at +-pct/100, so the truncation sits at three
        sigma.
        """
        if pct < 0:
            raise ValueError("pct must be nonnegative")
        x = np.asarray(readings, dtype=float)
        if pct == 0:
            return x.copy()
        sigma, bound = pct / 300.0, pct / 100.0
        err = sigma * rng.standard_normal(x.shape)
        outside = np.abs(err) > bound
        while outside.any():
            err[outside] = sigma * rng.standard_normal(int(outside.sum()))
            outside = np.abs(err) > bound
        return x * (1.0 + err)

    @classmethod
    def tve(cls, noisy, truth) -> np.ndarray:
        truth = np.asarray(truth, dtype=complex)
        return np.abs(np.asarray(noisy, dtype=complex) - truth) / np.abs(truth)
