"""SAR speckle simulation and the noise-injection policy used during pretraining.

All images are intensity-domain float32 arrays.  Samplers draw in float64 and
cast the result, so the statistics tests are not limited by float32 rounding
of the random variates themselves.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EstimatorError, ParameterError
from .rng import RandomSource


class NoiseFamily(str, enum.Enum):
    GAMMA = "gamma"
    RAYLEIGH = "rayleigh"
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


FAMILIES = tuple(NoiseFamily)
ADDITIVE = frozenset({NoiseFamily.GAUSSIAN, NoiseFamily.UNIFORM})


def _as_intensity(x, what: str = "image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{what} contains non-finite pixels")
    if np.any(arr < 0):
        raise ParameterError(f"{what} contains negative intensities")
    return arr


def _positive_int(value, name: str) -> int:
    if int(value) != value or value <= 0:
        raise ParameterError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


# -- Gamma variates -----------------------------------------------------------

def standard_gamma(shape: float, size, rng: RandomSource) -> np.ndarray:
    """Gamma(shape, 1) variates by the Marsaglia-Tsang squeeze method.

    Shapes below one use the boost ``G(a) = G(a + 1) * U**(1/a)``.
    """
    if shape <= 0:
        raise ParameterError(f"gamma shape must be positive, got {shape}")
    size = tuple(np.atleast_1d(size)) if size is not None else ()
    n = int(np.prod(size)) if size else 1
    a = shape + 1.0 if shape < 1.0 else float(shape)
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n, dtype=np.float64)
    todo = np.arange(n)
    while todo.size:
        m = todo.size
        x = rng.normal(m)
        v = 1.0 + c * x
        u = rng.random(m)
        ok = v > 0
        v3 = np.where(ok, v * v * v, 1.0)
        x2 = x * x
        squeeze = u < 1.0 - 0.0331 * x2 * x2
        with np.errstate(divide="ignore"):
            full = np.log(u) < 0.5 * x2 + d * (1.0 - v3 + np.log(v3))
        accept = ok & (squeeze | full)
        out[todo[accept]] = d * v3[accept]
        todo = todo[~accept]
    if shape < 1.0:
        out *= rng.random(n) ** (1.0 / shape)
    return out.reshape(size) if size else out[0]


def gamma_pdf(z: float, mean: float, looks: int) -> float:
    """Density of L-look intensity with mean ``mean`` evaluated at ``z``."""
    if mean <= 0:
        raise ParameterError(f"mean intensity must be positive, got {mean}")
    looks = _positive_int(looks, "L")
    if z < 0:
        raise ParameterError(f"intensity must be nonnegative, got {z}")
    if z == 0:
        return 1.0 / mean if looks == 1 else 0.0
    logp = (
        looks * math.log(looks)
        - math.lgamma(looks)
        - looks * math.log(mean)
        + (looks - 1) * math.log(z)
        - looks * z / mean
    )
    return math.exp(logp)


# -- speckle formation and injection -----------------------------------------

def simulate_multilook(truth, looks: int, rng: RandomSource) -> np.ndarray:
    """Average of ``looks`` independent exponential single-look intensities per pixel."""
    looks = _positive_int(looks, "L")
    mean = _as_intensity(truth, "truth").astype(np.float64)
    acc = np.zeros(mean.shape, dtype=np.float64)
    for _ in range(looks):
        acc += -np.log1p(-rng.random(mean.shape))
    return (mean * acc / looks).astype(np.float32)


def sample_gamma_speckle(x, looks: int, rng: RandomSource) -> np.ndarray:
    """x' ~ Gamma(shape=L_syn, scale=x/L_syn); keeps the per-pixel mean."""
    looks = _positive_int(looks, "L_syn")
    arr = _as_intensity(x).astype(np.float64)
    g = standard_gamma(float(looks), arr.shape, rng)
    return (arr * g / looks).astype(np.float32)


def sample_rayleigh_speckle(x, sigma: float, rng: RandomSource) -> np.ndarray:
    """Multiply every pixel by an independent Rayleigh(sigma) factor."""
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    arr = _as_intensity(x).astype(np.float64)
    factor = sigma * np.sqrt(-2.0 * np.log1p(-rng.random(arr.shape)))
    return (arr * factor).astype(np.float32)


def sample_gaussian_noise(x, sigma: float, rng: RandomSource) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    arr = np.asarray(x, dtype=np.float32)
    if sigma == 0:
        return arr.copy()
    return (arr.astype(np.float64) + sigma * rng.normal(arr.shape)).astype(np.float32)


def sample_uniform_noise(x, alpha: float, rng: RandomSource) -> np.ndarray:
    if alpha < 0:
        raise ParameterError(f"alpha must be nonnegative, got {alpha}")
    arr = np.asarray(x, dtype=np.float32)
    if alpha == 0:
        return arr.copy()
    return (arr.astype(np.float64) + rng.uniform(-alpha, alpha, arr.shape)).astype(np.float32)


# -- augmentation policy ------------------------------------------------------

@dataclass(frozen=True)
class NoisePolicy:
    apply_probability: float = 0.5
    family_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    lsyn_choices: tuple[int, ...] = (1, 2, 3, 4)
    sigma_range: tuple[float, float] = (0.0, 0.5)
    alpha_range: tuple[float, float] = (0.0, 0.5)
    clip_to_unit: bool = True

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ParameterError("apply_probability must lie in [0, 1]")
        w = np.asarray(self.family_weights, dtype=np.float64)
        if w.shape != (len(FAMILIES),) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ParameterError(f"family weights must be 4 nonnegative values summing to 1, got {self.family_weights}")
        if not self.lsyn_choices or any(int(k) != k or k <= 0 for k in self.lsyn_choices):
            raise ParameterError("L_syn choices must be positive integers")
        for name in ("sigma_range", "alpha_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi:
                raise ParameterError(f"{name} must be an ordered nonnegative interval")


@dataclass
class AugmentationRecord:
    applied: bool
    family: NoiseFamily | None = None
    parameters: dict = field(default_factory=dict)
    clipped: bool = False
    rng_seed_state: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value if self.family is not None else None
        return d


def apply_family(x, family: NoiseFamily, params: dict, rng: RandomSource) -> np.ndarray:
    family = NoiseFamily(family)
    if family is NoiseFamily.GAMMA:
        return sample_gamma_speckle(x, params["L_syn"], rng)
    if family is NoiseFamily.RAYLEIGH:
        return sample_rayleigh_speckle(x, params["sigma"], rng)
    if family is NoiseFamily.GAUSSIAN:
        return sample_gaussian_noise(x, params["sigma"], rng)
    return sample_uniform_noise(x, params["alpha"], rng)


def augment(x, policy: NoisePolicy, rng: RandomSource) -> tuple[np.ndarray, AugmentationRecord]:
    """Corrupt ``x`` with one randomly chosen noise family, or leave it untouched.

    Draw order per call: apply coin, family, hyperparameter, pixel noise.
    Additive families are clipped to [0, 1] when the policy says so.
    """
    token = rng.state_token()
    if rng.random() >= policy.apply_probability:
        return np.asarray(x, dtype=np.float32), AugmentationRecord(False, rng_seed_state=token)
    family = FAMILIES[int(rng.gen.choice(len(FAMILIES), p=policy.family_weights))]
    if family is NoiseFamily.GAMMA:
        params = {"L_syn": int(policy.lsyn_choices[int(rng.integers(len(policy.lsyn_choices)))])}
    elif family is NoiseFamily.UNIFORM:
        params = {"alpha": float(rng.uniform(*policy.alpha_range))}
    else:
        params = {"sigma": float(rng.uniform(*policy.sigma_range))}
    out = apply_family(x, family, params, rng)
    clipped = policy.clip_to_unit and family in ADDITIVE
    if clipped:
        out = np.clip(out, 0.0, 1.0)
    return out, AugmentationRecord(True, family, params, clipped, token)


# -- estimators -------------------------------------------------------------

def estimate_enl(region) -> float:
    """Equivalent number of looks, mean**2 / variance."""
    arr = np.asarray(region, dtype=np.float64).reshape(-1)
    var = arr.var()
    if not var > 0:
        raise EstimatorError("ENL undefined for a region with zero variance")
    return float(arr.mean() ** 2 / var)
