"""Virtual patient, basal-bolus controller and scenario generator.

The patient is a Bergman minimal model extended with a two-compartment gut
and a two-compartment subcutaneous insulin chain, integrated with explicit
Euler at one-minute substeps (five per APS step).

``G_b`` is the glucose level the model relaxes to without pump insulin above
``I_b``; the profile basal rate holds the patient at ``target_bg``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    STEP_MINUTES,
    DataError,
    IntegrationError,
    InvalidInputError,
    Trace,
    clamp_cgm,
)

DIA_MINUTES = 240.0
# <5% of a dose remains on board after the duration of insulin action
IOB_TAU = DIA_MINUTES / math.log(20.0)
EATING_RATE = 5.0  # g/min
DEFAULT_INITIALS = (80.0, 100.0, 120.0, 140.0, 160.0, 180.0)
DEFAULT_SIMS_PER_INITIAL = 75
DEFAULT_HORIZON = 145
RESCUE_LOW, RESCUE_HIGH = 60.0, 100.0  # g of rescue carbs in rebound scenarios
DEFAULT_CGM_SIGMA = 11.0
DAY_SECONDS = 86400.0
EPOCH_2020 = 1577836800.0


@dataclass(frozen=True)
class OdeParams:
    p1: float = 0.012  # 1/min, glucose effectiveness
    p2: float = 0.025  # 1/min, remote insulin decay
    p3: float = 1.5e-5  # (mL/uU)/min^2
    n_clear: float = 0.1  # 1/min
    k_abs: float = 0.03  # 1/min
    k_sc: float = 0.025  # 1/min
    f_bio: float = 0.9
    V_g: float = 120.0  # dL
    V_i: float = 12000.0  # mL
    G_b: float = 230.0  # mg/dL
    I_b: float = 10.0  # uU/mL

    def __post_init__(self):
        for name in ("p1", "p2", "p3", "n_clear", "k_abs", "k_sc", "V_g", "V_i", "G_b"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"ODE parameter {name} must be > 0")
        if not 0 < self.f_bio <= 1:
            raise InvalidInputError("f_bio must lie in (0, 1]")
        if self.I_b < 0:
            raise InvalidInputError("I_b must be >= 0")


@dataclass(frozen=True)
class PatientProfile:
    basal_rate: float  # U/hr
    carb_ratio: float  # g/U
    correction_factor: float  # mg/dL per U
    target_bg: float
    ode: OdeParams = field(default_factory=OdeParams)
    name: str = "reference"

    def __post_init__(self):
        for name in ("basal_rate", "carb_ratio", "correction_factor", "target_bg"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"profile {name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatientProfile":
        d = dict(d)
        d["ode"] = OdeParams(**d["ode"])
        return cls(**d)


def profile_from_params(ode: OdeParams, target_bg: float = 120.0, name: str = "reference") -> PatientProfile:
    """Derive basal rate, carb ratio and correction factor from the ODE parameters.

    The basal rate is the (0.05 U/hr rounded) infusion that holds glucose at
    ``target_bg``. The correction factor is the integrated glucose lowering of
    one unit at target, and the carb ratio balances that against the glucose
    appearance of one gram of carbohydrate.
    """
    x_ss = ode.p1 * (ode.G_b / target_bg - 1.0)
    d_insulin = x_ss * ode.p2 / ode.p3
    basal = d_insulin * ode.V_i * ode.n_clear / 1e6 * 60.0
    basal = max(0.05, round(basal / 0.05) * 0.05)
    cf = target_bg * (ode.p3 / ode.p2) * 1e6 / (ode.V_i * ode.n_clear)
    cr = cf / (ode.f_bio * 1000.0 / ode.V_g)
    return PatientProfile(
        basal_rate=round(basal, 2),
        carb_ratio=round(cr * 2) / 2,
        correction_factor=float(round(cf)),
        target_bg=target_bg,
        ode=ode,
        name=name,
    )


def reference_profile() -> PatientProfile:
    return profile_from_params(OdeParams())


def make_profiles(count: int, seed: int, spread: float = 0.2) -> list[PatientProfile]:
    """Draw ``count`` virtual adults by scaling the reference parameters by U[1-spread, 1+spread]."""
    if count < 1:
        raise InvalidInputError("need at least one profile")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A71E]))
    ref = asdict(OdeParams())
    scaled_keys = [k for k in ref if k != "I_b"]
    profiles = []
    for i in range(count):
        factors = rng.uniform(1.0 - spread, 1.0 + spread, size=len(scaled_keys))
        params = dict(ref)
        for k, f in zip(scaled_keys, factors):
            params[k] = ref[k] * float(f)
        params["f_bio"] = min(params["f_bio"], 1.0)
        profiles.append(profile_from_params(OdeParams(**params), name=f"adult{i + 1:03d}"))
    return profiles


@dataclass(frozen=True)
class PatientState:
    G: float
    X: float
    I: float
    q1: float = 0.0
    q2: float = 0.0
    s1: float = 0.0
    s2: float = 0.0
    iob: float = 0.0

    def as_tuple(self):
        return (self.G, self.X, self.I, self.q1, self.q2, self.s1, self.s2, self.iob)


_STATE_NAMES = ("G", "X", "I", "q1", "q2", "s1", "s2", "iob")
_IOB_DECAY_1MIN = math.exp(-1.0 / IOB_TAU)


def _euler_minute(s, ode: OdeParams, insulin_in: float, carbs_in: float):
    G, X, I, q1, q2, s1, s2, iob = s
    dG = -ode.p1 * (G - ode.G_b) - X * G + ode.f_bio * ode.k_abs * q2 * (1000.0 / ode.V_g)
    dX = -ode.p2 * X + ode.p3 * (I - ode.I_b)
    dI = -ode.n_clear * (I - ode.I_b) + ode.k_sc * s2 * 1e6 / ode.V_i
    dq1 = carbs_in - ode.k_abs * q1
    dq2 = ode.k_abs * (q1 - q2)
    ds1 = insulin_in - ode.k_sc * s1
    ds2 = ode.k_sc * (s1 - s2)
    out = (
        G + dG,
        X + dX,
        I + dI,
        max(0.0, q1 + dq1),
        max(0.0, q2 + dq2),
        max(0.0, s1 + ds1),
        max(0.0, s2 + ds2),
        max(0.0, iob * _IOB_DECAY_1MIN + insulin_in),
    )
    for name, v in zip(_STATE_NAMES, out):
        if not math.isfinite(v):
            raise IntegrationError(f"state variable {name} diverged ({v!r})")
    if out[0] <= 0:
        raise IntegrationError(f"state variable G left the positive domain ({out[0]!r})")
    return out


def step_patient(
    state: PatientState,
    profile: PatientProfile,
    basal: float,
    bolus: float,
    carbs_in: float,
    dt: int = 1,
) -> PatientState:
    """Advance the patient by one Euler minute.

    ``basal`` is a rate in U/hr, ``bolus`` units delivered during this minute
    and ``carbs_in`` grams entering the gut during this minute.

    Glucose appearance is scaled by 1000/V_g (g to mg, per dL of distribution
    volume) so that ``G`` stays in mg/dL.
    """
    if dt != 1:
        raise InvalidInputError("step_patient integrates exactly one minute (dt=1)")
    if basal < 0 or bolus < 0 or carbs_in < 0:
        raise InvalidInputError("insulin and carb inputs must be >= 0")
    out = _euler_minute(state.as_tuple(), profile.ode, basal / 60.0 + bolus, carbs_in)
    return PatientState(*out)


def basal_steady_state(profile: PatientProfile, G: Optional[float] = None) -> PatientState:
    """Insulin compartments at their fixed point under the profile basal, glucose at ``G``."""
    ode = profile.ode
    b = profile.basal_rate / 60.0
    s = b / ode.k_sc
    I = ode.I_b + ode.k_sc * s * 1e6 / (ode.V_i * ode.n_clear)
    X = ode.p3 * (I - ode.I_b) / ode.p2
    if G is None:
        G = ode.p1 * ode.G_b / (ode.p1 + X)
    iob = b / (1.0 - _IOB_DECAY_1MIN)
    return PatientState(G=float(G), X=X, I=I, s1=s, s2=s, iob=iob)


@dataclass(frozen=True)
class Meal:
    time_step: int
    grams: float
    bolused: bool = True
    announced_grams: Optional[float] = None  # carbs entered into the bolus calculator, if not what was eaten

    @property
    def bolus_grams(self) -> float:
        return self.grams if self.announced_grams is None else self.announced_grams


@dataclass(frozen=True)
class Rescue:
    """Unbolused carbs eaten at the first CGM reading below ``threshold`` after ``after_step``."""

    grams: float
    threshold: float = 70.0
    after_step: int = 0


@dataclass(frozen=True)
class Scenario:
    """One 12-hour closed-loop run with a single announced meal after the first hour.

    ``rescue`` optionally adds a reactive, unbolused hypoglycemia treatment,
    which is how rebound scenarios are produced.
    """

    initial_bg: float
    meal: Meal
    rng_seed: int
    horizon_steps: int = DEFAULT_HORIZON
    rescue: Optional[Rescue] = None

    def __post_init__(self):
        if not 12 < self.meal.time_step < self.horizon_steps:
            raise InvalidInputError(
                f"meal step must satisfy 12 < step < {self.horizon_steps}, got {self.meal.time_step}"
            )
        if not 30 <= self.meal.grams <= 100:
            raise InvalidInputError(f"meal size must be within 30..100 g, got {self.meal.grams}")
        if self.rescue is not None and not self.rescue.grams > 0:
            raise InvalidInputError("rescue carbs must be > 0 g")
        if not self.initial_bg > 0:
            raise InvalidInputError("initial_bg must be > 0")


def random_scenario(rng: np.random.Generator, initial_bg: float, horizon_steps: int = DEFAULT_HORIZON) -> Scenario:
    # meals land between the end of the first hour and two hours before the end
    last = max(13, horizon_steps - 25)
    step = int(rng.integers(13, last + 1))
    grams = float(np.round(rng.uniform(30.0, 100.0), 1))
    return Scenario(
        initial_bg=initial_bg,
        meal=Meal(step, grams),
        rng_seed=int(rng.integers(0, 2**31 - 1)),
        horizon_steps=horizon_steps,
    )


def rebound_scenario(seed: int, horizon_steps: int = DEFAULT_HORIZON) -> Scenario:
    """An over-bolused meal, a low, and an over-treated low: the usual path to a rebound high.

    The meal bolus is computed for more carbs than are eaten; when CGM first
    reads below 70 the patient eats a generous unbolused rescue.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EB0]))
    eaten = float(np.round(rng.uniform(30.0, 45.0), 1))
    meal = Meal(int(rng.integers(13, 25)), eaten, announced_grams=float(np.round(eaten + rng.uniform(40.0, 60.0), 1)))
    return Scenario(
        initial_bg=float(np.round(rng.uniform(100.0, 140.0), 1)),
        meal=meal,
        rng_seed=int(rng.integers(0, 2**31 - 1)),
        horizon_steps=horizon_steps,
        rescue=Rescue(float(np.round(rng.uniform(RESCUE_LOW, RESCUE_HIGH), 1)), after_step=meal.time_step),
    )


def run_closed_loop(
    profile: PatientProfile,
    scenario: Scenario,
    cgm_sigma: float = DEFAULT_CGM_SIGMA,
    start_epoch: float = EPOCH_2020,
) -> Trace:
    """Simulate the pump, controller and CGM for ``scenario.horizon_steps`` APS steps.

    The controller delivers the profile basal every step and, at a bolused
    carb entry, carbs/carb_ratio plus a correction above target. Carbs are
    eaten at 5 g/min; the trace records the whole entry at its step.
    """
    if not cgm_sigma >= 0:
        raise InvalidInputError("cgm_sigma must be >= 0")
    rng = np.random.default_rng(scenario.rng_seed)
    ode = profile.ode
    n = scenario.horizon_steps
    s = basal_steady_state(profile, scenario.initial_bg).as_tuple()
    meal = scenario.meal
    rescue = scenario.rescue
    rescued = False

    bg = np.empty(n)
    true_bg = np.empty(n)
    bolus = np.zeros(n)
    carbs = np.zeros(n)
    iob = np.empty(n)
    stomach = 0.0
    basal_per_min = profile.basal_rate / 60.0
    for k in range(n):
        G = s[0]
        true_bg[k] = G
        cgm = float(clamp_cgm(G + rng.normal(0.0, cgm_sigma)))
        bg[k] = cgm
        if k == meal.time_step:
            carbs[k] += meal.grams
            stomach += meal.grams
            if meal.bolused:
                dose = meal.bolus_grams / profile.carb_ratio + max(0.0, cgm - profile.target_bg) / profile.correction_factor
                bolus[k] = round(dose, 2)
        if rescue is not None and not rescued and k > rescue.after_step and cgm < rescue.threshold:
            rescued = True
            carbs[k] += rescue.grams
            stomach += rescue.grams
        for minute in range(STEP_MINUTES):
            eat = min(stomach, EATING_RATE)
            stomach -= eat
            ins = basal_per_min + (bolus[k] if minute == 0 else 0.0)
            s = _euler_minute(s, ode, ins, eat)
        iob[k] = s[7]

    return Trace(
        patient_id=profile.name,
        start_epoch=start_epoch,
        bg=bg,
        basal=np.full(n, profile.basal_rate),
        bolus=bolus,
        iob=iob,
        carbs=carbs,
        true_bg=true_bg,
    )


def generate_dataset(
    profiles: Sequence[PatientProfile],
    sims_per_initial: int = DEFAULT_SIMS_PER_INITIAL,
    initials: Sequence[float] = DEFAULT_INITIALS,
    seed: int = 0,
    cgm_sigma: float = DEFAULT_CGM_SIGMA,
    horizon_steps: int = DEFAULT_HORIZON,
) -> list[Trace]:
    """One trace per (profile, initial BG, replicate).

    Traces of a patient are ordered replicate-major (every initial value once
    per replicate) and start one day apart, so a chronological cut keeps all
    initial values on both sides and no two runs are contiguous in time.
    """
    if not len(initials):
        raise InvalidInputError("initials must be non-empty")
    if sims_per_initial < 1:
        raise InvalidInputError("sims_per_initial must be >= 1")
    traces = []
    for p_idx, profile in enumerate(profiles):
        day = 0
        for rep in range(sims_per_initial):
            for i_idx, initial in enumerate(initials):
                rng = np.random.default_rng(np.random.SeedSequence([seed, p_idx, i_idx, rep]))
                scen = random_scenario(rng, float(initial), horizon_steps)
                traces.append(run_closed_loop(profile, scen, cgm_sigma, EPOCH_2020 + day * DAY_SECONDS))
                day += 1
    return traces


def cgm_noise_floor(traces) -> float:
    """RMSE between the CGM channel and true glucose, pooled over one or more traces."""
    if isinstance(traces, Trace):
        traces = [traces]
    diffs = []
    for t in traces:
        if t.true_bg is None:
            raise DataError("cgm_noise_floor needs true glucose, which clinical traces do not carry")
        diffs.append(t.bg - t.true_bg)
    d = np.concatenate(diffs)
    return float(np.sqrt(np.mean(d * d)))


def with_profile(profile: PatientProfile, **changes) -> PatientProfile:
    return replace(profile, **changes)
