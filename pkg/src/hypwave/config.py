"""Experiment configuration: a sectioned key/value file parsed into dataclasses."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, asdict

import numpy as np


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(x) for x in s.replace(";", ",").split(",") if x.strip())


def _pairs(s):
    out = []
    for item in s.split(";"):
        item = item.strip()
        if not item:
            continue
        a, b = item.split(":")
        out.append((float(a), float(b)))
    return tuple(out)


@dataclass(frozen=True)
class StateConfig:
    kind: str = "monochromatic"
    speed: float = 1.0
    sigma_half_length: float = 1.2
    profile: tuple = ((-0.12, 1.7, 0.4), (-0.05, 2.9, float(np.pi / 2)))
    collar: float = 0.95
    phase: str = "sheared"
    coeffs: tuple = (1.6, 0.3, 0.35, -0.2)
    chart_radius: float = 0.45
    radial_center: tuple = (0.25, 0.1)
    radial_slope: float = 1.0
    radial_band: tuple = (0.7, 1.3)


@dataclass(frozen=True)
class SupportConfig:
    center_s: float = 0.1
    center: tuple = (0.05, 0.02)
    radius: float = 0.85
    height: float = 1.0


@dataclass(frozen=True)
class ObservationConfig:
    x0: tuple = ((-0.293, 0.450),)
    random_count: int = 0


@dataclass(frozen=True)
class PropagationConfig:
    t_list: tuple = (6.0, 8.0, 10.0, 12.0)
    tol: float = 1e-9
    ds_target: float = 0.2
    t0_grid_max: float = 4.0
    t0_grid_step: float = 0.25
    n_rays: int = 4096


@dataclass(frozen=True)
class LocalLimitConfig:
    h_list: tuple = (1e-3,)
    alpha: float = 0.75
    dir_tol: float = 1e-6
    n_samples: int = 10_000
    points: tuple = ((0.0, 0.0),)
    moment_h: float = 1e-12


@dataclass(frozen=True)
class TestsConfig:
    independence_n_max: int = 12
    independence_tol: float = 1e-2
    weyl_n_max: int = 12
    covariance_lags: tuple = (0.5, 1.0, 1.7, 2.6, 3.5)
    covariance_samples: int = 20_000
    equidist_factor: float = 2.0
    rwm_waves: int = 4096
    rwm_samples: int = 200_000
    rwm_radii: tuple = (0.3, 0.7, 1.0, 1.4, 1.9, 2.4, 2.9, 3.3, 3.8, 4.2)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    outdir: str = "runs/out"
    threads: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    state: StateConfig = field(default_factory=StateConfig)
    support: SupportConfig = field(default_factory=SupportConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    local_limit: LocalLimitConfig = field(default_factory=LocalLimitConfig)
    tests: TestsConfig = field(default_factory=TestsConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        ll = self.local_limit
        if not (0.5 < ll.alpha < 1.0):
            raise ConfigError("alpha must lie in (1/2, 1)")
        if any(h <= 0 or h >= 1 for h in ll.h_list):
            raise ConfigError("h values must lie in (0, 1)")
        if ll.n_samples <= 0 or self.propagation.n_rays <= 0:
            raise ConfigError("counts must be positive")
        if self.state.kind not in ("monochromatic", "polychromatic"):
            raise ConfigError(f"unknown state kind {self.state.kind!r}")
        if self.state.kind == "monochromatic":
            if self.state.speed <= 0:
                raise ConfigError("speed must be positive")
            if self.state.collar < self.support.radius:
                raise ConfigError("collar must cover the amplitude support")
        if self.state.kind == "polychromatic" and self.state.phase == "radial":
            lo, hi = self.state.radial_band
            if not (0 < lo < hi):
                raise ConfigError("radial band needs 0 < lo < hi")
        if not self.propagation.t_list:
            raise ConfigError("need at least one transport time")
        if self.run.threads < 1:
            raise ConfigError("threads must be at least 1")
        return self

    def echo(self) -> dict:
        """Reproducibility echo for the manifest. Excludes the output
        location and worker count, which must not affect artifact bytes."""
        d = asdict(self)
        d["run"] = {"seed": self.run.seed}
        return d


def parse_config(path: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        cp.read_file(fh)

    def get(section, key, default, conv=str):
        if cp.has_option(section, key):
            return conv(cp.get(section, key))
        return default

    def profile_terms(s):
        terms = []
        for item in s.split(","):
            item = item.strip()
            if not item:
                continue
            a, f, p = item.split(":")
            terms.append((float(a), float(f), float(p)))
        return tuple(terms)

    sd = StateConfig()
    state = StateConfig(
        kind=get("state", "kind", sd.kind),
        speed=get("state", "speed", sd.speed, float),
        sigma_half_length=get("state", "sigma_half_length", sd.sigma_half_length, float),
        profile=get("state", "profile", sd.profile, profile_terms),
        collar=get("state", "collar", sd.collar, float),
        phase=get("state", "phase", sd.phase),
        coeffs=get("state", "coeffs", sd.coeffs, _floats),
        chart_radius=get("state", "chart_radius", sd.chart_radius, float),
        radial_center=get("state", "radial_center", sd.radial_center,
                          lambda s: _pairs(s)[0]),
        radial_slope=get("state", "radial_slope", sd.radial_slope, float),
        radial_band=get("state", "radial_band", sd.radial_band, _floats),
    )
    pd = SupportConfig()
    support = SupportConfig(
        center_s=get("support", "center_s", pd.center_s, float),
        center=get("support", "center", pd.center, lambda s: _pairs(s)[0]),
        radius=get("support", "radius", pd.radius, float),
        height=get("support", "height", pd.height, float),
    )
    od = ObservationConfig()
    xs = get("observation", "x0", None)
    if xs is None:
        observation = od
    elif xs.strip().startswith("random:"):
        observation = ObservationConfig(x0=(), random_count=int(xs.split(":")[1]))
    else:
        observation = ObservationConfig(x0=_pairs(xs))
    gd = PropagationConfig()
    propagation = PropagationConfig(
        t_list=get("propagation", "t_list", gd.t_list, _floats),
        tol=get("propagation", "tol", gd.tol, float),
        ds_target=get("propagation", "ds_target", gd.ds_target, float),
        t0_grid_max=get("propagation", "t0_grid_max", gd.t0_grid_max, float),
        t0_grid_step=get("propagation", "t0_grid_step", gd.t0_grid_step, float),
        n_rays=get("propagation", "n_rays", gd.n_rays, int),
    )
    ld = LocalLimitConfig()
    local_limit = LocalLimitConfig(
        h_list=get("local_limit", "h_list", ld.h_list, _floats),
        alpha=get("local_limit", "alpha", ld.alpha, float),
        dir_tol=get("local_limit", "dir_tol", ld.dir_tol, float),
        n_samples=get("local_limit", "n_samples", ld.n_samples, int),
        points=get("local_limit", "points", ld.points, _pairs),
        moment_h=get("local_limit", "moment_h", ld.moment_h, float),
    )
    td = TestsConfig()
    tests = TestsConfig(
        independence_n_max=get("tests", "independence_n_max", td.independence_n_max, int),
        independence_tol=get("tests", "independence_tol", td.independence_tol, float),
        weyl_n_max=get("tests", "weyl_n_max", td.weyl_n_max, int),
        covariance_lags=get("tests", "covariance_lags", td.covariance_lags, _floats),
        covariance_samples=get("tests", "covariance_samples", td.covariance_samples, int),
        equidist_factor=get("tests", "equidist_factor", td.equidist_factor, float),
        rwm_waves=get("tests", "rwm_waves", td.rwm_waves, int),
        rwm_samples=get("tests", "rwm_samples", td.rwm_samples, int),
        rwm_radii=get("tests", "rwm_radii", td.rwm_radii, _floats),
    )
    rd = RunConfig()
    run = RunConfig(
        seed=get("run", "seed", rd.seed, int),
        outdir=get("run", "outdir", rd.outdir),
        threads=get("run", "threads", rd.threads, int),
    )
    return ExperimentConfig(state, support, observation, propagation,
                            local_limit, tests, run).validate()


def build_state(cfg: ExperimentConfig):
    """Construct the configured state object."""
    from hypwave.states import (
        BumpAmplitude,
        ChartPolynomialPhase,
        GeodesicArc,
        HypersurfaceData,
        MonochromaticState,
        PolychromaticState,
        RadialPhase,
        TrigProfile,
    )

    if cfg.state.kind == "monochromatic":
        arc = GeodesicArc(half_length=cfg.state.sigma_half_length)
        data = HypersurfaceData(arc, TrigProfile(cfg.state.profile))
        center = complex(np.tanh(cfg.support.center_s / 2.0))
        amp = BumpAmplitude(center, cfg.support.radius, cfg.support.height)
        return MonochromaticState(data, amp, cfg.state.speed, cfg.state.collar)
    if cfg.state.phase == "sheared":
        phase = ChartPolynomialPhase(cfg.state.coeffs, cfg.state.chart_radius)
    elif cfg.state.phase == "radial":
        phase = RadialPhase(complex(*cfg.state.radial_center), cfg.state.radial_slope,
                            cfg.state.radial_band[0], cfg.state.radial_band[1])
    else:
        raise ConfigError(f"unknown chart phase {cfg.state.phase!r}")
    amp = BumpAmplitude(complex(*cfg.support.center), cfg.support.radius,
                        cfg.support.height)
    return PolychromaticState(phase, amp)
