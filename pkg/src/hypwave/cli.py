"""Config-driven experiment runner with reproducible seeds and file outputs.

Subcommands share one configuration file; `all` chains every stage. Outputs
are a manifest (config echo, version, seeds, stage status), JSON/CSV branch
tables, local wave models, test reports, and plot-ready CSV columns. Two
runs with the same config and seed produce byte-identical artifacts,
independent of the worker count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import hypwave
from hypwave.config import ExperimentConfig, build_state, parse_config
from hypwave.disk import DiskPoint, in_fundamental_domain, VERTEX_RADIUS
from hypwave.randomwaves import PlaneWaveEnsemble, SpectralMeasure, covariance, sample_isotropic
from hypwave.states import MonochromaticState, energy_measure
from hypwave.stats import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    TestReport,
    gaussianity_moments,
    mass_conservation,
    rational_independence,
    weak_convergence_distance,
    weyl_equidistribution,
)
from hypwave.wkb import (
    BRANCH_CSV_HEADER,
    T0Estimate,
    branch_table_csv_rows,
    branch_table_to_dict,
    detect_T0,
    find_branches,
    group_branches,
    local_model_to_dict,
    sample_local_limit,
)

SUBCOMMANDS = ("propagate", "local-limit", "rwm-sample", "equidist",
               "eikonal-check", "independence", "all")


@dataclass
class RunArtifact:
    outdir: Path
    manifest: dict
    reports: list

    @property
    def all_passed(self) -> bool:
        return all(r.verdict == PASS for r in self.reports
                   if r.verdict != INCONCLUSIVE)


def _seed_for(master: int, tag: str) -> int:
    return int(np.random.SeedSequence([master, zlib.crc32(tag.encode())]).generate_state(1)[0])


def _rng_for(master: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, zlib.crc32(tag.encode())]))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _observation_points(cfg: ExperimentConfig):
    if cfg.observation.random_count > 0:
        rng = _rng_for(cfg.run.seed, "x0-draw")
        pts = []
        rmax = np.tanh(VERTEX_RADIUS / 2.0)
        while len(pts) < cfg.observation.random_count:
            z = rng.uniform(-rmax, rmax) + 1j * rng.uniform(-rmax, rmax)
            if abs(z) >= rmax:
                continue
            # uniform w.r.t. hyperbolic area: accept with the density weight
            dens = (1.0 - abs(z) ** 2) ** -2
            if rng.uniform(0, 1) > dens / (1.0 - rmax ** 2) ** -2:
                continue
            if in_fundamental_domain(np.array([z]))[0]:
                pts.append(complex(z))
        return pts
    return [complex(a, b) for a, b in cfg.observation.x0]


def _cell_tables(payload):
    """One transport time for all observation points (process-pool cell)."""
    cfg, t, x0_list = payload
    state = build_state(cfg)
    out = []
    for x0 in x0_list:
        out.append(find_branches(state, x0, t, cfg.propagation.tol,
                                 cfg.propagation.ds_target))
    return t, out


class Runner:
    def __init__(self, cfg: ExperimentConfig, outdir: Path):
        self.cfg = cfg
        self.outdir = outdir
        self.state = build_state(cfg)
        self.x0 = _observation_points(cfg)
        self.reports: list[TestReport] = []
        self.manifest = {
            "version": hypwave.__version__,
            "config": cfg.echo(),
            "seed": cfg.run.seed,
            "stages": {},
            "warnings": [],
            "caveats": [
                "rational independence is certified at the sampled times only",
            ],
            "observation_points": [[z.real, z.imag] for z in self.x0],
        }
        self.tables = {}
        self._t0 = None

    # -- stages -----------------------------------------------------------

    def stage_t0(self):
        p = self.cfg.propagation
        grid = np.arange(0.0, p.t0_grid_max + 1e-9, p.t0_grid_step)
        rng = _rng_for(self.cfg.run.seed, "t0")
        res = detect_T0(self.state, grid, pair_samples=400, rng=rng)
        if isinstance(res, T0Estimate):
            self._t0 = res.t0
            self.manifest["t0"] = {"t0": res.t0, "pairs": res.checked_pairs}
            for t in p.t_list:
                if t < res.t0:
                    self.manifest["warnings"].append(f"pre-T0 transport time t={t:g}")
        else:
            self.manifest["t0"] = {"failure": res.reason}
        self.manifest["stages"]["t0"] = "done"

    def _ensure_tables(self, t_values):
        missing = [t for t in t_values if t not in self.tables]
        if not missing:
            return
        payloads = [(self.cfg, t, self.x0) for t in sorted(missing)]
        if self.cfg.run.threads > 1:
            with concurrent.futures.ProcessPoolExecutor(self.cfg.run.threads) as ex:
                results = list(ex.map(_cell_tables, payloads))
        else:
            results = [_cell_tables(p) for p in payloads]
        for t, tabs in results:
            self.tables[t] = tabs

    def stage_propagate(self):
        p = self.cfg.propagation
        self._ensure_tables(p.t_list)
        speed = getattr(self.state, "speed", None)
        mass = self.state.amplitude.l2_mass
        for t in p.t_list:
            for k, tab in enumerate(self.tables[t]):
                stem = f"branches_t{t:g}_x{k}"
                _write_json(self.outdir / f"{stem}.json", branch_table_to_dict(tab))
                _write_csv(self.outdir / f"{stem}.csv", BRANCH_CSV_HEADER,
                           branch_table_csv_rows(tab))
                rep = mass_conservation(tab, mass)
                rep.name = f"mass_conservation_t{t:g}_x{k}"
                self.reports.append(rep)
                if speed is not None and tab.M:
                    xi = tab.xi_array()
                    dev = float(np.max(np.abs(np.hypot(xi[:, 0], xi[:, 1]) - speed)))
                    self.reports.append(TestReport(
                        f"branch_speed_invariant_t{t:g}_x{k}",
                        {"max_speed_deviation": dev},
                        {"bound": 1e-9},
                        PASS if dev < 1e-9 else FAIL,
                        {"branches": tab.M}))
        if len(p.t_list) >= 3:
            rows = []
            ts, peaks = [], []
            for t in p.t_list:
                bmax = max((b.amplitude for tab in self.tables[t] for b in tab.branches),
                           default=np.nan)
                rows.append([repr(float(t)), repr(float(bmax))])
                if np.isfinite(bmax) and bmax > 0:
                    ts.append(t)
                    peaks.append(bmax)
            _write_csv(self.outdir / "decay.csv", ["t", "max_b"], rows)
            if len(ts) >= 3:
                slope = float(np.polyfit(ts, np.log(peaks), 1)[0])
                lam = speed if speed is not None else 1.0
                dev = abs(slope + lam / 2.0) / (lam / 2.0)
                self.reports.append(TestReport(
                    "amplitude_decay_rate",
                    {"fitted_slope": slope, "expected": -lam / 2.0,
                     "relative_deviation": dev},
                    {"relative_bound": 0.2},
                    PASS if dev <= 0.2 else FAIL,
                    {"times": len(ts)}))
        self.manifest["stages"]["propagate"] = "done"

    def stage_equidist(self):
        t_max = max(self.cfg.propagation.t_list)
        self._ensure_tables([t_max])
        em = energy_measure(self.state)
        target = SpectralMeasure.from_energy(em)
        for k, tab in enumerate(self.tables[t_max]):
            if tab.M == 0:
                continue
            w = tab.amplitude_array() ** 2
            xi = tab.xi_array()
            seed = _seed_for(self.cfg.run.seed, f"equidist-{k}")
            rep = weak_convergence_distance(
                w, xi, target, baseline_factor=self.cfg.tests.equidist_factor, seed=seed)
            rep.name = f"weak_convergence_t{t_max:g}_x{k}"
            self.reports.append(rep)
            rows = [[repr(float(wi)), repr(float(np.arctan2(x[1], x[0]))),
                     repr(float(np.hypot(x[0], x[1])))]
                    for wi, x in zip(w, xi)]
            _write_csv(self.outdir / f"equidist_atoms_x{k}.csv",
                       ["weight", "angle", "radius"], rows)
        self.manifest["stages"]["equidist"] = "done"

    def _certified_pair(self, model):
        """Pick two strong, near-orthogonal wave classes and certify their
        integer-combination gap."""
        n_max = self.cfg.tests.independence_n_max
        beta = model.beta_array()
        xi = model.xi_array()
        order = np.argsort(-beta)[:60]
        best = None
        rng_modes = np.arange(-n_max, n_max + 1)
        N1, N2 = np.meshgrid(rng_modes, rng_modes, indexing="ij")
        mask = (N1 != 0) | (N2 != 0)
        for ii in range(len(order)):
            for jj in range(ii + 1, len(order)):
                a, b = order[ii], order[jj]
                tha = np.arctan2(xi[a, 1], xi[a, 0])
                thb = np.arctan2(xi[b, 1], xi[b, 0])
                d = abs((tha - thb + np.pi) % (2 * np.pi) - np.pi)
                if not (1.2 <= d <= 1.94):
                    continue
                cx = N1 * xi[a, 0] + N2 * xi[b, 0]
                cy = N1 * xi[a, 1] + N2 * xi[b, 1]
                m = float(np.min(np.hypot(cx, cy)[mask]))
                if best is None or m > best[0]:
                    best = (m, a, b)
        if best is None:
            return None
        _, a, b = best
        return a, b

    def stage_local_limit(self):
        ll = self.cfg.local_limit
        t_max = max(self.cfg.propagation.t_list)
        self._ensure_tables([t_max])
        em = energy_measure(self.state)
        mu_unit = SpectralMeasure.from_energy(em).normalized()
        if self._t0 is not None and t_max < self._t0:
            self.manifest["warnings"].append("local limit computed below T0")
        for k, tab in enumerate(self.tables[t_max]):
            if tab.M == 0:
                continue
            for h in ll.h_list:
                model = group_branches(tab, h, ll.dir_tol)
                _write_json(self.outdir / f"model_t{t_max:g}_x{k}_h{h:g}.json",
                            local_model_to_dict(model))
                pair = self._certified_pair(model)
                if pair is None:
                    self.reports.append(TestReport(
                        f"independence_t{t_max:g}_x{k}_h{h:g}", {"note": "no pair"},
                        {}, INCONCLUSIVE, {"classes": model.N}))
                    continue
                xi = model.xi_array()
                rep = rational_independence(xi[list(pair)], self.cfg.tests.independence_n_max,
                                            self.cfg.tests.independence_tol)
                rep.name = f"independence_t{t_max:g}_x{k}_h{h:g}"
                self.reports.append(rep)
                seed = _seed_for(self.cfg.run.seed, f"weyl-{k}-{h}")
                rng = np.random.default_rng(seed)
                theta = _pair_phases(model, pair, ll.alpha, ll.n_samples, rng)
                wrep = weyl_equidistribution(theta, self.cfg.tests.weyl_n_max, seed)
                wrep.name = f"weyl_t{t_max:g}_x{k}_h{h:g}"
                self.reports.append(wrep)
            # clt checks at the dedicated phase-winding scale
            model = group_branches(tab, ll.moment_h, ll.dir_tol)
            seed = _seed_for(self.cfg.run.seed, f"clt-{k}")
            rng = np.random.default_rng(seed)
            f0 = sample_local_limit(model, ll.alpha, [(0.0, 0.0)], ll.n_samples, rng)[:, 0]
            grep = gaussianity_moments(f0, seed)
            grep.name = f"gaussianity_t{t_max:g}_x{k}"
            self.reports.append(grep)
            crep, rows = _covariance_check(
                model, mu_unit, self.cfg.tests.covariance_lags,
                self.cfg.tests.covariance_samples,
                np.random.default_rng(_seed_for(self.cfg.run.seed, f"cov-{k}")))
            crep.name = f"covariance_t{t_max:g}_x{k}"
            crep.seed = _seed_for(self.cfg.run.seed, f"cov-{k}")
            self.reports.append(crep)
            _write_csv(self.outdir / f"covariance_x{k}.csv",
                       ["lag", "emp_re", "emp_im", "target", "se"], rows)
        self.manifest["stages"]["local_limit"] = "done"

    def stage_rwm(self):
        tc = self.cfg.tests
        em = energy_measure(self.state)
        mu = SpectralMeasure.from_energy(em).normalized()
        seed = _seed_for(self.cfg.run.seed, "rwm")
        rng = np.random.default_rng(seed)
        pts = [(0.0, 0.0)] + [(r, 0.0) for r in tc.rwm_radii]
        fields = sample_isotropic(mu, tc.rwm_waves, pts, tc.rwm_samples, rng,
                                  precision="single", n_threads=self.cfg.run.threads)
        stats, thresholds = {}, {}
        rows = []
        worst = 0.0
        for i, r in enumerate(tc.rwm_radii):
            prod = fields[:, i + 1] * np.conj(fields[:, 0])
            emp = prod.mean()
            se = float(np.std(prod) / np.sqrt(prod.size))
            tgt = covariance(mu, r)
            dev = abs(emp - tgt) / se
            worst = max(worst, dev)
            rows.append([repr(float(r)), repr(float(emp.real)), repr(float(emp.imag)),
                         repr(float(tgt)), repr(se)])
            stats[f"dev_sigma_r{r:g}"] = float(dev)
        thresholds["sigma_bound"] = 4.0
        rep = TestReport("isotropic_covariance", stats, thresholds,
                         PASS if worst <= 4.0 else FAIL,
                         {"samples": tc.rwm_samples, "waves": tc.rwm_waves}, seed)
        self.reports.append(rep)
        _write_csv(self.outdir / "rwm_covariance.csv",
                   ["lag", "emp_re", "emp_im", "target", "se"], rows)
        self.manifest["stages"]["rwm"] = "done"

    def stage_eikonal(self):
        if not isinstance(self.state, MonochromaticState):
            self.manifest["stages"]["eikonal"] = "skipped (chart state)"
            return
        phase = self.state.phase
        rng = _rng_for(self.cfg.run.seed, "eikonal")
        L = self.state.data.arc.half_length
        n = 1000
        s = rng.uniform(-0.9 * L, 0.9 * L, n)
        tau = rng.uniform(-0.9 * phase.collar, 0.9 * phase.collar, n)
        z = phase.char_point(s, tau)
        step = 1e-5
        vals = {}
        for key, dz in (("xp", step), ("xm", -step), ("yp", 1j * step), ("ym", -1j * step)):
            vals[key] = phase.value(z + dz)
        gx = (vals["xp"] - vals["xm"]) / (2 * step)
        gy = (vals["yp"] - vals["ym"]) / (2 * step)
        norm = (1.0 - np.abs(z) ** 2) / 2.0 * np.hypot(gx, gy)
        worst_norm = float(np.max(np.abs(norm - 1.0)))
        char_dev = float(np.max(np.abs(phase.value(z) - (self.state.data.profile(s) + tau))))
        rep = TestReport(
            "eikonal_unit_gradient",
            {"max_gradient_norm_deviation": worst_norm,
             "max_characteristic_deviation": char_dev},
            {"gradient_bound": 1e-8, "characteristic_bound": 1e-12},
            PASS if (worst_norm < 1e-8 and char_dev < 1e-12) else FAIL,
            {"points": n}, _seed_for(self.cfg.run.seed, "eikonal"))
        self.reports.append(rep)
        self.manifest["stages"]["eikonal"] = "done"

    # -- assembly -----------------------------------------------------------

    def finish(self) -> RunArtifact:
        self.manifest["reports"] = [r.name for r in self.reports]
        _write_json(self.outdir / "manifest.json", self.manifest)
        _write_json(self.outdir / "reports.json", [r.to_dict() for r in self.reports])
        rows = []
        for r in self.reports:
            stat = next(iter(r.statistics.values())) if r.statistics else ""
            thr = next(iter(r.thresholds.values())) if r.thresholds else ""
            if isinstance(stat, (list, tuple, complex)):
                stat = repr(stat)
            rows.append([r.name, repr(stat) if isinstance(stat, float) else stat,
                         repr(thr) if isinstance(thr, float) else thr,
                         r.verdict, r.seed if r.seed is not None else ""])
        _write_csv(self.outdir / "reports.csv",
                   ["name", "statistic", "threshold", "verdict", "seed"], rows)
        return RunArtifact(self.outdir, self.manifest, self.reports)


def _pair_phases(model, pair, alpha, n_samples, rng):
    """Torus points of the two selected class phases under ball sampling."""
    xi = model.xi_array()[list(pair)]
    arg = model.arg_array()[list(pair)]
    K = model.h ** (alpha - 1.0)
    r = np.sqrt(rng.uniform(0.0, 1.0, n_samples))
    a = rng.uniform(0.0, 2.0 * np.pi, n_samples)
    xt = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    theta = (arg[None, :] + K * (xt @ xi.T)) / (2.0 * np.pi)
    return np.mod(theta, 1.0)


def _covariance_check(model, mu_unit, lags, n_samples, rng):
    """Ensemble covariance of the model's plane waves against the radial
    target mass * int J0(lam r) dmu_unit, at the given lags."""
    beta = model.beta_array()
    xi = model.xi_array()
    ens = PlaneWaveEnsemble(tuple(float(b) for b in beta),
                            tuple((float(x[0]), float(x[1])) for x in xi))
    from hypwave.randomwaves import sample_planewave
    pts = [(0.0, 0.0)] + [(float(r), 0.0) for r in lags]
    fields = sample_planewave(ens, pts, n_samples, rng)
    mass = float(np.sum(beta ** 2))
    stats, rows = {}, []
    worst = 0.0
    for i, r in enumerate(lags):
        prod = fields[:, i + 1] * np.conj(fields[:, 0])
        emp = prod.mean()
        se = float(np.std(prod) / np.sqrt(prod.size))
        tgt = mass * covariance(mu_unit, float(r))
        dev = abs(emp - tgt) / se
        worst = max(worst, dev)
        stats[f"dev_sigma_r{r:g}"] = float(dev)
        rows.append([repr(float(r)), repr(float(emp.real)), repr(float(emp.imag)),
                     repr(float(tgt)), repr(se)])
    rep = TestReport("covariance", stats, {"sigma_bound": 4.0},
                     PASS if worst <= 4.0 else FAIL,
                     {"samples": n_samples, "classes": model.N})
    return rep, rows


STAGE_SETS = {
    "propagate": ("t0", "propagate"),
    "equidist": ("t0", "equidist"),
    "local-limit": ("t0", "local_limit"),
    "independence": ("t0", "local_limit"),
    "rwm-sample": ("rwm",),
    "eikonal-check": ("eikonal",),
    "all": ("t0", "propagate", "equidist", "local_limit", "rwm", "eikonal"),
}


def run(cfg: ExperimentConfig, subcommand: str = "all", outdir: str | None = None) -> RunArtifact:
    cfg.validate()
    out = Path(outdir if outdir is not None else cfg.run.outdir)
    out.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg, out)
    stage_fns = {
        "t0": runner.stage_t0,
        "propagate": runner.stage_propagate,
        "equidist": runner.stage_equidist,
        "local_limit": runner.stage_local_limit,
        "rwm": runner.stage_rwm,
        "eikonal": runner.stage_eikonal,
    }
    for name in STAGE_SETS[subcommand]:
        try:
            stage_fns[name]()
        except Exception as exc:  # noqa: BLE001 - recorded, independent stages continue
            runner.manifest["stages"][name] = f"failed: {type(exc).__name__}: {exc}"
    return runner.finish()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="hypwave", description=__doc__)
    ap.add_argument("--config", required=True, help="experiment config file")
    ap.add_argument("--subcommand", default="all", choices=SUBCOMMANDS)
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--out", default=None, help="override the output directory")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)
    cfg = parse_config(args.config)
    if args.seed is not None or args.threads is not None:
        from dataclasses import replace
        run_cfg = replace(cfg.run,
                          **({"seed": args.seed} if args.seed is not None else {}),
                          **({"threads": args.threads} if args.threads is not None else {}))
        cfg = replace(cfg, run=run_cfg)
    artifact = run(cfg, args.subcommand, args.out)
    for rep in artifact.reports:
        print(f"{rep.verdict.upper():12s} {rep.name}")
    failed = [s for s, v in artifact.manifest["stages"].items()
              if isinstance(v, str) and v.startswith("failed")]
    for s in failed:
        print(f"STAGE FAILED  {s}: {artifact.manifest['stages'][s]}", file=sys.stderr)
    return 0 if artifact.all_passed and not failed else 1
