"""Command-line entry point: run the sampling, discovery, synthesis and stabilization stages.

Every subcommand reads one flat TOML experiment file (``--config``); the
bundled examples live in ``upo_control/configs``.  Artifacts go to ``--out``,
defaulting to ``$UPO_CONTROL_OUT`` or ``./upo_out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .catalog import Catalog, bundled_catalog_path, load_catalog, select_neighbours
from .control import (
    DEFAULT_MARGIN,
    VELOCITY_ACTUATION,
    Infeasible,
    LmiSolution,
    closed_loop_matrix,
    controllability,
    minimal_radius,
    minimum_effort_gain,
    reduce_and_embed,
    solve_lmi,
)
from .discovery import (
    DiscoveredMap,
    PolyLibrary,
    ensemble_discover,
    fit_map,
    linearize_at,
    save_json,
    validate_map,
)
from .dynamics import EARTH_MOON, SystemParams, jacobi_constant, lagrange_points
from .integrator import DEFAULT_CONFIG, IntegratorConfig, propagate, propagate_with_stm
from .loop import StabilizationConfig, run_summary, stabilize, total_delta_v
from .sections import SECTION_FAMILY, AugmentationConfig, DatasetPair, get_section, sample_section_data
from .stability import classify_floquet, monodromy_at, sensitivity_norm

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("upo_control")

OUT_ENV = "UPO_CONTROL_OUT"
BUNDLED_CONFIGS = ("S1L", "S2L", "S1H", "S2H")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    target: str
    section: str
    catalog: str = ""  # empty: bundled catalog
    # sampling
    delta_v: float = 2.5e-7
    m: int = 10
    dC: float = 1.75e-4
    eta: float = 1.0
    crossings_per_ic: int = 2
    perturb_z: bool | None = None
    # discovery
    degree: int = 5
    lambda_sparse: float = 1e-6
    lstsq: str = "basic"
    ensemble: bool = False
    n_models: int = 100
    rho: float = 0.6
    seed: int = 0
    max_total_error: float = 1.0
    delta_v_sweep: list[float] = field(default_factory=list)
    # synthesis
    radii: list[float] = field(default_factory=lambda: [1e9])
    include_minimal_radius: bool = True
    margin: float = DEFAULT_MARGIN
    reference_gain: bool = True
    # stabilization
    eta_control: float = 1.0
    max_periods: int = 20
    divergence_radius: float = 2.0
    offset: float = 1e-7
    dv_last: int = 14
    theta_reading: str = "position"
    # integration
    rel_tol: float = 1e-12
    abs_tol: float = 1e-14

    def validate(self) -> None:
        try:
            sec = get_section(self.section)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.section = sec.name
        if self.theta_reading not in ("position", "velocity"):
            raise ConfigError("theta_reading must be 'position' or 'velocity'")
        if self.lstsq not in ("basic", "min_norm"):
            raise ConfigError("lstsq must be 'basic' or 'min_norm'")
        if self.catalog and not Path(self.catalog).is_file():
            raise ConfigError(f"catalog file not found: {self.catalog}")
        if any(r <= 0 for r in self.radii):
            raise ConfigError("radii must be positive")
        try:
            self.augmentation()
            self.stabilization()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.delta_v, self.m, self.dC, self.eta, self.crossings_per_ic, self.perturb_z)

    def stabilization(self) -> StabilizationConfig:
        return StabilizationConfig(self.eta_control, self.max_periods, self.divergence_radius)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(rel_tol=self.rel_tol, abs_tol=self.abs_tol)


def load_config(path) -> PipelineConfig:
    """Read a flat TOML experiment file; unknown keys are rejected."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key in ("target", "section"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    cfg = PipelineConfig(**raw)
    cfg.validate()
    return cfg


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("upo_control") / "configs" / f"{name}.toml"))


def _resolve_config(arg: str) -> PipelineConfig:
    if arg.upper() in BUNDLED_CONFIGS and not Path(arg).exists():
        arg = str(bundled_config_path(arg.upper()))
    return load_config(arg)


# --- stages -----------------------------------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def _cplx(z) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


class Pipeline:
    """Stage runner holding the intermediate results of one experiment."""

    def __init__(self, cfg: PipelineConfig, out: Path, catalog: str | None = None,
                 p: SystemParams = EARTH_MOON):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.p = p
        self.icfg = cfg.integrator()
        path = catalog or cfg.catalog or bundled_catalog_path()
        self.catalog: Catalog = load_catalog(path, p)
        try:
            self.target = self.catalog[cfg.target]
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        if SECTION_FAMILY[cfg.section].lower() != self.target.family.lower():
            raise ConfigError(f"section {cfg.section} is defined for the {SECTION_FAMILY[cfg.section]} family, "
                              f"target {self.target.id} is {self.target.family}")
        self.sec = get_section(cfg.section)
        self.report: dict = {"config": asdict(cfg)}

    def _stage(self, name, fn, *args):
        log.info("stage %s", name)
        try:
            return fn(*args)
        except (ConfigError, StageError):
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(name, exc) from exc

    # analysis
    def analyze(self, sections=None) -> dict:
        names = [self.cfg.section] if not sections else list(sections)
        secs = []
        for name in names:
            try:
                sec = get_section(name)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if SECTION_FAMILY[sec.name].lower() != self.target.family.lower():
                raise ConfigError(f"section {sec.name} does not apply to the {self.target.family} family")
            secs.append(sec)

        def run():
            out = {}
            for sec in secs:
                r = monodromy_at(self.target, sec, self.icfg, self.p)
                d = classify_floquet(r)
                out[sec.name] = {
                    "anchor": r.anchor_crossing,
                    "lambda_u": d.lambda_u,
                    "lambda_s": d.lambda_s,
                    "neutral": [_cplx(z) for z in d.neutral],
                    "nu_u": d.nu_u,
                    "nu_s": d.nu_s,
                    "eigenvalues": [_cplx(z) for z in r.eigenvalues],
                    "norm_spectral": sensitivity_norm(r, "spectral"),
                    "norm_frobenius": sensitivity_norm(r, "frobenius"),
                }
                if sec.name == self.cfg.section:
                    self.monodromy, self.dirs = r, d
            save_json(out, self.out / "monodromy.json")
            self.report["monodromy"] = out
            return out
        return self._stage("analyze", run)

    def _sample(self, delta_v: float):
        cfg = self.cfg
        nb = select_neighbours(self.catalog, self.target, cfg.m, cfg.dC)
        aug = AugmentationConfig(delta_v, cfg.m, cfg.dC, cfg.eta, cfg.crossings_per_ic, cfg.perturb_z)
        return sample_section_data(self.target, nb, self.sec, aug, self.icfg, self.p)

    def sample(self) -> DatasetPair:
        def run():
            data, anchor, cal = self._sample(self.cfg.delta_v)
            self.data, self.anchor, self.cal = data, anchor, cal
            data.to_csv(self.out / "dataset.csv")
            self.report["dataset"] = {"pairs": len(data), "anchor": anchor}
            return data
        return self._stage("sample", run)

    def _fit(self, data, anchor):
        cfg = self.cfg
        lib = PolyLibrary(self.sec.active, cfg.degree)
        if cfg.ensemble:
            ens = ensemble_discover(data, lib, anchor, cfg.lambda_sparse, cfg.n_models, cfg.rho, cfg.seed, cfg.lstsq)
            return ens.median_map, ens
        return fit_map(data, lib, anchor, cfg.lambda_sparse, cfg.lstsq), None

    def discover(self, data: DatasetPair | None = None) -> DiscoveredMap:
        def run():
            d = data if data is not None else self.data
            model, ens = self._fit(d, self.anchor)
            self.model = model
            save_json(ens.to_dict() if ens is not None else model.to_dict(), self.out / "model.json")
            if ens is not None:
                self.report["ensemble_linear_variance"] = ens.linear_variance()
            return model
        return self._stage("discover", run)

    def validate(self) -> dict:
        def run():
            self.linear = linearize_at(self.model)
            rep = validate_map(self.linear, self.monodromy.M)
            out = rep.to_dict()
            out["A"] = self.linear.A
            out["passed"] = bool(rep.total_error <= self.cfg.max_total_error)
            save_json(out, self.out / "validation.json")
            self.report["validation"] = out
            if not out["passed"]:
                raise StageError("validate", f"total eigenvalue error {rep.total_error:.6g} exceeds "
                                             f"{self.cfg.max_total_error:g}")
            return out
        return self._stage("validate", run)

    def delta_v_sweep(self) -> list[tuple]:
        def run():
            rows = []
            for dv in self.cfg.delta_v_sweep:
                data, anchor, _ = self._sample(dv)
                model, _ = self._fit(data, anchor)
                rep = validate_map(linearize_at(model), self.monodromy.M)
                rows.append((float(dv), len(data), rep.total_error, rep.det))
            _write_csv(self.out / "delta_v_sweep.csv", ["delta_v", "pairs", "total_error", "det"], rows)
            self.report["delta_v_sweep"] = [dict(zip(("delta_v", "pairs", "total_error", "det"), r)) for r in rows]
            return rows
        return self._stage("delta_v_sweep", run)

    def synthesize(self) -> list[dict]:
        def run():
            red = reduce_and_embed(self.linear, VELOCITY_ACTUATION, self.sec)
            ctrb = controllability(red.A_active, red.B_active)
            r_min = minimal_radius(red.problem(1.0, self.cfg.margin))
            radii = [float(r) for r in self.cfg.radii]
            if self.cfg.include_minimal_radius and np.isfinite(r_min):
                radii.append(float(1.001 * r_min))
            gains = []
            for i, R in enumerate(radii):
                sol = solve_lmi(red.problem(R, self.cfg.margin), self.cfg.seed)
                entry = {"index": i, "radius": R, "margin": self.cfg.margin}
                if isinstance(sol, LmiSolution):
                    sol.K_full = red.embed(sol.K_active)
                    _, ev = closed_loop_matrix(self.linear.A, VELOCITY_ACTUATION, sol.K_full)
                    cl_active = np.linalg.eigvals(red.A_active + red.B_active @ sol.K_active)
                    entry.update({
                        "feasible": True,
                        "K_full": sol.K_full,
                        "normalized_margin": sol.normalized_margin,
                        "certificate": asdict(sol.certificate),
                        "closed_loop_eigenvalues": [_cplx(z) for z in ev],
                        "active_spectral_radius": float(np.max(np.abs(cl_active))),
                    })
                else:
                    entry.update({"feasible": False, "infeasible": asdict(sol)})
                save_json(entry, self.out / f"gain_{i:02d}.json")
                gains.append(entry)
            self.reduction = red
            self.gains = gains
            self.report["synthesis"] = {"controllable": ctrb.full_rank, "rank": ctrb.rank, "minimal_radius": r_min,
                                        "gains": gains}
            return gains
        return self._stage("synthesize", run)

    def _run(self, K_full):
        cfg = self.cfg
        run = stabilize(self.target, self.sec, K_full, cfg.stabilization(), self.icfg, self.p,
                        initial_offset=cfg.offset * self.dirs.nu_u)
        summary = run_summary(run, self.dirs, self.sec, dv_ranges=((1, cfg.dv_last),))
        summary["theta_reported_deg"] = summary.get("theta_position_deg" if cfg.theta_reading == "position"
                                                    else "theta_velocity_deg")
        return run, summary

    def stabilize(self) -> list[dict]:
        def run():
            rows, runs = [], []
            key = f"1:{self.cfg.dv_last}"
            for g in self.gains:
                if not g["feasible"]:
                    rows.append((g["index"], g["radius"], "false", "", "", "", "", "", ""))
                    continue
                traj, s = self._run(np.asarray(g["K_full"]))
                traj.to_csv(self.out / f"run_{g['index']:02d}.csv")
                s.update({"index": g["index"], "radius": g["radius"]})
                runs.append(s)
                rows.append((g["index"], g["radius"], "true", g["active_spectral_radius"], s["periods_completed"],
                             "true" if s["diverged"] else "false", s["delta_v_m_s"].get(key, float("nan")),
                             s.get("theta_velocity_deg", float("nan")), s.get("theta_position_deg", float("nan"))))
            _write_csv(self.out / "radius_sweep.csv",
                       ["index", "radius", "feasible", "max_closed_loop_eig", "periods", "diverged",
                        f"dv_{self.cfg.dv_last}_m_s", "theta_velocity_deg", "theta_position_deg"], rows)
            self.report["stabilization"] = runs
            if self.cfg.reference_gain:
                self._reference()
            return runs
        return self._stage("stabilize", run)

    def _reference(self) -> None:
        red = self.reduction
        try:
            K = red.embed(minimum_effort_gain(red.A_active, red.B_active))
        except ValueError as exc:
            log.info("no reference gain: %s", exc)
            self.report["reference_minimum_effort"] = {"skipped": str(exc)}
            return
        traj, s = self._run(K)
        traj.to_csv(self.out / "run_reference.csv")
        s["K_full"] = K
        s["note"] = "minimum-effort gain, not LMI certified"
        self.report["reference_minimum_effort"] = s

    def write_report(self) -> None:
        save_json(self.report, self.out / "report.json")


# --- subcommands -----------------------------------------------------------------------------------------


def _pipeline(args) -> Pipeline:
    cfg = _resolve_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return Pipeline(cfg, args.out, args.catalog)


def cmd_lagrange(args) -> int:
    pts = [{"label": lp.label, "position": lp.position, "jacobi": lp.jacobi} for lp in lagrange_points()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_json({"points": pts}, out / "lagrange.json")
    for lp in pts:
        print(f"{lp['label']}  x={lp['position'][0]:.10f}  y={lp['position'][1]:.10f}  C={lp['jacobi']:.10f}")
    return 0


def cmd_propagate(args) -> int:
    s0 = np.array(args.state, dtype=float)
    cfg = IntegratorConfig(rel_tol=args.rtol, abs_tol=args.atol)
    out = {"initial_state": s0, "time": args.time}
    if args.stm:
        r = propagate_with_stm(s0, args.time, cfg)
        out["final_state"], out["stm"] = r.final_state, r.stm
    else:
        out["final_state"] = propagate(s0, args.time, cfg)
    out["jacobi_drift"] = jacobi_constant(out["final_state"]) - jacobi_constant(s0)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    save_json(out, Path(args.out) / "propagate.json")
    print(" ".join(f"{v:.17g}" for v in out["final_state"]))
    return 0


def cmd_analyze(args) -> int:
    pl = _pipeline(args)
    pl.analyze(args.sections)
    pl.write_report()
    for name, d in pl.report["monodromy"].items():
        print(f"{name}: lambda_u={d['lambda_u']:.6g} lambda_s={d['lambda_s']:.6g} ||M||={d['norm_spectral']:.4g}")
    return 0


def cmd_sample(args) -> int:
    pl = _pipeline(args)
    data = pl.sample()
    print(f"{len(data)} pairs written to {pl.out / 'dataset.csv'}")
    return 0


def _through_validation(pl: Pipeline, dataset: str | None = None) -> None:
    pl.analyze()
    if dataset:
        from .sections import find_anchor
        pl.cal, _, pl.anchor = find_anchor(pl.target, pl.sec, pl.icfg, pl.p)
        pl.discover(DatasetPair.from_csv(dataset))
    else:
        pl.sample()
        pl.discover()
    pl.validate()


def cmd_discover(args) -> int:
    pl = _pipeline(args)
    try:
        _through_validation(pl, args.dataset)
    finally:
        pl.write_report()
    v = pl.report["validation"]
    print(f"total eigenvalue error {v['total_error']:.6g}, det {v['det']:.6g}")
    return 0


def cmd_synthesize(args) -> int:
    pl = _pipeline(args)
    try:
        pl.analyze()
        if args.model:
            with open(args.model) as fh:
                pl.model = DiscoveredMap.from_dict(json.load(fh))
            pl.validate()
        else:
            _through_validation(pl)
        pl.synthesize()
    finally:
        pl.write_report()
    for g in pl.gains:
        status = f"spectral radius {g['active_spectral_radius']:.4g}" if g["feasible"] else "infeasible"
        print(f"R={g['radius']:.6g}: {status}")
    return 0


def cmd_stabilize(args) -> int:
    pl = _pipeline(args)
    try:
        _through_validation(pl)
        pl.synthesize()
        pl.stabilize()
    finally:
        pl.write_report()
    _print_runs(pl)
    return 0


def cmd_pipeline(args) -> int:
    pl = _pipeline(args)
    try:
        _through_validation(pl)
        if pl.cfg.delta_v_sweep:
            pl.delta_v_sweep()
        pl.synthesize()
        pl.stabilize()
    finally:
        pl.write_report()
    _print_runs(pl)
    return 0


def _fmt(v, spec=".4g") -> str:
    return "n/a" if v is None or not np.isfinite(v) else format(v, spec)


def _print_runs(pl: Pipeline) -> None:
    key = f"1:{pl.cfg.dv_last}"
    runs = [(f"R={s['radius']:.6g}", s) for s in pl.report.get("stabilization", [])]
    ref = pl.report.get("reference_minimum_effort")
    if ref and "skipped" not in ref:
        runs.append(("reference", ref))
    for label, s in runs:
        print(f"{label}: periods={s['periods_completed']} dv[{key}]={_fmt(s['delta_v_m_s'].get(key))} m/s "
              f"theta={_fmt(s.get('theta_reported_deg'))} deg")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="upo-control", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True,
                           help="experiment TOML file, or one of " + ", ".join(BUNDLED_CONFIGS))
            p.add_argument("--catalog", default=None, help="catalog CSV (overrides the config)")
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=os.environ.get(OUT_ENV, "upo_out"))

    p = sub.add_parser("lagrange", help="equilibrium points and their Jacobi constants")
    common(p, config=False)
    p.set_defaults(func=cmd_lagrange)

    p = sub.add_parser("propagate", help="propagate one state")
    p.add_argument("--state", type=float, nargs=6, required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--stm", action="store_true")
    p.add_argument("--rtol", type=float, default=DEFAULT_CONFIG.rel_tol)
    p.add_argument("--atol", type=float, default=DEFAULT_CONFIG.abs_tol)
    common(p, config=False)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("analyze", help="monodromy summary at one or more sections")
    p.add_argument("--sections", nargs="+", default=None)
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sample", help="write the augmented training pairs")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("discover", help="fit and validate the return map")
    p.add_argument("--dataset", default=None, help="pairs CSV from 'sample' (sampled afresh if omitted)")
    common(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("synthesize", help="LMI gains for the configured radii")
    p.add_argument("--model", default=None, help="model JSON from 'discover'")
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("stabilize", help="closed-loop runs for the configured radii")
    common(p)
    p.set_defaults(func=cmd_stabilize)

    p = sub.add_parser("pipeline", help="all stages plus the sweeps")
    common(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
