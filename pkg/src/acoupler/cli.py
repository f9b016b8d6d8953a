"""Batch experiment driver: adaptive runs, references, checks, reports.

Four subcommands share one configuration model.  `run` executes a sweep of
adaptive simulations and writes per-run manifests plus a flat summary CSV;
`reference` relaxes the full lattice and stores the ground-truth solution
with its decay profile; `verify` executes the invariant suite; `report`
condenses summary rows into per-run fit statistics.  All numeric text is
written with 17 significant digits so files are byte-stable across reruns.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adaptive
from . import estimator as est
from .geometry import NEIGHBOR_STEPS
from .lattice import Lattice, micro_crack, multi_vacancy, screw_dislocation
from .mesh import CoarseMesh
from .potential import EamParams
from .predictor import default_strain, make_loading
from .solver import difference_magnitudes, solve_reference

CASES = ("micro-crack", "screw", "multi-vacancy")
SUMMARY_COLUMNS = (
    "run_id", "mode", "R_buf", "R_bld", "step", "N", "error", "rho",
    "eta_tr", "eta_mo", "eta_cg", "t_solve", "t_estimate",
)
# three vacancies at pairwise lattice distance 20, merging under adaptivity
MULTI_VACANCY_SITES = ((0, 0), (20, 0), (0, 20))


def _num(x) -> str:
    return f"{float(x):.17g}"


@dataclass
class ExperimentConfig:
    """One sweep description: a defect case against estimator variants."""

    case: str = "micro-crack"
    modes: tuple = ("original",)
    rbuf: tuple = (3,)
    rbld: tuple = (2.0,)
    baselines: tuple = ()
    radius: int = 60
    nmax: int = 20000
    seed: int = 0
    out: str = "runs"
    snapshots: bool = False
    errors: str = "inline"
    adaptive: adaptive.AdaptiveConfig = field(default_factory=adaptive.AdaptiveConfig)

    def check(self) -> None:
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")
        if not self.modes:
            raise ValueError("empty mode sweep")
        for m in self.modes:
            if m not in est.MODES:
                raise ValueError(f"unknown mode {m!r}")
        for b in self.baselines:
            if b != "graded":
                raise ValueError(f"unknown baseline {b!r}")
        if ("direct" in self.modes or "blended" in self.modes) and not self.rbuf:
            raise ValueError("empty R_buf sweep")
        if "blended" in self.modes and not self.rbld:
            raise ValueError("empty R_bld sweep")
        if self.errors not in ("inline", "none"):
            raise ValueError(f"errors must be inline or none, got {self.errors!r}")
        if self.radius < 8 or self.radius > 300:
            raise ValueError(f"radius {self.radius} outside the supported range")


def build_case(case: str, radius: int):
    """Lattice and loading for one named defect study."""
    if case == "micro-crack":
        return Lattice(radius, micro_crack(5)), make_loading("crack", default_strain())
    if case == "screw":
        return Lattice(radius, screw_dislocation()), make_loading("screw")
    return (
        Lattice(radius, multi_vacancy(MULTI_VACANCY_SITES)),
        make_loading("multivacancy", default_strain()),
    )


# ------------------------------------------------------------------ config

def _split_list(text: str) -> list:
    return [t.strip() for t in text.replace(",", " ").split() if t.strip()]


def load_config(path: str | None, args) -> ExperimentConfig:
    """Config file merged with command-line overrides (flags win)."""
    cfg = ExperimentConfig()
    acfg = cfg.adaptive
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValueError(f"config file {path!r} not found")
        exp = parser["experiment"] if parser.has_section("experiment") else {}
        if "case" in exp:
            cfg.case = exp["case"]
        if "modes" in exp:
            cfg.modes = tuple(_split_list(exp["modes"]))
        if "rbuf" in exp:
            cfg.rbuf = tuple(int(v) for v in _split_list(exp["rbuf"]))
        if "rbld" in exp:
            cfg.rbld = tuple(float(v) for v in _split_list(exp["rbld"]))
        if "baselines" in exp:
            cfg.baselines = tuple(_split_list(exp["baselines"]))
        for key in ("radius", "nmax", "seed"):
            if key in exp:
                setattr(cfg, key, int(exp[key]))
        if "out" in exp:
            cfg.out = exp["out"]
        if "snapshots" in exp:
            cfg.snapshots = exp.getboolean("snapshots")
        if "errors" in exp:
            cfg.errors = exp["errors"]
        if parser.has_section("adaptive"):
            sec = parser["adaptive"]
            for key, cast in (
                ("tau1", float), ("tau2", float), ("k_max", int),
                ("max_steps", int), ("rho_tol", float), ("r_max", int),
                ("enlarge_factor", float), ("marking", str),
            ):
                if key in sec:
                    setattr(acfg, key, cast(sec[key]))
        if parser.has_section("estimator"):
            sec = parser["estimator"]
            for key, cast in (("c_tr", float), ("c_mesh", float)):
                if key in sec:
                    setattr(acfg.estimator, key, cast(sec[key]))
            if "c_mo_cg" in sec:
                raw = sec["c_mo_cg"]
                acfg.estimator.c_mo_cg = None if raw.strip().lower() == "auto" else float(raw)
        if parser.has_section("mesh"):
            sec = parser["mesh"]
            for key, cast in (
                ("core_radius", int), ("buffer_width", int),
                ("grading_constant", float), ("grading_exponent", float),
            ):
                if key in sec:
                    setattr(acfg.mesh, key, cast(sec[key]))
        if parser.has_section("solver"):
            sec = parser["solver"]
            for key, cast in (("force_tolerance", float), ("max_iterations", int)):
                if key in sec:
                    setattr(acfg.solver, key, cast(sec[key]))

    if getattr(args, "case", None):
        cfg.case = args.case
    if getattr(args, "mode", None):
        cfg.modes = (args.mode,)
    if getattr(args, "rbuf", None) is not None:
        cfg.rbuf = (args.rbuf,)
    if getattr(args, "rbld", None) is not None:
        cfg.rbld = (args.rbld,)
    if getattr(args, "radius", None) is not None:
        cfg.radius = args.radius
    if getattr(args, "nmax", None) is not None:
        cfg.nmax = args.nmax
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "snapshots", False):
        cfg.snapshots = True
    cfg.adaptive.n_max = cfg.nmax
    cfg.adaptive.r0 = cfg.radius
    cfg.check()
    cfg.adaptive.check()
    return cfg


# --------------------------------------------------------------------- run

def _sweep_entries(cfg: ExperimentConfig):
    """(label, mode, r_buf, r_bld, marking) per run, in declaration order."""
    entries = []
    for mode in cfg.modes:
        if mode in ("original", "coarsening"):
            entries.append((mode, mode, None, None, cfg.adaptive.marking))
        elif mode == "direct":
            for rb in cfg.rbuf:
                entries.append((f"{mode}-b{rb}", mode, rb, None, cfg.adaptive.marking))
        else:
            for rb in cfg.rbuf:
                for rw in cfg.rbld:
                    entries.append((f"{mode}-b{rb}-w{rw:g}", mode, rb, rw, cfg.adaptive.marking))
    for base in cfg.baselines:
        entries.append((base, "original", None, None, "all"))
    return entries


def _reference_path(out: Path, case: str, radius: int) -> Path:
    return out / f"ref_{case}_R{radius}.npz"


def _load_bank(cfg: ExperimentConfig, out: Path, loading, params):
    """Reference solutions on disk feed the bank; missing radii are solved
    on demand and saved back, so sweep entries share one set of relaxations."""
    if cfg.errors != "inline":
        return False
    bank = adaptive.ReferenceBank(params, loading, cfg.adaptive.solver)
    for path in sorted(out.glob(f"ref_{cfg.case}_R*.npz")):
        data = np.load(path)
        if int(data["radius"]) >= cfg.radius:
            bank.put(int(data["radius"]), data["u"])
    return bank


def _save_bank(bank, cfg: ExperimentConfig, out: Path) -> None:
    if not isinstance(bank, adaptive.ReferenceBank):
        return
    for radius in sorted(bank.solved):
        path = _reference_path(out, cfg.case, radius)
        if not path.exists():
            lat = build_case(cfg.case, radius)[0]
            np.savez(path, case=cfg.case, radius=radius,
                     coords=lat.coords, u=bank.cache[radius])


def _step_row(run_id, mode, r_buf, r_bld, s) -> list:
    return [
        run_id, mode,
        "" if r_buf is None else str(int(r_buf)),
        "" if r_bld is None else _num(r_bld),
        str(s.index), str(s.n_free),
        "" if np.isnan(s.error) else _num(s.error),
        _num(s.rho), _num(s.eta_tr), _num(s.eta_mo), _num(s.eta_cg),
        _num(s.solve_seconds), _num(s.estimate_seconds),
    ]


def _action(s) -> str:
    if s.stopped:
        return f"stopped({s.stopped})"
    parts = []
    if s.enlarged:
        parts.append("enlarged")
    if s.expanded:
        parts.append(f"expanded({s.expanded})")
    if s.n_split:
        parts.append(f"refined({s.n_split})")
    return "+".join(parts) if parts else "none"


def cmd_run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    failed = False
    for run_id_suffix, mode, r_buf, r_bld, marking in _sweep_entries(cfg):
        run_id = f"{cfg.case}-{run_id_suffix}"
        run_dir = out / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        lat, loading = build_case(cfg.case, cfg.radius)
        mesh = CoarseMesh(lat, cfg.adaptive.mesh)
        params = EamParams()
        acfg = replace(
            cfg.adaptive,
            marking=marking,
            estimator=replace(
                cfg.adaptive.estimator,
                mode=mode,
                r_buf=r_buf if r_buf is not None else cfg.adaptive.estimator.r_buf,
                r_bld=r_bld if r_bld is not None else cfg.adaptive.estimator.r_bld,
            ),
        )
        bank = _load_bank(cfg, out, loading, params)
        result = adaptive.run(mesh, loading, params, acfg, reference=bank,
                              out_dir=str(run_dir), snapshots=cfg.snapshots)
        _save_bank(bank, cfg, out)

        def opt(x):
            return None if np.isnan(x) else float(x)

        manifest = {
            "run_id": run_id,
            "case": cfg.case,
            "mode": mode,
            "R_buf": r_buf,
            "R_bld": r_bld,
            "marking": marking,
            "seed": cfg.seed,
            "initial_radius": cfg.radius,
            "n_max": cfg.nmax,
            "steps": [
                {
                    "index": s.index,
                    "N": s.n_free,
                    "radius": s.radius,
                    "rho": opt(s.rho),
                    "eta_tr": opt(s.eta_tr),
                    "eta_mo": opt(s.eta_mo),
                    "eta_cg": opt(s.eta_cg),
                    "error": opt(s.error),
                    "regions": s.regions,
                    "action": _action(s),
                    "t_solve": float(s.solve_seconds),
                    "t_estimate": float(s.estimate_seconds),
                    "snapshot": s.snapshot,
                }
                for s in result.steps
            ],
        }
        with open(run_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1)
            fh.write("\n")
        for s in result.steps:
            rows.append(_step_row(run_id, mode, r_buf, r_bld, s))
        if any(s.stopped == "solver" for s in result.steps):
            failed = True
    with open(out / "summary.csv", "w") as fh:
        fh.write(", ".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(", ".join(row) + "\n")
    return 3 if failed else 0


# --------------------------------------------------------------- reference

def _spoke_profile(lat, u):
    """|Du| sampled along the six lattice directions from the origin."""
    _, mag_all = difference_magnitudes(lat, u)
    per_site = np.zeros(lat.n_sites)
    per_site[~lat.is_vacant] = mag_all
    rows = []
    for spoke, step in enumerate(NEIGHBOR_STEPS):
        ks = np.arange(1, lat.radius + 1)
        ij = ks[:, None] * np.asarray(step)[None, :]
        idx = lat.site_index(ij)
        ok = idx >= 0
        for k, site in zip(ks[ok], idx[ok]):
            if not lat.is_vacant[site]:
                rows.append((spoke, int(k), float(np.linalg.norm(lat.pos[site])),
                             per_site[site]))
    return rows


def cmd_reference(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lat, loading = build_case(cfg.case, cfg.radius)
    params = EamParams()
    res = solve_reference(lat, params, loading, cfg.adaptive.solver)
    if not res.converged:
        print(f"reference relaxation failed at radius {cfg.radius}", file=sys.stderr)
        return 3
    np.savez(_reference_path(out, cfg.case, cfg.radius),
             case=cfg.case, radius=cfg.radius, coords=lat.coords, u=res.u)
    with open(out / f"decay_{cfg.case}_R{cfg.radius}.csv", "w") as fh:
        fh.write("spoke, k, r, mag\n")
        for spoke, k, r, mag in _spoke_profile(lat, res.u):
            fh.write(f"{spoke}, {k}, {_num(r)}, {_num(mag)}\n")
    print(f"reference {cfg.case} R={cfg.radius}: iterations={res.iterations} "
          f"force={_num(res.force_norm)}")
    return 0


# ------------------------------------------------------------------ verify

def cmd_verify(filter_text: str | None, fault: str | None, seed: int) -> int:
    from .verify import run_suite

    results = run_suite(filter_text=filter_text, fault=fault, seed=seed)
    width = max(len(name) for name, _, _ in results) if results else 10
    ok = True
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<{width}}  {status}  {detail}")
        ok &= passed
    if not results:
        print("no checks matched the filter", file=sys.stderr)
        return 2
    return 0 if ok else 1


# ------------------------------------------------------------------ report

def _read_summary(path):
    with open(path) as fh:
        header = [h.strip() for h in fh.readline().split(",")]
        rows = []
        for line in fh:
            if line.strip():
                rows.append([c.strip() for c in line.split(",")])
    return header, rows


def _fit_slope(n, e):
    n = np.asarray(n, dtype=float)
    e = np.asarray(e, dtype=float)
    keep = (n > 0) & (e > 0)
    if keep.sum() < 2:
        return np.nan
    A = np.stack([np.log(n[keep]), np.ones(int(keep.sum()))], axis=1)
    return float(np.linalg.lstsq(A, np.log(e[keep]), rcond=None)[0][0])


def cmd_report(out_dir: str) -> int:
    out = Path(out_dir)
    summary = out / "summary.csv"
    if not summary.exists():
        print(f"no summary.csv under {out_dir!r}", file=sys.stderr)
        return 2
    header, rows = _read_summary(summary)
    col = {name: k for k, name in enumerate(header)}
    runs: dict[str, list] = {}
    for row in rows:
        runs.setdefault(row[col["run_id"]], []).append(row)
    lines = ["run_id, steps, final_N, final_error, final_rho, effectivity, error_slope"]
    for run_id in sorted(runs):
        steps = runs[run_id]
        last = steps[-1]
        n = [r[col["N"]] for r in steps]
        e = [r[col["error"]] or "nan" for r in steps]
        slope = _fit_slope(n, e)
        err = float(last[col["error"]]) if last[col["error"]] else np.nan
        rho = float(last[col["rho"]])
        eff = rho / err if err and not np.isnan(err) and err > 0 else np.nan
        lines.append(", ".join([
            run_id, str(len(steps)), last[col["N"]],
            "" if np.isnan(err) else _num(err), _num(rho),
            "" if np.isnan(eff) else _num(eff),
            "" if np.isnan(slope) else _num(slope),
        ]))
    text = "\n".join(lines) + "\n"
    with open(out / "report.csv", "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


# -------------------------------------------------------------------- main

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acoupler",
        description="Adaptive atomistic/continuum coupling experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, radius_default=None):
        p.add_argument("--config", help="INI experiment file; flags override")
        p.add_argument("--case", choices=CASES)
        p.add_argument("--mode", choices=est.MODES)
        p.add_argument("--rbuf", type=int, help="buffer width in atomic layers")
        p.add_argument("--rbld", type=float, help="blending width")
        p.add_argument("--radius", type=int, default=radius_default)
        p.add_argument("--nmax", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--snapshots", action="store_true")
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("run", help="execute the adaptive sweep"))
    common(sub.add_parser("reference", help="relax and store a ground-truth solution"))

    ver = sub.add_parser("verify", help="run the invariant suite")
    ver.add_argument("--filter", help="substring selecting checks")
    ver.add_argument("--fault", choices=("diag",),
                     help="inject a known defect to exercise failure detection")
    ver.add_argument("--seed", type=int, default=0)

    rep = sub.add_parser("report", help="condense summary rows into fit statistics")
    rep.add_argument("--out", default="runs")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.command == "verify":
        return cmd_verify(args.filter, args.fault, args.seed)
    if args.command == "report":
        return cmd_report(args.out)
    try:
        cfg = load_config(args.config, args)
    except (ValueError, KeyError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        return cmd_run(cfg)
    return cmd_reference(cfg)


if __name__ == "__main__":
    sys.exit(main())
