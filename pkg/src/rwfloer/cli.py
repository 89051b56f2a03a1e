"""Experiment driver: one JSON config, resumable stages and certificate tables.

Every stage writes into ``output_dir`` and records SHA-256 checksums of its
artifacts in ``manifest.json``.  Artifacts are named by a content hash of the
config section that produced them, so reruns skip finished work and any
change of parameters produces new files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from .floer import ContinuationStall, cylinder_summary, solve_cylinder
from .fokker_planck import FPGrid, NonConvergence, density_measure, fp_apply, periodic_solve, weak_residual
from .measure_lab import (accumulate, axis_distances, grid_bound, measure_distance, tightness_report,
                          write_marginals_csv, write_measure)
from .orbit_solver import (FamilyCollapse, OrbitError, load_ensemble, orbit_labels,
                           save_ensemble, solve_ensemble)
from .sample_space import clt_distance, ensemble_summary, make_walk, sample_coins
from .torus_phase import HamiltonianSpec, pendulum, product_cosine

log = logging.getLogger("rwfloer")

ENERGY_SLACK = 1e-3

PRESETS = {
    "pendulum": lambda: pendulum(0.1),
    "free": lambda: HamiltonianSpec(1),
    "product": lambda: product_cosine(),
}


class ChecksumError(RuntimeError):
    def __init__(self, path):
        super().__init__(f"checksum mismatch or unregistered artifact: {path}")
        self.path = str(path)


@dataclass
class ExperimentConfig:
    spec: HamiltonianSpec
    sigma: float = 0.3
    n_ladder: list = field(default_factory=lambda: [64, 128, 256, 512])
    M: int = 1000
    seed: int = 11
    grids: dict = field(default_factory=lambda: {"measure": [64, 64, 64], "fp": [64, 64]})
    floer: dict | None = None
    output_dir: str = "runs/default"
    seeding: str = "averaged"

    def __post_init__(self):
        self.n_ladder = [int(n) for n in self.n_ladder]
        if not self.n_ladder:
            raise ValueError("n_ladder must not be empty")
        if any(b <= a for a, b in zip(self.n_ladder, self.n_ladder[1:])):
            raise ValueError("n_ladder must be strictly increasing")
        if min(self.n_ladder) < 1:
            raise ValueError("step counts must be positive")
        if int(self.M) < 1:
            raise ValueError("M must be at least 1")
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be finite and nonnegative")
        if self.spec.d > 2:
            raise ValueError("measures and Fokker-Planck grids support d <= 2")
        if self.seeding not in ("grid", "averaged"):
            raise ValueError("seeding must be 'grid' or 'averaged'")
        self.M = int(self.M)
        grids = {"measure": [64, 64, 64], "fp": [64, 64]}
        grids.update(self.grids or {})
        self.grids = {k: [int(x) for x in v] for k, v in grids.items()}
        if len(self.grids["measure"]) != 3 or len(self.grids["fp"]) != 2:
            raise ValueError("grids: measure is [T, nq, np], fp is [nq, np]")
        if min(self.grids["measure"] + self.grids["fp"]) < 2:
            raise ValueError("grid dimensions must be at least 2")
        if self.floer is not None:
            fl = {"S": 8.0, "Ns": 200, "Nt": 129, "tau_steps": 8, "samples": 32,
                  "n": 256 if 256 in self.n_ladder else self.n_ladder[0]}
            fl.update(self.floer)
            self.floer = fl

    def to_dict(self) -> dict:
        out = asdict(self)
        out["spec"] = self.spec.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        spec = data.pop("spec", "pendulum")
        spec = PRESETS[spec]() if isinstance(spec, str) else HamiltonianSpec.from_dict(spec)
        return cls(spec=spec, **data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def section_key(self, section: str, **extra) -> str:
        """Content hash of the fields a stage depends on, plus the seed."""
        base = {"spec": self.spec.to_dict(), "sigma": self.sigma, "seed": self.seed,
                "M": self.M, "seeding": self.seeding}
        if section == "measure":
            base["grids"] = self.grids
        elif section == "floer":
            base["floer"] = self.floer
        elif section == "fp":
            base["fp"] = self.grids["fp"]
            base["T"] = self.grids["measure"][0]
        base.update(extra)
        blob = json.dumps({section: base}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Store:
    """Output directory with a checksum manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, rel):
        self.manifest[str(rel)] = _sha(self.root / rel)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")

    def has(self, rel) -> bool:
        """True when ``rel`` exists and matches its checksum; raises on a mismatch."""
        p = self.root / rel
        if not p.exists():
            return False
        if self.manifest.get(str(rel)) != _sha(p):
            raise ChecksumError(p)
        return True

    def write_json(self, rel, obj):
        self.path(rel).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")
        self.register(rel)

    def write_rows(self, rel, header, rows):
        with open(self.path(rel), "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for r in rows:
                out.writerow([_fmt(r.get(h, "")) for h in header])
        self.register(rel)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _ensemble_rel(cfg, n):
    return f"orbits/n{n}_{cfg.section_key('orbits', n=n)}.jsonl"


def _strictly_decreasing(xs):
    return len(xs) >= 2 and all(b < a for a, b in zip(xs, xs[1:]))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_sample(cfg: ExperimentConfig) -> dict:
    """Walk statistics per n: Hölder quantiles and the KS distance of W(1) to N(0, 1)."""
    store = Store(cfg.output_dir)
    rows = []
    for n in cfg.n_ladder:
        for alpha in (0.25, 0.75):
            rec = ensemble_summary(n, cfg.spec.d, cfg.seed, alpha, cfg.M)
            for q, v in rec["quantiles"].items():
                rows.append({"section": "holder", "n": n, "M": cfg.M, "seed": cfg.seed, "alpha": alpha,
                             "quantity": f"q{q}", "value": v})
        if cfg.M >= 100:
            rows.append({"section": "clt", "n": n, "M": cfg.M, "seed": cfg.seed, "quantity": "ks_W1",
                         "value": clt_distance(n, 1.0, cfg.M, cfg.seed)})
    store.write_rows("sample/walks.csv", ["section", "n", "M", "seed", "alpha", "quantity", "value"], rows)
    result = {"stage": "sample", "passed": True, "rows": len(rows),
              "notes": [] if cfg.M >= 100 else ["M < 100: KS distances omitted"]}
    store.write_json("sample/result.json", result)
    return result


def _orbit_ensembles(cfg, store, solve=True):
    out = {}
    for n in cfg.n_ladder:
        rel = _ensemble_rel(cfg, n)
        if store.has(rel):
            log.info("n=%d: reusing %s", n, rel)
            out[n] = load_ensemble(store.root / rel)
            continue
        if not solve:
            raise FileNotFoundError(f"missing orbit ensemble for n={n} ({rel}); run 'orbits' first")
        log.info("n=%d: solving %d samples", n, cfg.M)
        ens = solve_ensemble(cfg.spec, cfg.sigma, n, cfg.seed, cfg.M,
                             steps=1 if cfg.seeding == "averaged" else 32, seeding=cfg.seeding)
        save_ensemble(ens, store.path(rel))
        store.register(rel)
        out[n] = ens
    return out


def run_orbits(cfg: ExperimentConfig) -> dict:
    """Orbit ensembles per n and the action-chain table."""
    store = Store(cfg.output_dir)
    ensembles = _orbit_ensembles(cfg, store)
    d = cfg.spec.d
    labels = orbit_labels(d)
    rows, ok = [], True
    for n, ens in ensembles.items():
        base = {"n": n, "M": ens.M, "seed": cfg.seed, "sigma": cfg.sigma}
        for lab in labels:
            a = ens.action[lab][ens.valid(lab)]
            if a.size:
                q = np.quantile(a, [0.01, 0.5, 0.99])
                rows.append({**base, "label": lab, "found": a.size / ens.M, "mean": a.mean(),
                             "q01": q[0], "q50": q[1], "q99": q[2]})
        complete = ens.count >= d + 1
        frac = float(complete.mean())
        if cfg.spec.is_free:
            w1 = np.array([make_walk(sample_coins(n, d, cfg.seed, int(i))).end for i in ens.indices[:1000]])
            ref = 0.5 * cfg.sigma**2 * float(np.mean(np.sum(w1**2, axis=1)))
            rows.append({**base, "label": "morse_bott", "found": 1.0, "mean": ref})
            continue
        acts = np.stack([ens.action[lab] for lab in labels], axis=1)[complete]
        margin = np.diff(acts, axis=1).min(axis=1) if acts.size else np.array([np.nan])
        rows.append({**base, "label": "gap_margin", "found": frac, "mean": float(np.mean(margin)),
                     "q01": float(np.quantile(margin, 0.01)), "q50": float(np.median(margin)),
                     "q99": float(np.min(margin))})
        need = 0.99 if d == 1 else 0.95
        ok &= frac >= need and bool(np.all(margin > 0))
    store.write_rows("orbits/summary.csv",
                     ["n", "M", "seed", "sigma", "label", "found", "mean", "q01", "q50", "q99"], rows)
    result = {"stage": "orbits", "passed": bool(ok), "morse_bott": cfg.spec.is_free,
              "files": {str(n): _ensemble_rel(cfg, n) for n in ensembles}}
    store.write_json("orbits/result.json", result)
    return result


def _fp_measure(cfg):
    T = cfg.grids["measure"][0]
    nq, np_ = cfg.grids["fp"]
    P = grid_bound(cfg.spec, cfg.sigma)
    base = FPGrid.build(cfg.spec, cfg.sigma, nq, np_, P)
    nt = int(math.ceil(base.nt / T) * T)
    grid = FPGrid(cfg.spec, cfg.sigma, nq, np_, P, nt)
    sol = periodic_solve(grid, power_iters=3000)
    return grid, sol, sol.to_measure(T)


def run_convergence(cfg: ExperimentConfig) -> dict:
    """Measures per n, the Cauchy ladder, tightness, weak residuals and the FP cross-check."""
    store = Store(cfg.output_dir)
    ensembles = _orbit_ensembles(cfg, store, solve=False)
    labels = orbit_labels(cfg.spec.d)
    bins = tuple(cfg.grids["measure"])
    P = grid_bound(cfg.spec, cfg.sigma)
    grid_tag = "x".join(map(str, bins))
    rows, notes = [], []
    measures = {}
    for n, ens in ensembles.items():
        for lab in labels:
            if not ens.valid(lab).any():
                continue
            m = accumulate(ens, bins, label=lab, P=P)
            measures[n, lab] = m
            rel = f"measures/n{n}_{lab}_{cfg.section_key('measure', n=n)}.rwfm"
            write_measure(m, store.path(rel))
            store.register(rel)
            base = {"n": n, "M": m.meta["M"], "seed": cfg.seed, "grid": grid_tag, "label": lab}
            rows.append({**base, "section": "weak_residual", "quantity": "rms",
                         "value": weak_residual(m, cfg.spec, cfg.sigma)})
        rows_t = np.flatnonzero(ens.valid(labels[0]))[:2000]
        if rows_t.size:
            rep = tightness_report(ens, labels[0], 0.25, rows=rows_t, quantiles=(0.99,))
            base = {"n": n, "M": rep["M"], "seed": cfg.seed, "grid": grid_tag, "label": labels[0]}
            rows.append({**base, "section": "tightness", "quantity": "c0_q99", "value": rep["c0"]["0.99"]})
            rows.append({**base, "section": "tightness", "quantity": "holder025_q99",
                         "value": rep["holder"]["0.99"]})
        walk = ensemble_summary(n, cfg.spec.d, cfg.seed, 0.75, min(cfg.M, 2000), quantiles=(0.99,))
        rows.append({"n": n, "M": walk["samples"], "seed": cfg.seed, "grid": "", "label": "walk",
                     "section": "tightness", "quantity": "walk_holder075_q99",
                     "value": walk["quantiles"]["0.99"]})
    flags = {}
    ladder = list(ensembles)
    if len(ladder) < 2:
        notes.append("single-n ladder: Cauchy section omitted")
    else:
        for lab in labels:
            dists = []
            for a, b in zip(ladder, ladder[1:]):
                if (a, lab) in measures and (b, lab) in measures:
                    dist = measure_distance(measures[a, lab], measures[b, lab])
                    dists.append(dist)
                    rows.append({"n": a, "M": cfg.M, "seed": cfg.seed, "grid": grid_tag, "label": lab,
                                 "section": "cauchy", "quantity": f"distance_to_n{b}", "value": dist})
            flags[f"cauchy_decreasing_{lab}"] = _strictly_decreasing(dists)
        for lab in labels:
            weak = [r["value"] for r in rows if r["section"] == "weak_residual" and r["label"] == lab]
            flags[f"weak_decreasing_{lab}"] = _strictly_decreasing(weak)
    try:
        grid, sol, fpm = _fp_measure(cfg)
        top = ladder[-1]
        for lab in labels:
            if (top, lab) in measures:
                ax = axis_distances(measures[top, lab], fpm).mean(axis=0)
                widths = np.array(measures[top, lab].bin_widths())
                rows.append({"n": top, "M": cfg.M, "seed": cfg.seed, "grid": grid_tag, "label": lab,
                             "section": "fp_crosscheck", "quantity": "sliced_w1_bin_widths",
                             "value": float(np.max(ax / widths))})
        write_marginals_csv(fpm, store.path("measures/fp_marginals.csv"))
        store.register("measures/fp_marginals.csv")
    except NonConvergence as exc:
        notes.append(f"periodic_solve did not converge: {exc}")
    store.write_rows("convergence/report.csv",
                     ["section", "n", "M", "seed", "grid", "label", "quantity", "value"], rows)
    result = {"stage": "convergence", "passed": bool(flags) and all(flags.values()), "flags": flags,
              "notes": notes}
    store.write_json("convergence/result.json", result)
    return result


def run_floer(cfg: ExperimentConfig) -> dict:
    """Cylinders for the first ``floer.samples`` samples and the energy-action certificate."""
    if cfg.spec.d != 1:
        raise ValueError("Floer cylinders are restricted to d = 1 (floer_continuation scope)")
    fl = cfg.floer or ExperimentConfig(spec=cfg.spec, n_ladder=cfg.n_ladder, floer={}).floer
    store = Store(cfg.output_dir)
    key = cfg.section_key("floer", floer=fl)
    rel = f"floer/certificates_{key}.csv"
    rows, failures = [], []
    for i in range(int(fl["samples"])):
        w = make_walk(sample_coins(int(fl["n"]), 1, cfg.seed, i))
        row = {"n": fl["n"], "seed": cfg.seed, "sample": i, "S": fl["S"], "Ns": fl["Ns"], "Nt": fl["Nt"]}
        try:
            cyl = solve_cylinder(cfg.spec, w, cfg.sigma, 1, float(fl["S"]), int(fl["Ns"]), int(fl["Nt"]),
                                 int(fl["tau_steps"]))
        except (ContinuationStall, FamilyCollapse, OrbitError) as exc:
            row["status"] = f"{type(exc).__name__}: {exc}"
            failures.append(row)
            rows.append(row)
            continue
        s = cylinder_summary(cyl)
        gap = s["action_gap"]
        row.update(energy=s["energy"], action_gap=gap, slack=gap - s["energy"], residual=s["residual"])
        if cfg.spec.is_free:
            ok = s["energy"] <= ENERGY_SLACK and abs(gap) <= ENERGY_SLACK
            row["status"] = "degenerate family" if ok else "degenerate family: nonzero energy"
        else:
            ok = (s["energy"] <= gap + ENERGY_SLACK and s["energy"] >= ENERGY_SLACK
                  and s["residual"] < 1e-8)
            row["status"] = "certified" if ok else "failed"
        if not ok:
            failures.append(row)
        rows.append(row)
    store.write_rows(rel, ["n", "seed", "sample", "S", "Ns", "Nt", "energy", "action_gap", "slack",
                           "residual", "status"], rows)
    if cfg.spec.is_free:
        certificate = "degenerate Morse-Bott family: energies and gaps vanish" if not failures else "failures"
    else:
        certificate = "all gaps certified strict" if not failures else f"{len(failures)} failures"
    result = {"stage": "floer", "passed": not failures, "certificate": certificate, "table": rel,
              "failures": [f["sample"] for f in failures]}
    store.write_json("floer/result.json", result)
    return result


def run_fpcheck(cfg: ExperimentConfig) -> dict:
    """Stationarity of the analytic profile (F empty) or the periodic solve alone."""
    store = Store(cfg.output_dir)
    nq, np_ = cfg.grids["fp"]
    P = grid_bound(cfg.spec, cfg.sigma)
    grid = FPGrid.build(cfg.spec, cfg.sigma, nq, np_, P)
    out = {"stage": "fpcheck", "nq": nq, "np": np_, "P": P, "nt": grid.nt, "cfl": grid.cfl_numbers()}
    ok = True
    try:
        sol = periodic_solve(grid, power_iters=3000)
        out.update(iterations=sol.iterations, defect=sol.defect)
    except NonConvergence as exc:
        out["error"] = str(exc)
        ok = False
        sol = None
    if cfg.spec.is_free:
        prof = grid.gaussian_profile()
        l1 = float(np.abs(fp_apply(prof, grid, 0.0)).sum() * grid.cell)
        out["stationary_l1"] = l1
        ok &= l1 < 1e-3
        if sol is not None:
            T = 8
            a = density_measure(prof, grid, T)
            b = density_measure(sol.slices[0], grid, T)
            ax = axis_distances(a, b).mean(axis=0)
            widths = np.array([grid.dq] * grid.d + [grid.dp] * grid.d)
            out["distance_bin_widths"] = float(np.max(ax / widths))
            ok &= out["distance_bin_widths"] < 2.0
    out["passed"] = bool(ok)
    store.write_json("fpcheck/result.json", out)
    return out


def run_report(cfg: ExperimentConfig) -> dict:
    store = Store(cfg.output_dir)
    stages = {}
    for name in ("sample", "orbits", "convergence", "floer", "fpcheck"):
        rel = f"{name}/result.json"
        if store.has(rel):
            stages[name] = json.loads((store.root / rel).read_text())
    result = {"stage": "report", "stages": {k: v.get("passed", False) for k, v in stages.items()},
              "passed": bool(stages) and all(v.get("passed", False) for v in stages.values())}
    store.write_json("report.json", result)
    return result


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON config; flags below override its fields."),
        click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
                     help="Hamiltonian preset when no config spec is given."),
        click.option("--sigma", type=float, default=None),
        click.option("--n-ladder", default=None, help="Comma separated, strictly increasing."),
        click.option("--M", "M", type=int, default=None, help="Samples per n."),
        click.option("--seed", type=int, default=None),
        click.option("--bins", default=None, help="Measure grid T,nq,np."),
        click.option("--fp-grid", default=None, help="Fokker-Planck grid nq,np."),
        click.option("--seeding", type=click.Choice(["averaged", "grid"]), default=None),
        click.option("--S", "S", type=float, default=None),
        click.option("--Ns", "Ns", type=int, default=None),
        click.option("--Nt", "Nt", type=int, default=None),
        click.option("--tau-steps", type=int, default=None),
        click.option("--floer-samples", type=int, default=None),
        click.option("--output-dir", "-o", default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def build_config(config_path=None, preset=None, sigma=None, n_ladder=None, M=None, seed=None, bins=None,
                 fp_grid=None, seeding=None, S=None, Ns=None, Nt=None, tau_steps=None,
                 floer_samples=None, output_dir=None) -> ExperimentConfig:
    data = json.loads(Path(config_path).read_text()) if config_path else {}
    if preset:
        data["spec"] = preset
    data.setdefault("spec", "pendulum")
    for key, val in (("sigma", sigma), ("M", M), ("seed", seed), ("seeding", seeding),
                     ("output_dir", output_dir)):
        if val is not None:
            data[key] = val
    if n_ladder is not None:
        data["n_ladder"] = _ints(n_ladder)
    grids = dict(data.get("grids") or {})
    if bins is not None:
        grids["measure"] = _ints(bins)
    if fp_grid is not None:
        grids["fp"] = _ints(fp_grid)
    data["grids"] = grids
    fl = {k: v for k, v in (("S", S), ("Ns", Ns), ("Nt", Nt), ("tau_steps", tau_steps),
                            ("samples", floer_samples)) if v is not None}
    if fl or "floer" in data:
        data["floer"] = {**(data.get("floer") or {}), **fl}
    return ExperimentConfig.from_dict(data)


def _run(stage, kwargs, needs_floer=False):
    try:
        cfg = build_config(**kwargs)
        if needs_floer and cfg.floer is None:
            cfg.floer = ExperimentConfig(spec=cfg.spec, n_ladder=cfg.n_ladder, floer={}).floer
        store = Store(cfg.output_dir)
        store.write_json("config.json", cfg.to_dict())
        result = stage(cfg)
    except (ValueError, FileNotFoundError, ChecksumError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(result, indent=1, sort_keys=True, default=_jsonable))
    sys.exit(0 if result.get("passed") else 1)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Random-walk Hamiltonian orbits: sampling, orbits, cylinders, measures and Fokker-Planck checks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@config_options
def sample(**kw):
    """Walk statistics along the n-ladder."""
    _run(run_sample, kw)


@main.command()
@config_options
def orbits(**kw):
    """Orbit ensembles and the action-chain table."""
    _run(run_orbits, kw)


@main.command()
@config_options
def floer(**kw):
    """Connecting cylinders and the energy-action certificate (d = 1)."""
    _run(run_floer, kw, needs_floer=True)


@main.command()
@config_options
def measure(**kw):
    """Empirical measures, Cauchy ladder, tightness and weak residuals."""
    _run(run_convergence, kw)


@main.command()
@config_options
def fpcheck(**kw):
    """Fokker-Planck stationarity and periodic solve."""
    _run(run_fpcheck, kw)


@main.command()
@config_options
def report(**kw):
    """Collect stage results; exit 0 only when every recorded certificate passed."""
    _run(run_report, kw)


if __name__ == "__main__":
    main()
