"""Command-line entry point: named experiments writing CSV / PGM / JSON artifacts.

    phds build-calzone --config calzone.cfg
    phds fuller-demo --flow annulus2 --N 20
    phds acceptance --threads 4

Configuration files hold UTF-8 ``key = value`` lines with ``#`` comments;
``--set key=value`` overrides single entries.  Every run writes
``manifest.json`` next to its artifacts, listing each file with its sha256.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__

log = logging.getLogger("phds")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration

def _matrix(text: str):
    vals = [int(v) for v in text.replace(";", ",").split(",")]
    if len(vals) != 4:
        raise ValueError("matrix needs four integers a,b,c,d")
    return ((vals[0], vals[1]), (vals[2], vals[3]))


def _int_list(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _positive(v):
    if not v > 0:
        raise ValueError("must be positive")


def _lam(v):
    if not 0 < v < 0.5:
        raise ValueError("lambda must lie in (0, 1/2)")


def _choice(*opts):
    def check(v):
        if v not in opts:
            raise ValueError(f"must be one of {', '.join(opts)}")
    return check


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: object
    check: Callable | None = None
    help: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, help="seed of the single sampling generator"),
    "threads": Key(int, 1, _positive, "worker cap"),
    "out": Key(str, None, help="output directory"),
    # calzone
    "matrix": Key(_matrix, ((2, 1), (1, 1))),
    "lam": Key(float, 0.1, _lam),
    "C": Key(float, 15.0, _positive),
    "beta0": Key(float, 1.5, _positive),
    "deform_radius": Key(float, 0.4, _positive),
    "deform_strength": Key(float, 2.2, _positive),
    "c_min": Key(float, 0.25, _positive),
    "r_in": Key(float, 0.02, _positive),
    "r_out": Key(float, 0.045, _positive),
    "grid": Key(int, 256, _positive, "torus grid size"),
    "basin_grid": Key(int, 256, _positive),
    "basin_max_iter": Key(int, 200, _positive),
    "basin_tol": Key(float, 1e-3, _positive),
    "torus_tol": Key(float, 1e-8, _positive),
    "max_iter": Key(int, 500, _positive),
    # cones
    "iterate_m": Key(int, 6, _positive),
    "cells": Key(int, 6250, _positive),
    "n_dir": Key(int, 16, _positive),
    # fuller
    "flow": Key(str, "logistic", _choice("logistic", "logistic-reversed", "annulus2")),
    "g": Key(str, "default", _choice("default", "zero", "one")),
    "ell": Key(float, None, _positive),
    "N": Key(int, 30, _positive),
    "seeds": Key(int, 64, _positive),
    "root_tol": Key(float, 1e-10, _positive),
    "steps_per_unit": Key(int, 1024, _positive),
    # phcross
    "system": Key(str, "mock", _choice("mock", "calzone")),
    "seed_grid": Key(int, 16, _positive),
    "pipeline_grid": Key(int, 128, _positive),
    # semiconj
    "lift": Key(str, "perturbed", _choice("linear", "perturbed", "da")),
    "eps": Key(float, 0.02),
    "N_terms": Key(int, 40, _positive),
    "samples": Key(int, 1000, _positive),
    "lv_system": Key(str, "linear", _choice("linear", "collar", "calzone-reflected")),
    "lv_steps": Key(int, 6, _positive),
    # acceptance
    "criteria": Key(_int_list, ()),
}


def defaults() -> dict:
    return {k: v.default for k, v in SCHEMA.items()}


def _set(cfg: dict, key: str, raw: str, where: str):
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key '{key}'")
    spec = SCHEMA[key]
    try:
        val = spec.parse(raw.strip())
        if spec.check:
            spec.check(val)
    except ValueError as exc:
        raise ConfigError(f"{where}: {key}: {exc}") from None
    cfg[key] = val


def parse_config(text: str, source: str = "<config>", cfg: dict | None = None) -> dict:
    cfg = defaults() if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = body.split("=", 1)
        _set(cfg, key, raw, f"{source}:{lineno}")
    return cfg


def load_config(path: str | None, overrides=(), cfg: dict | None = None) -> dict:
    cfg = defaults() if cfg is None else cfg
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        parse_config(text, path, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item}: expected key=value")
        k, v = item.split("=", 1)
        _set(cfg, k, v, f"--set {item}")
    return cfg


def calzone_params(cfg: dict):
    from .maps import CalzoneParams
    return CalzoneParams(matrix=cfg["matrix"], lam=cfg["lam"], C=cfg["C"], beta0=cfg["beta0"],
                         deform_radius=cfg["deform_radius"],
                         deform_strength=cfg["deform_strength"], c_min=cfg["c_min"],
                         r_in=cfg["r_in"], r_out=cfg["r_out"])


def validate(cfg: dict):
    """Reject parameter combinations the calzone construction cannot honour."""
    from .maps import build_calzone
    try:
        build_calzone(calzone_params(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# artifacts

class Artifacts:
    """Writes files into one directory and records them for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def _write(self, name: str, data: bytes):
        (self.root / name).write_bytes(data)
        if name not in self.files:
            self.files.append(name)

    def json(self, name: str, obj):
        self._write(name, (json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n").encode())

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self._write(name, buf.getvalue().encode())

    def pgm(self, name: str, img: np.ndarray):
        img = np.asarray(img, dtype=np.uint8)
        head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
        self._write(name, head + img.tobytes())

    def manifest(self, experiment: str, cfg: dict, status: str, error: str | None = None):
        entries = []
        for name in self.files:
            data = (self.root / name).read_bytes()
            entries.append({"path": name, "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
        man = {"experiment": experiment, "version": __version__, "status": status,
               "partial": status != "ok", "error": error, "artifacts": entries,
               "config": {k: v for k, v in cfg.items() if k not in ("out", "threads")}}
        (self.root / "manifest.json").write_text(
            json.dumps(_plain(man), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def _grid_rows(u: np.ndarray):
    n = u.shape[0]
    for i in range(n):
        for j in range(n):
            yield (i, j, i / n, j / n, float(u[i, j]))


# --------------------------------------------------------------------------
# experiments

def exp_build_calzone(cfg: dict, art: Artifacts) -> int:
    from . import graph_transform as gt, maps
    from .core import HeightGraph

    f = maps.build_calzone(calzone_params(cfg))
    basin = maps.compute_basin(f.g, grid_n=cfg["basin_grid"], max_iter=cfg["basin_max_iter"],
                               tol=cfg["basin_tol"], workers=cfg["threads"])
    img = np.select([basin.labels == maps.K_CELL, basin.labels == maps.B_CELL], [0, 255], 128)
    art.pgm("basin.pgm", img)
    n = basin.n
    art.csv("basin.csv", ["i", "j", "x1", "x2", "label", "entry_time"],
            ((i, j, i / n, j / n, int(basin.labels[i, j]), int(basin.entry_time[i, j]))
             for i in range(n) for j in range(n)))

    tori = {}
    for name, sign in (("t_plus", 1.0), ("t_minus", -1.0)):
        S, rep = gt.find_invariant_torus(f, HeightGraph.constant(cfg["grid"], sign),
                                         tol=cfg["torus_tol"], max_iter=cfg["max_iter"])
        if not rep.converged:
            raise RuntimeError(f"{name}: graph transform did not converge")
        tori[name] = (S, rep)
        art.csv(f"{name}.csv", ["i", "j", "x1", "x2", "u"], _grid_rows(S.u))
    up, um = tori["t_plus"][0], tori["t_minus"][0]
    report = {
        "basin": {"grid": n, "B_area": basin.area(maps.B_CELL), "K_area": basin.area(maps.K_CELL),
                  "undecided_area": basin.area(maps.UNDECIDED), "core_radius": basin.core_radius,
                  "alpha_disk_margin": basin.disk_margin(f.alpha.r_out)},
        "tori": {name: {**rep.to_dict(),
                        "invariance_residual": gt.invariance_residual(f, S),
                        "min": float(S.u.min()), "max": float(S.u.max())}
                 for name, (S, rep) in tori.items()},
        "symmetry_error": float(np.max(np.abs(up.u + um.u))),
        "intersection": {
            f"area_|u+ - u-|<{t:g}": float(np.mean(np.abs(up.u - um.u) < t))
            for t in (1e-12, 6e-8, 1e-4)},
        "separation": gt.pairwise_separation([up, um])[0],
    }
    if cfg["basin_grid"] == cfg["grid"]:
        report["zero_set_vs_K"] = {f"mismatch_{t:g}": gt.zero_set_mismatch(up, basin.in_K, t)
                                   for t in (3e-8, 1e-12)}
    art.json("intersection_report.json", report)
    return EXIT_OK


def exp_cone_certify(cfg: dict, art: Artifacts) -> int:
    from . import acceptance, cones

    ctx = acceptance.Context(calzone_params(cfg), grid_n=cfg["grid"], seed=cfg["seed"],
                             threads=cfg["threads"])
    P = acceptance.region_samples(ctx, cfg["cells"])
    adapted = cones.AdaptedCones(ctx.f, m=cfg["iterate_m"])
    rep = cones.certify_invariance(ctx.f, adapted, P, m=cfg["iterate_m"], n_dir=cfg["n_dir"],
                                   rng=ctx.rng)
    art.json("certification.json", rep.to_dict())
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def _flow_system(cfg: dict):
    from . import fuller

    step = 1.0 / cfg["steps_per_unit"]
    fs = {"logistic": lambda: fuller.logistic_flow(step=step),
          "logistic-reversed": lambda: fuller.logistic_flow(True, step=step),
          "annulus2": lambda: fuller.annulus2_flow(step=step)}[cfg["flow"]]()
    if cfg["g"] != "default":
        c = 0.0 if cfg["g"] == "zero" else 1.0
        fs.g = lambda x, c=c: np.full(np.shape(x)[:-1], c)
    if cfg["ell"] is not None:
        fs.ell = cfg["ell"]
    return fs


def exp_fuller_demo(cfg: dict, art: Artifacts) -> int:
    from . import fuller

    fs = _flow_system(cfg)
    k = cfg["seeds"]
    theta = np.arange(k) / k
    if cfg["flow"] == "annulus2":
        ys = np.array([0.5, 1.3, 2.2, 3.6])
        seeds = np.column_stack([np.tile(ys, k), np.repeat(theta, len(ys))])
        radius = 2.5 / k
    else:
        seeds = np.column_stack([np.full(k, 0.8), theta])
        radius = 2.5 / k
    sd = fuller.extract_section(fs, seeds, cfg["N"], cfg["root_tol"])
    sd = fuller.split_components(sd, radius)
    art.json("section.json", {**sd.to_dict(), "flow": fs.name,
                              "seed_classes": [None if c is None else list(c.pair)
                                               for c in sd.seed_classes]})
    header, rows = sd.csv_rows()
    art.csv("section.csv", header, rows)
    return EXIT_OK


def exp_phcross(cfg: dict, art: Artifacts) -> int:
    from . import fuller, maps

    if cfg["system"] == "mock":
        f, fs, s0 = fuller.MockPhcrossMap(), fuller.mock_flow(), 0.5
    else:
        f, fs, s0 = maps.build_calzone(calzone_params(cfg)), fuller.vertical_flow(center=0.25), 0.0
    Lam, rep = fuller.phcross_pipeline(f, fs, N=cfg["N"], s0=s0, seed_n=cfg["seed_grid"],
                                       grid_n=cfg["pipeline_grid"], max_iter=cfg["max_iter"])
    out = rep.to_dict()
    if cfg["system"] == "mock":
        out["sup_error_vs_exact"] = float(np.max(np.abs(Lam.u - f.invariant_graph(Lam.n).u)))
    art.csv("lambda.csv", ["i", "j", "x1", "x2", "u"], _grid_rows(Lam.u))
    art.json("pipeline_report.json", out)
    return EXIT_OK


def _lv_setup(cfg: dict, ev):
    from . import graph_transform as gt, maps, semiconj
    from .core import HeightGraph, LeafArc

    A = maps.make_linear(cfg["matrix"])
    if cfg["lv_system"] == "linear":
        f3 = semiconj.SkewLift(semiconj.linear_lift(A))
        pts = np.outer(np.linspace(0, 0.1, 11), np.append(A.e_u, 0.0))
    elif cfg["lv_system"] == "collar":
        f3 = semiconj.SkewLift(semiconj.linear_lift(A), maps.ProductMap(A, cfg["lam"]), inverse=True)
        pts = np.column_stack([np.full(11, 0.3), np.full(11, 0.6), np.linspace(20, 20.01, 11)])
    else:
        fc = maps.build_calzone(calzone_params(cfg))
        up, _ = gt.find_invariant_torus(fc, HeightGraph.constant(64, 1.0))
        x0 = np.array([0.01, 0.0])  # inside the alpha core, where u_+ = 1
        h = float(up.interp(x0[None, :])[0])
        f3 = semiconj.SkewLift(semiconj.da_lift(fc.g), maps.reflect(fc), inverse=True)
        pts = np.column_stack([np.full(41, x0[0]), np.full(41, x0[1]), np.linspace(-h, h, 41)])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return f3, LeafArc(pts, np.concatenate([[0.0], np.cumsum(seg)]), "E^u")


def exp_semiconj(cfg: dict, art: Artifacts) -> int:
    from . import maps, semiconj

    A = maps.make_linear(cfg["matrix"])
    if cfg["lift"] == "linear":
        G = semiconj.linear_lift(A)
    elif cfg["lift"] == "perturbed":
        G = semiconj.perturbed_lift(A, cfg["eps"])
    else:
        G = semiconj.da_lift(maps.build_calzone(calzone_params(cfg)).g)
    ev = semiconj.make_evaluator(G, cfg["N_terms"])
    rng = np.random.default_rng(cfg["seed"])
    x = rng.uniform(0, 1, (cfg["samples"], 2))
    z = rng.integers(-5, 6, (cfg["samples"], 2)).astype(float)
    Hu = semiconj.compute_Hu(ev, G, x)
    Hs = semiconj.compute_Hs(ev, G, x)
    slc = semiconj.stable_leaf_constancy(G, ev, np.array([0.3, 0.6]), 1.0)
    report = {
        "lift": G.name, "lambda": ev.lam, "pi_u": ev.pi_u, "pi_s": ev.pi_s,
        "N_terms": ev.N_terms, "R_bound": ev.R_bound,
        "max_|Hu-pi_u|": float(np.max(np.abs(Hu - x @ ev.pi_u))),
        "commutation_u": float(np.max(semiconj.commutation_residual(ev, G, x))),
        "commutation_s": float(np.max(np.abs(semiconj.compute_Hs(ev, G, G(x)) - ev.mu * Hs))),
        "lattice_u": float(np.max(np.abs(semiconj.compute_Hu(ev, G, x + z) - Hu - z @ ev.pi_u))),
        "lattice_s": float(np.max(np.abs(semiconj.compute_Hs(ev, G, x + z) - Hs - z @ ev.pi_s))),
        "brute_force_30": float(np.max(np.abs(semiconj.brute_force_Hu(ev, G, x[:100], 30) - Hu[:100]))),
        "stable_leaf_spread": slc.spread,
    }
    f3, J = _lv_setup(cfg, ev)
    table = semiconj.length_volume_diagnostic(f3, J, cfg["lv_steps"], ev.pi_u, ev.pi_s)
    report["length_volume"] = {"system": cfg["lv_system"], "truncated": table.truncated}
    art.csv("length_volume.csv", table.columns, table.rows)
    art.json("semiconj_report.json", report)
    return EXIT_OK


def exp_acceptance(cfg: dict, art: Artifacts) -> int:
    from . import acceptance

    ctx = acceptance.Context(calzone_params(cfg), seed=cfg["seed"], threads=cfg["threads"])
    results = acceptance.run_all(ctx, only=cfg["criteria"] or None, log=print)
    art.json("acceptance.json", {"passed": all(r.passed for r in results),
                                 "criteria": [r.to_dict() for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


EXPERIMENTS = {
    "build-calzone": exp_build_calzone,
    "cone-certify": exp_cone_certify,
    "fuller-demo": exp_fuller_demo,
    "phcross-pipeline": exp_phcross,
    "semiconj-check": exp_semiconj,
    "acceptance": exp_acceptance,
}


def output_dir(experiment: str, cfg: dict, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get("PHDS_OUT")
    if env:
        return Path(env) / experiment
    return Path(cfg["out"] or Path("phds_out") / experiment)


def run(experiment: str, cfg: dict, out: Path) -> int:
    """Run one experiment; always leaves a manifest, flagged partial on failure."""
    art = Artifacts(out)
    try:
        code = EXPERIMENTS[experiment](cfg, art)
    except Exception as exc:  # numerical failure: keep what was written
        log.error("%s failed: %s", experiment, exc)
        art.manifest(experiment, cfg, "partial", f"{type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    art.manifest(experiment, cfg, "ok" if code == EXIT_OK else "failed")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phds", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", help="output directory (default: $PHDS_OUT/<experiment>)")
        p.add_argument("--threads", type=int, help="worker cap")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fuller-demo":
            p.add_argument("--flow")
            p.add_argument("--g")
            p.add_argument("--ell")
            p.add_argument("--N")
            p.add_argument("--seeds")
            p.add_argument("--root-tol", dest="root_tol")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    sets = list(args.set)
    for key in ("threads", "seed", "flow", "g", "ell", "N", "seeds", "root_tol"):
        val = getattr(args, key, None)
        if val is not None:
            sets.append(f"{key}={val}")
    try:
        cfg = load_config(args.config, sets)
    except ConfigError as exc:
        print(f"phds: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        validate(cfg)
    except ConfigError as exc:
        print(f"phds: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(args.experiment, cfg, args.out)
    code = run(args.experiment, cfg, out)
    if code == EXIT_NUMERIC:
        print(f"phds: {args.experiment} failed; partial artifacts in {out}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
