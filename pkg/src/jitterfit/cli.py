"""Command-line interface.

Subcommands::

    simulate   write simulated datasets (clusters, truth, regions)
    fit        fit model S or J to a cluster CSV + boundary GeoJSON
    predict    posterior predictive draws at points or on a grid
    score      CRPS / log-score tables from prediction samples
    study      the full replication harness (bias, scores, coverage)
    quad-dump  per-cluster integration points and weights as CSV

Configuration comes from an optional JSON file plus ``--set key=value``
overrides (dots allowed, e.g. ``--set field.grid=17``).  Worker count for
``study`` can also be set with the JITTERFIT_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .field import BasisField
from .geo import ingest_clusters, synthetic_grid_regions
from .jitter import preset
from .model import FitConfig, FitResult, HyperParams, ParamSummary, PriorSpec, fit, predict
from .quadrature import build_scheme, scheme_rows
from .scoring import crps_samples_batch, log_score_batch
from .study import (
    StudyConfig,
    make_scenario_base,
    run_study,
    scenarios,
    simulate_replicate,
)

log = logging.getLogger(__name__)


def _load_config(args) -> StudyConfig:
    if args.config:
        with open(args.config) as f:
            cfg = StudyConfig.from_dict(json.load(f))
    else:
        cfg = StudyConfig()
    if args.set:
        cfg = cfg.apply_overrides(args.set)
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _regions_geojson(regions) -> dict:
    feats = []
    for rid, reg in regions.items():
        feats.append({
            "type": "Feature",
            "properties": {"region": rid},
            "geometry": {"type": "Polygon",
                         "coordinates": [[[float(x), float(y)] for x, y in ring]
                                         + [[float(ring[0][0]), float(ring[0][1])]]
                                         for ring in reg.rings]},
        })
    return {"type": "FeatureCollection", "features": feats}


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    for scn in scenarios(cfg):
        base = make_scenario_base(cfg, scn)
        sdir = out / scn.tag
        sdir.mkdir(parents=True, exist_ok=True)
        with open(sdir / "regions.geojson", "w") as f:
            json.dump(_regions_geojson(base.regions), f)
        for rep in range(cfg.replicates):
            data = simulate_replicate(cfg, base, rep)
            rdir = sdir / f"rep_{rep:03d}"
            rdir.mkdir(exist_ok=True)
            _write_csv(rdir / "clusters.csv",
                       ["id", "x_km", "y_km", "urban", "y", "n", "region"],
                       [[r.id, repr(float(r.location.x)), repr(float(r.location.y)),
                         "U" if r.urban else "R", r.y, r.n, r.region]
                        for r in data.records])
            _write_csv(rdir / "true_locations.csv",
                       ["id", "x_km", "y_km", "field"],
                       [[f"c{i:04d}", repr(float(x)), repr(float(y)), repr(float(u))]
                        for i, ((x, y), u) in enumerate(
                            zip(data.true_locs, data.field_at_clusters))])
            _write_csv(rdir / "pred_truth.csv",
                       ["x_km", "y_km", "eta_true", "r_true"],
                       [[repr(float(x)), repr(float(y)), repr(float(e)), repr(float(r))]
                        for (x, y), e, r in zip(base.pred_pts, data.eta_pred, data.r_pred)])
            with open(rdir / "truth.json", "w") as f:
                json.dump({"family": scn.family, "mu": cfg.mu_true,
                           "rho": scn.rho, "sigma2_s": cfg.sigma2_true,
                           "sigma2_n": cfg.sigma2_n_true,
                           "jitter": scn.jitter_name, "replicate": rep}, f, indent=2)
        log.info("wrote scenario %s", scn.tag)
    return 0


def _priors_from_args(args) -> PriorSpec:
    return PriorSpec(rho_0=args.rho0)


def cmd_fit(args) -> int:
    ingest = ingest_clusters(args.clusters, args.regions, planar=args.planar)
    if ingest.dropped:
        log.warning("dropped %d clusters outside their region", len(ingest.dropped))
    priors = _priors_from_args(args)
    jitter_scheme = preset(args.jitter) if args.model == "J" else None
    fc = FitConfig(grid=args.grid, buffer_km=args.buffer_km)
    if args.model == "S":
        # size the basis as model J would, so S/J comparisons share a hull
        fc2 = FitConfig(grid=args.grid, buffer_km=args.buffer_km)
        locs = np.array([[r.location.x, r.location.y] for r in ingest.records])
        from .model import default_basis
        fc.basis = default_basis(locs, preset(args.jitter), priors.rho_0,
                                 fc2.grid, fc2.buffer_km)
    res = fit(ingest.records, ingest.regions, jitter_scheme, priors,
              args.family, fc)
    out = Path(args.out)
    with open(out, "w") as f:
        json.dump(res.to_jsonable(), f, indent=2)
    np.savez(out.with_suffix(".npz"), w_mean=res.w_mean, w_prec=res.w_prec)
    log.info("model %s fit: converged=%s runtime=%.1fs -> %s",
             args.model, res.converged, res.runtime_s, out)
    print(json.dumps({k: v.median for k, v in res.params.items()}, indent=2))
    return 0


def load_fit(path: str | Path) -> FitResult:
    """Rebuild a FitResult from ``fit.json`` + ``fit.npz``."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    arrs = np.load(path.with_suffix(".npz"))
    g = doc["grid"]
    basis = BasisField(g["x0"], g["y0"], g["dx"], g["dy"], g["nx"], g["ny"])
    pr = doc["priors"]
    params = HyperParams.from_vector(np.array(doc["map_internal"]), doc["family"])
    summaries = {k: ParamSummary(v["median"], v["lower"], v["upper"])
                 for k, v in doc["params"].items()}
    return FitResult(map=params, curvature=np.array(doc["curvature"]),
                     params=summaries, w_mean=arrs["w_mean"], w_prec=arrs["w_prec"],
                     converged=doc["converged"], trace=[], family=doc["family"],
                     basis=basis, priors=PriorSpec(**pr),
                     psi_cov=np.array(doc["psi_cov"]),
                     runtime_s=doc.get("runtime_s", 0.0))


def _prediction_points(args) -> np.ndarray:
    if args.points:
        with open(args.points) as f:
            rows = list(csv.DictReader(f))
        return np.array([[float(r["x_km"]), float(r["y_km"])] for r in rows])
    from .study import prediction_grid
    return prediction_grid(args.extent, args.grid_points)


def cmd_predict(args) -> int:
    res = load_fit(args.fit)
    pts = _prediction_points(args)
    pred = predict(res, pts, n_samples=args.n_samples, seed=args.seed)
    out = Path(args.out)
    _write_csv(out, ["x_km", "y_km", "mean", "sd", "cv"],
               [[repr(float(x)), repr(float(y)), repr(float(m)), repr(float(s)),
                 repr(float(c))]
                for (x, y), m, s, c in zip(pts, pred.mean, pred.sd, pred.cv)])
    np.savez(out.with_suffix(".npz"), points=pts, samples=pred.samples,
             eta_samples=pred.eta_samples, family=res.family)
    log.info("wrote %s (+ .npz with samples)", out)
    return 0


def cmd_score(args) -> int:
    arrs = np.load(args.samples)
    family = str(arrs["family"])
    with open(args.truth) as f:
        rows = list(csv.DictReader(f))
    eta_true = np.array([float(r["eta_true"]) for r in rows])
    r_true = np.array([float(r["r_true"]) for r in rows])
    truth = eta_true if family == "gaussian" else r_true

    def scores(a):
        crps = crps_samples_batch(a["samples"], truth)
        logs = log_score_batch(a["eta_samples"], eta_true)
        return crps, logs

    crps1, logs1 = scores(arrs)
    out = Path(args.out)
    if args.samples2:
        arrs2 = np.load(args.samples2)
        crps2, logs2 = scores(arrs2)
        _write_csv(out, ["point", "crps_j", "crps_s", "crps_rel_diff_pct",
                         "logscore_j", "logscore_s", "logscore_diff"],
                   [[i, repr(float(a)), repr(float(b)),
                     repr(float(100.0 * (a - b) / b)),
                     repr(float(c)), repr(float(d)), repr(float(c - d))]
                    for i, (a, b, c, d) in enumerate(zip(crps1, crps2, logs1, logs2))])
    else:
        _write_csv(out, ["point", "crps", "logscore"],
                   [[i, repr(float(a)), repr(float(b))]
                    for i, (a, b) in enumerate(zip(crps1, logs1))])
    log.info("wrote %s", out)
    return 0


def cmd_study(args) -> int:
    cfg = _load_config(args)
    run_study(cfg, outdir=args.out)
    log.info("study outputs in %s", args.out)
    return 0


def cmd_quad_dump(args) -> int:
    ingest = ingest_clusters(args.clusters, args.regions, planar=args.planar)
    jit = preset(args.jitter)
    rows = []
    for rec in ingest.records:
        scheme = build_scheme(rec, ingest.regions[rec.region], jit)
        rows.extend([c, r, k, repr(x), repr(y), repr(w), repr(wu)]
                    for c, r, k, x, y, w, wu in scheme_rows(scheme))
    _write_csv(args.out, ["cluster", "ring", "k", "x", "y", "weight",
                          "weight_uncorrected"], rows)
    log.info("wrote %d integration points to %s", len(rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jitterfit", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="write simulated datasets")
    _add_config_args(ps)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit model S or J to a dataset")
    pf.add_argument("--clusters", required=True, help="cluster CSV")
    pf.add_argument("--regions", required=True, help="boundary GeoJSON")
    pf.add_argument("--planar", action="store_true",
                    help="coordinates are already planar km (x_km, y_km)")
    pf.add_argument("--model", choices=["S", "J"], required=True)
    pf.add_argument("--family", choices=["binomial", "gaussian"], default="binomial")
    pf.add_argument("--jitter", default="dhs", help="jitter preset (dhs, dhs4x)")
    pf.add_argument("--rho0", type=float, required=True, help="prior median range, km")
    pf.add_argument("--grid", type=int, default=15)
    pf.add_argument("--buffer-km", type=float, default=None)
    pf.add_argument("--out", required=True, help="output fit JSON path")
    pf.set_defaults(func=cmd_fit)

    pp = sub.add_parser("predict", help="posterior predictive surface")
    pp.add_argument("--fit", required=True, help="fit JSON from the fit command")
    pp.add_argument("--points", help="CSV with x_km,y_km columns")
    pp.add_argument("--grid-points", type=int, default=400)
    pp.add_argument("--extent", type=float, default=800.0,
                    help="domain edge for --grid-points, km")
    pp.add_argument("--n-samples", type=int, default=200)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_predict)

    pc = sub.add_parser("score", help="score predictions against truth")
    pc.add_argument("--samples", required=True, help="npz from predict")
    pc.add_argument("--samples2", help="second npz for paired J-S differences")
    pc.add_argument("--truth", required=True, help="pred_truth.csv")
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_score)

    pt = sub.add_parser("study", help="run the full simulation study")
    _add_config_args(pt)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_study)

    pq = sub.add_parser("quad-dump", help="dump integration points as CSV")
    pq.add_argument("--clusters", required=True)
    pq.add_argument("--regions", required=True)
    pq.add_argument("--planar", action="store_true")
    pq.add_argument("--jitter", default="dhs")
    pq.add_argument("--out", required=True)
    pq.set_defaults(func=cmd_quad_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
