"""Experiment runners: gap reports, gap curves over epochs, and 2-D posterior grids.

All randomness is derived from explicit seeds: datapoint ``i`` of a report
uses ``default_rng([seed, i])``, so a report does not depend on the order
points are processed in and re-runs are bit-identical.
"""

from __future__ import annotations

import csv
import json
import logging

import numpy as np

from ..ais import Schedule, ais_forward, bdmc
from ..bounds import amortized_posterior, elbo
from ..diffnet import NumericalError
from ..flows import FlowMode, flow_log_density
from ..gaps import AisConfig, IwaeConfig, aggregate, decompose, estimate_logp
from ..localopt import Family, FlowConfig, optimize_local
from ..model import grid_axes, log_q_ffg, normalize_log_grid, true_posterior_grid
from .data import DataSource, binarize, load_idx, synthesize_gauss, synthesize_grid
from .training import model_family

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class DatasetError(RuntimeError):
    pass


def load_dataset(data_cfg):
    """Materialize the dataset described by a :class:`DataConfig`."""
    c = data_cfg
    if c.source == "synthetic_grid":
        return synthesize_grid(c.n, c.side, c.seed, c.sharpness, n_val=c.n_val, n_blobs=c.n_blobs)
    if c.source == "synthetic_gauss":
        ds = synthesize_gauss(c.n + c.n_val, c.latent_dim, c.data_dim, c.noise_var, c.seed,
                              scale=c.scale)
        ds.splits = {"train": np.arange(c.n)}
        if c.n_val:
            ds.splits["val"] = np.arange(c.n, c.n + c.n_val)
        return ds
    if c.source == "idx_file":
        if not c.path:
            raise DatasetError("data.path is required for idx_file datasets")
        try:
            images = load_idx(c.path)
        except (OSError, ValueError) as err:
            raise DatasetError(str(err)) from err
        total = min(len(images), c.n + c.n_val)
        n_train = min(c.n, total)
        splits = {"train": np.arange(n_train)}
        if total > n_train:
            splits["val"] = np.arange(n_train, total)
        return binarize(images[:total], c.binarize, c.threshold, c.seed, DataSource.IDX_FILE,
                        splits)
    raise DatasetError(f"unknown data source {c.source!r}")


def estimator_settings(eval_cfg):
    e = eval_cfg
    ais_cfg = AisConfig(e.ais_chains, e.ais_intermediate, e.ais_leapfrog, e.schedule)
    iwae_cfg = IwaeConfig(e.iwae_k)
    local_kw = {"max_steps": e.local_max_steps, "n_samples": e.local_samples, "lr": e.local_lr,
                "n_final": e.n_final, "window": e.local_window, "patience": e.local_patience,
                "flow_cfg": FlowConfig(e.local_flow_steps, tuple(e.local_flow_hidden),
                                       tuple(e.local_aux_hidden), "elu",
                                       e.local_identity_start)}
    return ais_cfg, iwae_cfg, local_kw


def point_rng(seed, index, stream=0):
    return np.random.default_rng([int(seed), int(index), int(stream)])


def evaluate_point(model, x, families, eval_cfg, rng):
    """All bounds for one datapoint; returns ``(GapReport, std_errors)``."""
    ais_cfg, iwae_cfg, local_kw = estimator_settings(eval_cfg)
    own = model_family(model)
    fams = [Family(f) for f in families]
    if own not in fams:
        fams.append(own)
    logp_hat, prov = estimate_logp(model, x, ais_cfg, iwae_cfg, rng)
    qstar, ses = {}, {}
    for fam in fams:
        res = optimize_local(model, x, fam, rng, **local_kw)
        qstar[fam.value] = res.elbo_star.value
        ses[f"elbo_qstar_{fam.value}"] = res.elbo_star.std_error
    est = elbo(model, amortized_posterior(model, x), x, eval_cfg.n_final, rng)
    ses["elbo_q"] = est.std_error
    rep = decompose(logp_hat, qstar[own.value], est.value, provenance=prov,
                    elbo_qstar_by_family=qstar)
    return rep, ses


def evaluate_gaps(model, points, indices, families, eval_cfg, seed=None):
    """Per-point gap pipeline over ``points`` (rows labelled by ``indices``).

    Numerical failures skip the point and are listed under ``failures``.
    Returns ``(per_point, aggregate_report, failures)``.
    """
    seed = eval_cfg.seed if seed is None else seed
    per_point, reports, failures = [], [], []
    for idx, x in zip(indices, points):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                rep, ses = evaluate_point(model, x, families, eval_cfg, point_rng(seed, idx))
        except NumericalError as err:
            log.warning("point %d failed: %s", idx, err)
            failures.append({"index": int(idx), "error": str(err)})
            continue
        reports.append(rep)
        per_point.append({"index": int(idx), **rep.to_dict(), "std_errors": ses})
    agg = aggregate(reports) if reports else None
    return per_point, agg, failures


def eval_subset(dataset, split, size):
    idx = dataset.splits[split][:size]
    return dataset.images[idx], idx


def gap_report(model, dataset, cfg):
    """Versioned report document for ``cfg.eval`` on the configured split."""
    e = cfg.eval
    if e.split not in dataset.splits:
        raise DatasetError(f"dataset has no {e.split!r} split")
    points, idx = eval_subset(dataset, e.split, e.subset)
    per_point, agg, failures = evaluate_gaps(model, points, idx, e.families, e)
    return {
        "version": REPORT_VERSION,
        "kind": "gaps",
        "config": cfg.to_dict(),
        "model_family": model_family(model).value,
        "split": e.split,
        "binarization": dataset.binarization,
        "per_point": per_point,
        "aggregate": None if agg is None else agg.to_dict(),
        "failures": failures,
    }


def curve_epochs(total, n_points):
    """Epoch 0 plus ``n_points`` log-spaced epochs ending at ``total``."""
    if total <= 0:
        return [0]
    if n_points <= 1:
        return [0, int(total)]
    pts = np.unique(np.round(np.geomspace(1, total, n_points)).astype(int))
    return [0] + [int(p) for p in pts]


CURVE_BOUNDS = ("logp_hat", "elbo_qstar", "elbo_q")


def gaps_over_epochs(cfg, dataset, train_fn):
    """Train with ``train_fn(cfg, dataset, on_epoch)`` and evaluate gaps at log-spaced epochs.

    Returns long-form rows ``(epoch, split, bound, value)`` and the trained result.
    """
    epochs = set(curve_epochs(cfg.train.epochs, cfg.eval.curve_points))
    splits = [s for s in ("train", "val") if s in dataset.splits]
    subsets = {s: eval_subset(dataset, s, cfg.eval.subset) for s in splits}
    rows = []

    def on_epoch(epoch, model):
        if epoch not in epochs:
            return
        for s in splits:
            points, idx = subsets[s]
            _, agg, _ = evaluate_gaps(model, points, idx, [model_family(model).value], cfg.eval,
                                      seed=cfg.eval.seed + epoch)
            for b in CURVE_BOUNDS:
                rows.append((epoch, s, b, float("nan") if agg is None else getattr(agg, b)))

    result = train_fn(cfg, dataset, on_epoch)
    return rows, result


def _amortized_log_density(model, x, zz):
    q = amortized_posterior(model, x)
    if model.flow is not None and model.flow.mode is FlowMode.SPLIT_LATENT:
        return flow_log_density(model.flow, q.base, zz)
    # q_AF has no tractable marginal over z; its Gaussian base is shown instead
    return log_q_ffg(zz, q.base)


GRID_COLUMNS = ("z1", "z2", "true_density", "amortized_q", "optimal_ffg", "optimal_flow")


def grid_dump(model, x, eval_cfg, seed=None):
    """Rows of :data:`GRID_COLUMNS` over a cell-centred grid; each density column is normalized."""
    if model.latent_dim != 2:
        raise ValueError("grid dump needs a 2-D latent space")
    e = eval_cfg
    rng = point_rng(e.seed if seed is None else seed, e.grid_index, 1)
    _, _, local_kw = estimator_settings(e)
    z1, z2, true = true_posterior_grid(model, x, e.grid_lo, e.grid_hi, e.grid_n)
    _, _, cell = grid_axes(e.grid_lo, e.grid_hi, e.grid_n)
    zz = np.stack(np.meshgrid(z1, z2, indexing="ij"), axis=-1)
    ffg = optimize_local(model, x, Family.FFG, rng, **local_kw).q
    flow = optimize_local(model, x, Family.FLOW, rng, **local_kw).q
    cols = {
        "true_density": true,
        "amortized_q": normalize_log_grid(_amortized_log_density(model, x, zz), cell),
        "optimal_ffg": normalize_log_grid(log_q_ffg(zz, ffg.base), cell),
        "optimal_flow": normalize_log_grid(flow_log_density(flow.flow, flow.base, zz), cell),
    }
    zg1, zg2 = np.meshgrid(z1, z2, indexing="ij")
    table = np.column_stack([zg1.ravel(), zg2.ravel()] + [cols[c].ravel() for c in GRID_COLUMNS[2:]])
    return table, cell


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def ais_report(model, points, indices, eval_cfg):
    e = eval_cfg
    sched = Schedule.make(e.schedule, e.ais_intermediate)
    out = []
    for idx, x in zip(indices, points):
        r = ais_forward(model, x, sched, e.ais_chains, e.ais_leapfrog, point_rng(e.seed, idx))
        out.append({"index": int(idx), "log_marginal_bound": r.log_marginal_bound,
                    "std_error": r.std_error, "mean_acceptance": r.mean_acceptance,
                    "dropped_chains": r.dropped_chains})
    return out


def bdmc_report(model, eval_cfg, n_intermediate=None):
    e = eval_cfg
    sched = Schedule.make(e.schedule, n_intermediate or e.ais_intermediate)
    res = bdmc(model, e.bdmc_points, sched, e.ais_chains, point_rng(e.seed, 0, 2), e.ais_leapfrog)
    return {"lower": res.lower, "upper": res.upper, "gap": res.gap,
            "gap_std_error": res.pooled_std_error,
            "n_points": e.bdmc_points, "n_intermediate": len(sched),
            "lower_per_point": res.lower_per_point.tolist(),
            "upper_per_point": res.upper_per_point.tolist()}


def local_opt_report(model, points, indices, eval_cfg, families):
    _, _, local_kw = estimator_settings(eval_cfg)
    out = []
    for idx, x in zip(indices, points):
        rng = point_rng(eval_cfg.seed, idx, 3)
        for fam in families:
            r = optimize_local(model, x, fam, rng, **local_kw)
            out.append({"index": int(idx), "family": Family(fam).value,
                        "elbo_star": r.elbo_star.value, "std_error": r.elbo_star.std_error,
                        "steps": r.steps_used, "converged": bool(r.converged),
                        "restarts": r.restarts})
    return out


__all__ = ["DatasetError", "load_dataset", "evaluate_gaps", "gap_report", "gaps_over_epochs",
           "grid_dump", "curve_epochs", "ais_report", "bdmc_report", "local_opt_report",
           "write_csv", "read_csv", "write_json", "IwaeConfig", "AisConfig"]
