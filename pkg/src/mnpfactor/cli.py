"""Command-line entry points: calibrate, simulate, fit, experiment, evaluate.

Every subcommand resolves its configuration (defaults < manifest file <
flags), writes a `run_manifest.txt` into the output directory before any
other artifact, and exits 0 on success, 1 on runtime failures, and 2 on
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np
from scipy.stats import ks_2samp

from . import __version__
from .data import (apply_scaling, read_long_csv, standardize_covariates,
                   take_observations, unscale_coefficients, write_long_csv)
from .evaluation import (PredictivePmf, compare_hit_rates,
                         compare_log_scores, make_report, predictive_pmf)
from .experiment import (DgpConfig, base_sensitivity_run, parse_manifest,
                         run_numerical_experiment, train_test_split,
                         write_metrics_csv, write_pvalues_csv)
from .prior import (CalibrationError, Hyperparameters, _draw_prior_angles,
                    calibrate_prior, load_calibrated_prior,
                    sample_flexible_margin, save_calibrated_prior,
                    solve_equicorrelated_mu)
from .sampler import (VARIANT_FS, VARIANT_IDENTITY, SamplerConfig, run_chain,
                      save_draws)

RUN_ROOT_ENV = "MNPFACTOR_RUN_ROOT"


class UsageError(Exception):
    """Configuration problem attributable to the invocation."""


def _resolve_out_dir(args, subcommand):
    if getattr(args, "out_dir", None):
        return args.out_dir
    root = os.environ.get(RUN_ROOT_ENV)
    if root:
        return os.path.join(root, subcommand)
    raise UsageError(f"--out-dir is required (or set ${RUN_ROOT_ENV})")


def _write_run_manifest(out_dir, subcommand, settings: dict, artifacts: list):
    """Record the resolved run before any output is produced."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"subcommand = {subcommand}\n")
        fh.write(f"version = {__version__}\n")
        for key in sorted(settings):
            fh.write(f"{key} = {settings[key]}\n")
        for artifact in artifacts:
            fh.write(f"artifact = {artifact}\n")
    return path


# ---------------------------------------------------------------------------
# calibrate

def _parse_mu_gamma(raw, sigma_gamma, nu, q, mc_draws, seed):
    if raw == "equicorrelated":
        return solve_equicorrelated_mu(sigma_gamma, nu, q, mc_draws=mc_draws,
                                       seed=seed), True
    try:
        return float(raw), False
    except ValueError:
        raise UsageError("--mu-gamma must be a number or 'equicorrelated'") from None


def cmd_calibrate(args) -> int:
    theta_mu, solved = _parse_mu_gamma(args.mu_gamma, args.sigma_gamma, args.nu,
                                       args.q, args.draws, args.seed)
    theta = Hyperparameters(theta_mu, args.sigma_gamma, args.nu, args.q)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    prior = calibrate_prior(theta, args.j, M=args.draws, seed=args.seed,
                            workers=args.workers)
    save_calibrated_prior(prior, args.out)
    if args.diagnostics:
        _write_calibration_diagnostics(args.diagnostics, prior)
    if solved:
        print(f"equicorrelated mu_gamma* = {theta_mu:.6f}")
    print(f"wrote {len(prior.margins)}-margin prior to {args.out}")
    return 0


def _write_calibration_diagnostics(path, prior, check_draws: int = 20_000):
    """Per-margin fit summary plus a fresh-draw KS check of each margin."""
    rng = np.random.default_rng(prior.seed + 1)
    target = _draw_prior_angles(prior.theta, prior.J, check_draws, rng)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["margin", "mu", "tau", "eta", "bound", "avg_loglik", "ks_refit"])
        for l, margin in enumerate(prior.margins):
            refit = sample_flexible_margin(margin, check_draws, rng)
            ks = ks_2samp(target[:, l], refit).statistic
            ll = "" if prior.avg_loglik is None else repr(prior.avg_loglik[l])
            writer.writerow([l, repr(margin.mu), repr(margin.tau), repr(margin.eta),
                             repr(margin.upper_bound), ll, repr(float(ks))])


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args) -> int:
    out_dir = _resolve_out_dir(args, "simulate")
    config = DgpConfig(j_plus_1=args.j_plus_1, n_obs=args.n_obs, seed=args.seed)
    data_path = os.path.join(out_dir, "dataset.csv")
    _write_run_manifest(out_dir, "simulate", {
        "dgp.j_plus_1": config.j_plus_1, "dgp.n_obs": config.n_obs,
        "dgp.seed": config.seed,
    }, [data_path, os.path.join(out_dir, "truth_beta.csv"),
        os.path.join(out_dir, "truth_sigma.csv")])
    from .experiment import simulate_dataset
    dataset, truth = simulate_dataset(config)
    write_long_csv(dataset, data_path)
    np.savetxt(os.path.join(out_dir, "truth_beta.csv"), truth.beta[None, :],
               delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out_dir, "truth_sigma.csv"), truth.sigma,
               delimiter=",", fmt="%.17g")
    print(f"simulated {config.n_obs} observations over {config.j_plus_1} "
          f"categories into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# fit

def _beta_labels(dataset):
    labels = []
    if dataset.include_intercept:
        labels += [f"alpha_{j}" for j in range(1, dataset.J + 1)]
    for name in dataset.indiv_names:
        labels += [f"{name}__alt{j}" for j in range(1, dataset.J + 1)]
    labels += list(dataset.alt_names)
    return labels


def _write_pmf_csv(path, pmf: PredictivePmf, obs_ids, truths):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_cat = pmf.probs.shape[1]
        writer.writerow(["obs_id", "truth", *(f"p_{c}" for c in range(n_cat))])
        for i, (obs, truth) in enumerate(zip(obs_ids, truths)):
            writer.writerow([int(obs), int(truth),
                             *(repr(float(v)) for v in pmf.probs[i])])


def _read_pmf_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        obs_ids, truths, probs = [], [], []
        for rec in reader:
            obs_ids.append(int(rec[0]))
            truths.append(int(rec[1]))
            probs.append([float(v) for v in rec[2:]])
    return (np.asarray(obs_ids), np.asarray(truths),
            PredictivePmf(probs=np.asarray(probs), draw_count=0 or 1))


def cmd_fit(args) -> int:
    out_dir = _resolve_out_dir(args, "fit")
    if args.variant == VARIANT_FS and not args.prior:
        raise UsageError("--prior FILE is required for --variant mnp-fs")
    prior = None
    if args.variant == VARIANT_FS:
        if not os.path.exists(args.prior):
            raise UsageError(f"prior file not found: {args.prior}")
        prior = load_calibrated_prior(args.prior)
    config = SamplerConfig(
        total_iterations=args.iterations, burn_in=args.burn_in,
        thinning=args.thinning, coef_prior_variance=args.coef_prior_variance,
        seed=args.seed, variant=args.variant,
    )
    artifacts = [os.path.join(out_dir, p) for p in
                 ("beta.csv", "kappa.csv", "metadata.json", "split.csv",
                  "pmf_in.csv", "pmf_out.csv", "metrics.csv", "acceptance.csv")]
    _write_run_manifest(out_dir, "fit", {
        "data": os.path.abspath(args.data),
        "indiv": os.path.abspath(args.indiv) if args.indiv else "",
        "variant": args.variant, "prior": args.prior or "",
        "sampler.total_iterations": config.total_iterations,
        "sampler.burn_in": config.burn_in, "sampler.thinning": config.thinning,
        "sampler.seed": config.seed, "eval.test_fraction": args.test_fraction,
        "eval.split_seed": args.split_seed, "eval.replicates": args.replicates,
    }, artifacts)
    dataset = read_long_csv(args.data, args.indiv)
    train_idx, test_idx = train_test_split(dataset.N, args.test_fraction,
                                           args.split_seed)
    ds_train = take_observations(dataset, train_idx)
    ds_test = take_observations(dataset, test_idx)
    ds_train_s, record = standardize_covariates(ds_train)
    ds_test_s = apply_scaling(ds_test, record)
    draws = run_chain(ds_train_s, config, prior=prior)
    reported = replace(draws, beta=unscale_coefficients(record, draws.beta, ds_train))
    save_draws(reported, out_dir, beta_labels=_beta_labels(dataset))
    with open(os.path.join(out_dir, "split.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["obs_id", "role"])
        for i in train_idx:
            writer.writerow([int(i), "train"])
        for i in test_idx:
            writer.writerow([int(i), "test"])
    pmf_in = predictive_pmf(ds_train_s, draws, R=args.replicates, seed=config.seed)
    pmf_out = predictive_pmf(ds_test_s, draws, R=args.replicates, seed=config.seed + 1)
    _write_pmf_csv(os.path.join(out_dir, "pmf_in.csv"), pmf_in, train_idx,
                   ds_train.choices)
    _write_pmf_csv(os.path.join(out_dir, "pmf_out.csv"), pmf_out, test_idx,
                   ds_test.choices)
    reports = [make_report(pmf_in, ds_train.choices, args.variant, "in"),
               make_report(pmf_out, ds_test.choices, args.variant, "out")]
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), reports,
                      reference=args.variant)
    with open(os.path.join(out_dir, "acceptance.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["angle", "acceptance_rate"])
        if draws.acceptance is not None:
            for l, rate in enumerate(draws.acceptance):
                writer.writerow([l, repr(float(rate))])
    for report in reports:
        print(f"{report.model} {report.sample}: hit-rate={report.hit_rate:.4f} "
              f"log-score={report.log_score:.4f}")
    return 0


# ---------------------------------------------------------------------------
# experiment

_MANIFEST_DEFAULTS = {
    "dgp.j_plus_1": "10", "dgp.n_obs": "2000",
    "dgp.intercept_variance": repr(float(np.sqrt(0.5))),
    "dgp.price_coef": "-0.7", "dgp.iw_dof_offset": "3", "dgp.iw_offdiag": "0.5",
    "dgp.seed": "0",
    "sampler.total_iterations": "20000", "sampler.burn_in": "10000",
    "sampler.thinning": "10", "sampler.coef_prior_variance": "10.0",
    "sampler.block_size": "5", "sampler.adapt_batch": "50",
    "sampler.accept_low": "0.15", "sampler.accept_high": "0.30",
    "sampler.initial_proposal_scale": "0.1", "sampler.seed": "0",
    "prior.mu_gamma": "0.0", "prior.sigma_gamma": "1.0", "prior.nu": "5.0",
    "prior.q": "1", "prior.calibration_draws": "100000",
    "prior.calibration_seed": "0",
    "eval.variants": "mnp-fs,mnp-i,naive", "eval.replicates": "5",
    "eval.test_fraction": "0.2", "eval.split_seed": "0", "eval.pmf_seed": "0",
    "eval.bases": "auto", "eval.grid_size": "25",
}

_PAPER_SCALE = {
    "dgp.j_plus_1": "50", "dgp.n_obs": "5000",
    "sampler.total_iterations": "200000", "sampler.burn_in": "100000",
}


def _resolve_experiment_settings(args):
    settings = dict(_MANIFEST_DEFAULTS)
    if args.manifest:
        for key, value in parse_manifest(args.manifest).items():
            if key not in settings:
                raise UsageError(f"unknown manifest key: {key}")
            settings[key] = value
    if args.paper_scale:
        settings.update(_PAPER_SCALE)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in settings:
            raise UsageError(f"unknown setting: {key}")
        settings[key] = value.strip()
    return settings


def cmd_experiment(args) -> int:
    out_dir = _resolve_out_dir(args, "experiment")
    settings = _resolve_experiment_settings(args)
    if args.paper_scale:
        print("warning: paper-scale configuration requested "
              f"({settings['sampler.total_iterations']} iterations at "
              f"J+1={settings['dgp.j_plus_1']}, N={settings['dgp.n_obs']}); "
              "expect a long run")
    dgp = DgpConfig(
        j_plus_1=int(settings["dgp.j_plus_1"]), n_obs=int(settings["dgp.n_obs"]),
        intercept_variance=float(settings["dgp.intercept_variance"]),
        price_coef=float(settings["dgp.price_coef"]),
        iw_dof_offset=int(settings["dgp.iw_dof_offset"]),
        iw_offdiag=float(settings["dgp.iw_offdiag"]), seed=int(settings["dgp.seed"]))
    sampler_config = SamplerConfig(
        total_iterations=int(settings["sampler.total_iterations"]),
        burn_in=int(settings["sampler.burn_in"]),
        thinning=int(settings["sampler.thinning"]),
        coef_prior_variance=float(settings["sampler.coef_prior_variance"]),
        block_size=int(settings["sampler.block_size"]),
        adapt_batch=int(settings["sampler.adapt_batch"]),
        accept_low=float(settings["sampler.accept_low"]),
        accept_high=float(settings["sampler.accept_high"]),
        initial_proposal_scale=float(settings["sampler.initial_proposal_scale"]),
        seed=int(settings["sampler.seed"]))
    theta = Hyperparameters(
        float(settings["prior.mu_gamma"]), float(settings["prior.sigma_gamma"]),
        float(settings["prior.nu"]), int(settings["prior.q"]))
    variants = [v.strip() for v in settings["eval.variants"].split(",") if v.strip()]
    _write_run_manifest(out_dir, "experiment", settings,
                        [os.path.join(out_dir, "metrics.csv")])
    cache_dir = os.path.join(out_dir, "prior_cache")
    result = run_numerical_experiment(
        dgp, variants, sampler_config, theta,
        calibration_draws=int(settings["prior.calibration_draws"]),
        calibration_seed=int(settings["prior.calibration_seed"]),
        R=int(settings["eval.replicates"]),
        test_fraction=float(settings["eval.test_fraction"]),
        split_seed=int(settings["eval.split_seed"]),
        pmf_seed=int(settings["eval.pmf_seed"]),
        workers=args.workers, cache_dir=cache_dir, run_dir=out_dir)
    for report in result.reports:
        print(f"{report.model} {report.sample}: hit-rate={report.hit_rate:.4f} "
              f"log-score={report.log_score:.4f}")
    if args.sensitivity:
        mu_star = solve_equicorrelated_mu(
            theta.sigma_gamma, theta.nu, theta.q,
            seed=int(settings["prior.calibration_seed"]))
        thetas = {
            "identity": replace(theta, mu_gamma=0.0),
            "equicorrelated": replace(theta, mu_gamma=mu_star),
        }
        if settings["eval.bases"] == "auto":
            from .experiment import simulate_dataset
            dataset, _ = simulate_dataset(dgp)
            bases = [0, int(np.argmax(np.bincount(dataset.choices)))]
        else:
            bases = [int(b) for b in settings["eval.bases"].split(",")]
        base_sensitivity_run(
            dgp, bases, thetas, sampler_config,
            grid_size=int(settings["eval.grid_size"]),
            calibration_draws=int(settings["prior.calibration_draws"]),
            calibration_seed=int(settings["prior.calibration_seed"]),
            R=int(settings["eval.replicates"]),
            pmf_seed=int(settings["eval.pmf_seed"]), workers=args.workers,
            cache_dir=cache_dir, run_dir=out_dir)
        print(f"sensitivity curves written to {os.path.join(out_dir, 'curves.csv')}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def _load_run_reports(run_dir):
    label = os.path.basename(os.path.normpath(run_dir))
    meta_path = os.path.join(run_dir, "metadata.json")
    if os.path.exists(meta_path):
        import json
        with open(meta_path) as fh:
            label = json.load(fh).get("variant", label) + ":" + label
    out = {}
    for sample, name in (("in", "pmf_in.csv"), ("out", "pmf_out.csv")):
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            raise UsageError(f"{run_dir}: missing {name}; re-run fit to produce it")
        obs_ids, truths, pmf = _read_pmf_csv(path)
        out[sample] = (obs_ids, truths, make_report(pmf, truths, label, sample))
    return label, out


def cmd_evaluate(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("evaluate needs at least two run directories")
    loaded = [_load_run_reports(d) for d in args.runs]
    ref_label, ref = loaded[0]
    for label, other in loaded[1:]:
        for sample in ("in", "out"):
            if (other[sample][0].shape != ref[sample][0].shape
                    or np.any(other[sample][0] != ref[sample][0])
                    or np.any(other[sample][1] != ref[sample][1])):
                raise UsageError(
                    f"run {label} was evaluated on a different split than {ref_label}")
    reports = [entry[sample][2] for _, entry in loaded for sample in ("in", "out")]
    lines = _comparison_table(loaded)
    print("\n".join(lines))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_run_manifest(args.out_dir, "evaluate",
                            {"runs": ";".join(args.runs)},
                            [os.path.join(args.out_dir, "metrics.csv"),
                             os.path.join(args.out_dir, "pvalues.csv"),
                             os.path.join(args.out_dir, "comparison.txt")])
        write_metrics_csv(os.path.join(args.out_dir, "metrics.csv"), reports,
                          reference=reports[0].model)
        write_pvalues_csv(os.path.join(args.out_dir, "pvalues.csv"), reports,
                          reference=reports[0].model)
        with open(os.path.join(args.out_dir, "comparison.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def _comparison_table(loaded):
    """Aligned text table; a '+' marks the reference significantly better than
    the column model at the 5% level, a '-' significantly worse."""
    ref_label, ref = loaded[0]
    labels = [label for label, _ in loaded]
    width = max(12, max(len(l) for l in labels) + 2)
    header = f"{'sample':8}{'metric':11}" + "".join(f"{l:>{width}}" for l in labels)
    lines = [header, "-" * len(header)]
    for sample in ("in", "out"):
        for metric, attr, test in (("hit-rate", "hit_rate", compare_hit_rates),
                                   ("log-score", "log_score", compare_log_scores)):
            cells = []
            for label, entry in loaded:
                report = entry[sample][2]
                value = getattr(report, attr)
                mark = "  "
                if label != ref_label:
                    res = test(ref[sample][2], report)
                    if res.p_value < 0.05:
                        mark = "+ " if res.statistic > 0 else "- "
                cells.append(f"{value:.4f}{mark}".rjust(width))
            lines.append(f"{sample:8}{metric:11}" + "".join(cells))
    return lines


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnpfactor",
        description="Scalable Bayesian multinomial probit with a factor covariance.",
        epilog="Precedence for experiment settings: defaults < --manifest file "
               "< --paper-scale < --set overrides.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("calibrate", help="fit the approximating angle prior")
    p.add_argument("--j", type=int, required=True, help="utility dimension J")
    p.add_argument("--q", type=int, default=1)
    p.add_argument("--mu-gamma", default="0.0",
                   help="loading prior mean, or 'equicorrelated' to solve for it")
    p.add_argument("--sigma-gamma", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=5.0)
    p.add_argument("--draws", type=int, default=100_000, help="calibration sample size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count())
    p.add_argument("--out", required=True, help="prior file to write")
    p.add_argument("--diagnostics", help="optional per-margin diagnostics CSV")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--j-plus-1", type=int, default=10)
    p.add_argument("--n-obs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model variant to a choice CSV")
    p.add_argument("--data", required=True, help="long-format choice CSV")
    p.add_argument("--indiv", help="optional individual-covariate CSV")
    p.add_argument("--variant", choices=[VARIANT_FS, VARIANT_IDENTITY],
                   default=VARIANT_FS)
    p.add_argument("--prior", help="calibrated prior file (required for mnp-fs)")
    p.add_argument("--iterations", type=int, default=20_000)
    p.add_argument("--burn-in", type=int, default=10_000)
    p.add_argument("--thinning", type=int, default=10)
    p.add_argument("--coef-prior-variance", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("experiment", help="run the synthetic end-to-end study")
    p.add_argument("--manifest", help="key = value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single setting (repeatable)")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-scale configuration (long run)")
    p.add_argument("--sensitivity", action="store_true",
                   help="also run the base-category sensitivity grid")
    p.add_argument("--workers", type=int, default=os.cpu_count())
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("evaluate", help="compare two or more fit runs")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories; the first is the reference")
    p.add_argument("--out-dir", help="optional directory for comparison CSVs")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, CalibrationError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
