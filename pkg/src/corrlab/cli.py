"""Command-line front end: ``corrlab <subcommand> --config run.json``.

Every run writes into ``<output>/<subcommand>-<config hash>/``; the directory is
assembled under a temporary name and renamed when complete, so a finished
directory is never modified again.  Exit codes: 0 success, 2 invalid config,
3 solver failure, 4 guard violation, 5 inconclusive statistics.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import reports
from .bounds import constant_scan
from .config import ExperimentConfig, load_config
from .corrector import ensemble_effective_matrix, solve_corrector
from .environment import SeedSpec, sample_environment, save_environment
from .errors import ConfigError, ConvergenceError, CorrlabError, PreconditionError, QuadratureError
from .field import CovarianceModel, fit_Q, sigma2
from .lattice import write_field
from .stats import (
    MOMENT_CSV_HEADER,
    STATS_CSV_HEADER,
    cauchy_check,
    mc_campaign,
    moment_scan,
    rate_fit,
)
from .stein import decay_campaign, decay_fit, stein_campaign

log = logging.getLogger("corrlab")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_GUARD, EXIT_INCONCLUSIVE = 0, 2, 3, 4, 5


class Run:
    """Collects output files for one subcommand and finalizes them atomically."""

    def __init__(self, command: str, cfg: ExperimentConfig, root: Path):
        self.command = command
        self.cfg = cfg
        self.final = root / f"{command}-{cfg.config_hash()[:16]}"
        self.tmp = root / f".{self.final.name}.tmp-{os.getpid()}"
        self.outputs = []
        self.extra = {}
        self.status = "ok"
        self.t0 = time.perf_counter()

    def open(self):
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)

    def path(self, name):
        p = self.tmp / name
        self.outputs.append(p)
        return p

    def csv(self, name, header, rows):
        reports.write_csv(self.path(name), header, rows)

    def json(self, name, obj):
        body = dict(obj)
        body["config_hash"] = self.cfg.config_hash()
        reports.write_json(self.path(name), body)

    def finish(self):
        self.extra["status"] = self.status
        wall = time.perf_counter() - self.t0
        man = reports.manifest(self.command, self.cfg, self.outputs, wall, self.extra)
        reports.write_json(self.tmp / "manifest.json", man)
        os.replace(self.tmp, self.final)
        return self.final


# ----------------------------------------------------------------------------
# Subcommands


def _campaign(cfg, threads, lam_list=None, window=None):
    return mc_campaign(
        cfg.shape, cfg.conductance_law, cfg.xi, cfg.f, cfg.eps_list, cfg.n_replicas,
        lam_list or cfg.lambda_list, cfg.master_seed, cfg.solver_config, threads,
        covariance_window=window,
    )


def cmd_gen_env(cfg, run, threads):
    env = sample_environment(cfg.shape, cfg.conductance_law, SeedSpec(cfg.master_seed, 0))
    save_environment(env, run.tmp)
    side = run.tmp / "environment.json"
    body = json.loads(side.read_text())
    body["config_hash"] = cfg.config_hash()
    side.write_text(reports.json_text(body), encoding="utf-8")
    run.outputs += [run.tmp / n for n in ("zeta.bin", "a.bin", "environment.json")]


def cmd_solve_corrector(cfg, run, threads):
    if cfg.mu != 0.0:
        log.info("solving the massive corrector with mu = %g", cfg.mu)
    env = sample_environment(cfg.shape, cfg.conductance_law, SeedSpec(cfg.master_seed, 0))
    sol = solve_corrector(env, cfg.xi, cfg.mu, cfg.solver_config)
    write_field(run.path("phi.bin"), sol.phi, "vertex")
    info = sol.manifest()
    info["phi_sup"] = float(np.abs(sol.phi).max())
    run.json("corrector.json", info)
    run.extra["residual"] = sol.residual
    run.extra["phi_sup"] = info["phi_sup"]


def cmd_effective_matrix(cfg, run, threads):
    seeds = [SeedSpec(cfg.master_seed, r) for r in range(cfg.n_replicas)]
    em = ensemble_effective_matrix(cfg.shape, cfg.conductance_law, seeds, cfg.solver_config, threads)
    run.json("effective_matrix.json", em.to_dict())
    run.csv("effective_matrix_replicas.csv", ["replica"] + [f"A_{j + 1}{k + 1}" for j in range(cfg.d) for k in range(cfg.d)],
            [[r] + m.reshape(-1).tolist() for r, m in enumerate(em.per_replica)])
    return em


def cmd_sample_field(cfg, run, threads):
    camp = _campaign(cfg, threads)
    rows = []
    for (e, l), s in sorted(camp.samples.items(), key=lambda kv: (-kv[0][1], -kv[0][0])):
        rows += [[int(r), e, l, v] for r, v in zip(s.replica_indices, s.values)]
    run.csv("samples.csv", ["replica", "eps", "lambda", "value"], rows)
    return camp


def _stats_outputs(cfg, run, camp):
    lam = cfg.lambda_list[0]
    reps = camp.reports(lam, cfg.n_boot, cfg.master_seed)
    run.csv("stats.csv", STATS_CSV_HEADER, [r.csv_row() for r in reps])
    degenerate = all(r.degenerate for r in reps)
    fit = None
    if not degenerate and len(reps) >= 3 and all(r.eps < 1 for r in reps):
        fit = rate_fit([r.eps for r in reps], [r.dK for r in reps], cfg.d, [r.noise_floor for r in reps])
        if fit.status != "ok":
            run.status = "inconclusive"
    elif not degenerate:
        run.status = "inconclusive"
    cauchy = cauchy_check(reps) if len(reps) >= 3 else None
    run.json("stats.json", {"lambda": lam, "reports": [r.to_dict() for r in reps], "degenerate": degenerate, "cauchy": cauchy})
    run.json("rate_fit.json", fit.to_dict() if fit else {"status": "degenerate" if degenerate else "inconclusive"})
    return reps, fit


def cmd_stats(cfg, run, threads):
    camp = _campaign(cfg, threads)
    return _stats_outputs(cfg, run, camp)


def _moment_outputs(cfg, run, camp):
    rows = moment_scan(camp, cfg.p_list, n_boot=cfg.n_boot, seed=cfg.master_seed)
    run.csv("moments.csv", MOMENT_CSV_HEADER, [r.csv_row() for r in rows])
    return rows


def cmd_moment_scan(cfg, run, threads):
    camp = _campaign(cfg, threads)
    return _moment_outputs(cfg, run, camp)


def _covariance_outputs(cfg, run, camp, threads):
    cfg.check_covariance()
    table = camp.covariance
    run.csv("covariance.csv", table.header(), list(table.rows()))
    if cfg.covariance.A_h is not None:
        A_h = np.asarray(cfg.covariance.A_h, dtype=float)
        A_src = "config"
    else:
        seeds = [SeedSpec(cfg.master_seed, r) for r in range(cfg.n_replicas)]
        A_h = ensemble_effective_matrix(cfg.shape, cfg.conductance_law, seeds, cfg.solver_config, threads).A_h
        A_src = "replicas"
    fit = fit_Q(table, A_h, cfg.covariance.r_min, cfg.covariance.r_max, cfg.covariance.fit_offset)
    out = fit.to_dict()
    out["A_h_source"] = A_src
    run.json("fit_q.json", out)
    rows = []
    for l in cfg.lambda_list:
        for e in cfg.eps_list:
            s = sigma2(fit.model, cfg.f, l, torus_side=e * cfg.L)
            rows.append([l, e, s.value, s.quad_err])
        s = sigma2(fit.model, cfg.f, l)
        rows.append([l, 0.0, s.value, s.quad_err])
    run.csv("sigma2.csv", ["lambda", "eps", "sigma2", "quad_err"], rows)
    return fit


def cmd_covariance(cfg, run, threads):
    cfg.check_covariance()
    camp = _campaign(cfg, threads, window=cfg.covariance.window)
    return _covariance_outputs(cfg, run, camp, threads)


def cmd_stein_bound(cfg, run, threads):
    cfg.check_stein()
    lam = cfg.lambda_list[0]
    camp = stein_campaign(
        cfg.shape, cfg.conductance_law, cfg.xi, cfg.f, cfg.eps_list, cfg.n_replicas, cfg.stein.R, cfg.stein.m,
        lam, cfg.master_seed, cfg.solver_config, threads, cfg.stein.anchor_seed, cfg.stein.n_groups,
    )
    run.json("stein.json", {"lambda": lam, "reports": [camp.reports[e].to_dict() for e in camp.eps_list]})
    if cfg.stein.decay:
        first, second = decay_campaign(cfg.shape, cfg.conductance_law, cfg.xi, cfg.n_replicas, cfg.master_seed, cfg.solver_config, threads)
        fits = {}
        for tb in (first, second):
            run.csv(f"decay_{tb.kind}.csv", ["separation", "moment", "stderr"], tb.rows())
            fits[tb.kind] = decay_fit(tb, L=cfg.L).to_dict()
        run.json("decay_fit.json", fits)
        if any(f["status"] != "ok" for f in fits.values()):
            run.status = "inconclusive"
    return camp


def cmd_lemma_check(cfg, run, threads):
    lm = cfg.lemma
    summary = {}
    for lemma, eps, mult in (("xesum", lm.xesum_eps, lm.xesum_multiples), ("eepsum", lm.eepsum_eps, lm.eepsum_multiples)):
        p = lm.p if lemma == "eepsum" else None
        scan = constant_scan(lemma, cfg.d, eps, mult, p)
        path = run.path(f"{lemma}.csv")
        path.write_text(scan.csv_text(), encoding="utf-8")
        summary[lemma] = scan.summary()
    run.json("lemma_summary.json", summary)
    return summary


def cmd_full_campaign(cfg, run, threads):
    cfg.check_covariance()
    cfg.check_stein()
    lam_list = sorted(set(cfg.lambda_list) | {1.0}, reverse=True)
    camp = _campaign(cfg, threads, lam_list=lam_list, window=cfg.covariance.window)
    _stats_outputs(cfg, run, camp)
    _moment_outputs(cfg, run, camp)
    _covariance_outputs(cfg, run, camp, threads)
    cmd_stein_bound(cfg, run, threads)
    cmd_lemma_check(cfg, run, threads)


COMMANDS = {
    "gen-env": cmd_gen_env,
    "solve-corrector": cmd_solve_corrector,
    "effective-matrix": cmd_effective_matrix,
    "sample-field": cmd_sample_field,
    "stats": cmd_stats,
    "moment-scan": cmd_moment_scan,
    "covariance": cmd_covariance,
    "stein-bound": cmd_stein_bound,
    "lemma-check": cmd_lemma_check,
    "full-campaign": cmd_full_campaign,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corrlab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None, help="override master_seed")
    ap.add_argument("--output", default=None, help="override output_dir")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.master_seed = args.seed
        if args.output is not None:
            cfg.output_dir = args.output
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.validate()
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as err:
        print(f"guard violation: {err}", file=sys.stderr)
        return EXIT_GUARD
    r = Run(args.command, cfg, Path(cfg.output_dir))
    if (r.final / "manifest.json").exists():
        print(r.final)
        log.info("output for this config already exists; nothing to do")
        return EXIT_OK
    r.open()
    try:
        COMMANDS[args.command](cfg, r, args.threads)
    except ConvergenceError as err:
        shutil.rmtree(r.tmp, ignore_errors=True)
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except PreconditionError as err:
        shutil.rmtree(r.tmp, ignore_errors=True)
        print(f"guard violation: {err}", file=sys.stderr)
        return EXIT_GUARD
    except ConfigError as err:
        shutil.rmtree(r.tmp, ignore_errors=True)
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (QuadratureError, CorrlabError) as err:
        shutil.rmtree(r.tmp, ignore_errors=True)
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    final = r.finish()
    print(final)
    return EXIT_INCONCLUSIVE if r.status == "inconclusive" else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
