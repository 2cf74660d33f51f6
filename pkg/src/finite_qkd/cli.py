"""Command-line front end: certify, finite-rate, sweep, optimize, validate.

Configuration is a JSON document whose numeric fields carry their unit in
the key name (``distance_km``, ``n_tot_pulses``).  Exit status is 0 on
success, 1 when a computation fails and 2 when the configuration or an input
file is unusable.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .concentration import EpsilonBudget
from .pmqkd import (ChannelModel, ObservedCounts, PmQkdParams, RateReport, SearchSpec, certify, finite_rate,
                    monte_carlo_validate, optimize_parameters, plob_bound, sdp_problem,
                    simulate_channel_nominal)
from .sdp import (DualCertificate, SdpError, SdpProblem, SolveStatus, certificate_from_dict, certificate_to_dict,
                  problem_from_dict, solve_dual_with_margin, verify_certificate)

log = logging.getLogger("finite_qkd")

EXIT_OK = 0
EXIT_COMPUTATION = 1
EXIT_CONFIG = 2
MIN_TRIALS = 100
SWEEP_COLUMNS = ("distance_km", "eta_tot", "rate_finite", "rate_asymptotic", "rate_plob", "mu_x", "mu_y",
                 "n_sig_nom")


class ConfigError(ValueError):
    """The configuration or a referenced input file is unusable."""


# ---------------------------------------------------------------- configuration

_CHANNEL_KEYS = {"distance_km": "distance_km", "attenuation_db_per_km": "attenuation_db_per_km",
                 "detector_efficiency": "detector_efficiency", "dark_count_probability": "dark_count",
                 "charlie_position_fraction": "charlie_position"}
_SOURCE_KEYS = {"mu_x_photons": "mu_x", "mu_y_photons": "mu_y", "p_basis0": "p_basis0", "p_aux0": "p_aux0",
                "p_trash": "p_trash", "f_ec": "f_EC", "n_tot_pulses": "n_tot"}
_SEARCH_KEYS = {"mu_x_range_photons": "mu_x", "mu_y_range_photons": "mu_y", "p_basis0_range": "p_basis0",
                "p_aux0_range": "p_aux0", "p_trash_range": "p_trash", "coarse_points": "coarse_points",
                "fine_points": "fine_points", "prob_points": "prob_points"}
_COUNT_KEYS = ("n_sig", "n_bit_x", "n_bit_y", "n_pass_x", "n_pass_y")
_TOP_KEYS = {"protocol", "instance_file", "channel", "source", "budget", "sweep", "search", "validate",
             "observed_counts", "outputs", "seed"}


@dataclass(frozen=True)
class SweepRange:
    distance_min_km: float
    distance_max_km: float
    step_km: float
    optimize: bool = True

    def __post_init__(self):
        if self.step_km <= 0:
            raise ConfigError("sweep step_km must be positive")
        if self.distance_max_km < self.distance_min_km:
            raise ConfigError("sweep range is empty (distance_max_km < distance_min_km)")
        if self.distance_min_km < 0:
            raise ConfigError("sweep distances must be nonnegative")

    def distances(self) -> list[float]:
        n = int(math.floor((self.distance_max_km - self.distance_min_km) / self.step_km + 1e-9))
        return [self.distance_min_km + k * self.step_km for k in range(n + 1)]


@dataclass(frozen=True)
class RunConfig:
    protocol: str = "pmqkd"
    channel: ChannelModel = field(default_factory=lambda: ChannelModel(100.0))
    params: PmQkdParams = field(default_factory=PmQkdParams)
    sweep: SweepRange | None = None
    search: SearchSpec = field(default_factory=SearchSpec)
    trials: int = 2000
    state: str = "worst"
    counts: ObservedCounts | None = None
    instance_file: Path | None = None
    certificate_path: Path | None = None
    results_path: Path | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
        """Validate a parsed JSON configuration.

        Raises
        ------
        ConfigError
            On unknown keys, out-of-range values or missing input files.
        """
        if not isinstance(d, Mapping):
            raise ConfigError("configuration must be a JSON object")
        _reject_unknown(d, _TOP_KEYS, "top level")
        base_dir = base_dir or Path.cwd()
        try:
            protocol = str(d.get("protocol", "pmqkd"))
            if protocol not in ("pmqkd", "custom-instance-file"):
                raise ConfigError(f"unknown protocol {protocol!r}")
            instance = None
            if protocol == "custom-instance-file":
                if "instance_file" not in d:
                    raise ConfigError("protocol 'custom-instance-file' needs 'instance_file'")
                instance = _resolve(d["instance_file"], base_dir)
                if not instance.is_file():
                    raise ConfigError(f"instance file {instance} does not exist")
            channel = ChannelModel(**_mapped(d.get("channel", {"distance_km": 100.0}), _CHANNEL_KEYS, "channel"))
            budget = _budget(d.get("budget", {}))
            params = PmQkdParams(budget=budget, **_mapped(d.get("source", {}), _SOURCE_KEYS, "source"))
            sweep = None
            if "sweep" in d:
                s = d["sweep"]
                _reject_unknown(s, {"distance_min_km", "distance_max_km", "step_km", "optimize"}, "sweep")
                sweep = SweepRange(float(s["distance_min_km"]), float(s["distance_max_km"]), float(s["step_km"]),
                                   bool(s.get("optimize", True)))
            search_kw = _mapped(d.get("search", {}), _SEARCH_KEYS, "search")
            search = SearchSpec(**{k: tuple(float(x) for x in v) if isinstance(v, list) else int(v)
                                   for k, v in search_kw.items()})
            v = d.get("validate", {})
            _reject_unknown(v, {"trials", "state"}, "validate")
            state = str(v.get("state", "worst"))
            if state not in ("worst", "honest"):
                raise ConfigError("validate.state must be 'worst' or 'honest'")
            counts = None
            if "observed_counts" in d:
                oc = d["observed_counts"]
                _reject_unknown(oc, set(_COUNT_KEYS), "observed_counts")
                counts = ObservedCounts(**{k: float(oc[k]) for k in _COUNT_KEYS})
            out = d.get("outputs", {})
            _reject_unknown(out, {"certificate_path", "results_path"}, "outputs")
            seed = d.get("seed", 0)
            if not isinstance(seed, int) or isinstance(seed, bool):
                raise ConfigError("seed must be an integer")
            return cls(protocol, channel, params, sweep, search, int(v.get("trials", 2000)), state, counts,
                       instance,
                       _resolve(out["certificate_path"], base_dir) if "certificate_path" in out else None,
                       _resolve(out["results_path"], base_dir) if "results_path" in out else None, seed)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, path.parent)


def _reject_unknown(d: Mapping, allowed: set, where: str) -> None:
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _mapped(d: Mapping, keys: Mapping[str, str], where: str) -> dict:
    _reject_unknown(d, set(keys), where)
    return {keys[k]: v for k, v in d.items()}


def _resolve(p: str, base_dir: Path) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base_dir / path


def _budget(d: Mapping) -> EpsilonBudget:
    _reject_unknown(d, {"eps_ph", "s_pa_bits", "s_prime_bits", "relaxed_epsilon"}, "budget")
    if "relaxed_epsilon" in d:
        if set(d) != {"relaxed_epsilon"}:
            raise ConfigError("relaxed_epsilon cannot be combined with other budget fields")
        return EpsilonBudget.relaxed(float(d["relaxed_epsilon"]))
    return EpsilonBudget.uniform(float(d.get("eps_ph", 2.0 ** -66)), int(d.get("s_pa_bits", 66)),
                                 int(d.get("s_prime_bits", 32)))


# ---------------------------------------------------------------- helpers


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    path.write_text(text)


def _json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _pmqkd_reference(cfg: RunConfig) -> tuple[SdpProblem, DualCertificate]:
    p = cfg.params
    nominal = simulate_channel_nominal(p, cfg.channel)
    return certify(p.mu_x, p.mu_y, nominal.q_nom)


def _load_certificate(cfg: RunConfig, path: Path) -> DualCertificate:
    """Read a certificate and refuse it unless it matches the configured operators."""
    try:
        record = json.loads(path.read_text())
        cert, stored_hash = certificate_from_dict(record)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read certificate {path}: {exc}") from exc
    if not cert.verification.accepted:
        raise ConfigError(f"certificate {path} was not accepted at creation")
    p = cfg.params
    problem = sdp_problem(p.mu_x, p.mu_y, record["q_nom"])
    if problem.operator_hash() != stored_hash:
        raise ConfigError(f"certificate {path} is stale: operator hash does not match the configuration")
    v = verify_certificate(problem, cert)
    if not v.accepted:
        raise SdpError(SolveStatus.NUMERICAL_FAILURE, "stored certificate fails re-verification",
                       {"max_eig": v.max_eig, "radius": v.radius})
    return replace(cert, verification=v)


def _report_dict(rep: RateReport) -> dict:
    p = rep.params
    return {
        "distance_km": rep.channel.distance_km,
        "eta_tot": rep.channel.eta_tot,
        "rate_finite": rep.rate_finite,
        "rate_asymptotic": rep.rate_asymptotic,
        "rate_plob": plob_bound(rep.channel),
        "e_ph_asymptotic": rep.e_ph_asymptotic,
        "params": {"mu_x_photons": p.mu_x, "mu_y_photons": p.mu_y, "p_basis0": p.p_basis0, "p_aux0": p.p_aux0,
                   "p_trash": p.p_trash, "f_ec": p.f_EC, "n_tot_pulses": p.n_tot},
        "budget": p.budget.to_dict(),
        "result": rep.result.to_dict(),
        "deviations": {"delta_ph": rep.deviations.delta_ph, "delta_Q": list(rep.deviations.delta_Q),
                       "delta_P": rep.deviations.delta_P, "delta_bern": rep.deviations.delta_bern},
        "counts": {k: getattr(rep.counts, k) for k in _COUNT_KEYS},
        "n_sig_nom": rep.nominal.n_sig_nom,
    }


def _sweep_row(args: tuple[RunConfig, float]) -> dict:
    cfg, distance = args
    channel = replace(cfg.channel, distance_km=distance)
    try:
        if cfg.sweep is not None and cfg.sweep.optimize:
            rep = optimize_parameters(channel, cfg.search, cfg.params).report
        else:
            rep = finite_rate(cfg.params, channel)
        finite, asym, mu_x, mu_y, n_sig = (rep.rate_finite, rep.rate_asymptotic, rep.params.mu_x,
                                           rep.params.mu_y, rep.nominal.n_sig_nom)
    except (ValueError, RuntimeError) as exc:
        log.warning("no certified rate at %.1f km: %s", distance, exc)
        finite, asym, mu_x, mu_y = 0.0, 0.0, cfg.params.mu_x, cfg.params.mu_y
        n_sig = simulate_channel_nominal(cfg.params, channel).n_sig_nom
    return {"distance_km": distance, "eta_tot": channel.eta_tot, "rate_finite": max(finite, 0.0),
            "rate_asymptotic": max(asym, 0.0), "rate_plob": plob_bound(channel), "mu_x": mu_x, "mu_y": mu_y,
            "n_sig_nom": n_sig}


def run_sweep(cfg: RunConfig, threads: int = 1) -> list[dict]:
    """One row per distance, in distance order."""
    if cfg.sweep is None:
        raise ConfigError("configuration has no 'sweep' section")
    jobs = [(cfg, d) for d in cfg.sweep.distances()]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_sweep_row, jobs))
    return [_sweep_row(j) for j in jobs]


def write_sweep_csv(rows: list[dict], path: Path | None) -> None:
    if path is None:
        w = csv.DictWriter(sys.stdout, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_certify(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.protocol == "custom-instance-file":
        try:
            problem = problem_from_dict(json.loads(cfg.instance_file.read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load instance {cfg.instance_file}: {exc}") from exc
        cert = solve_dual_with_margin(problem)
        context = {"protocol": "custom-instance-file", "instance_file": str(cfg.instance_file)}
    else:
        problem, cert = _pmqkd_reference(cfg)
        context = {"protocol": "pmqkd", "mu_x_photons": cfg.params.mu_x, "mu_y_photons": cfg.params.mu_y,
                   "distance_km": cfg.channel.distance_km, "reference": {"p_aux0": 1.0, "p_basis0": 1.0}}
    if not cert.verification.accepted:
        log.error("certificate failed verification: max_eig=%g radius=%g", cert.verification.max_eig,
                  cert.verification.radius)
        return EXIT_COMPUTATION
    record = certificate_to_dict(cert, problem)
    record["context"] = context
    record["created_utc"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    _write_text(args.certificate or args.out or cfg.certificate_path, _json(record))
    return EXIT_OK


def cmd_finite_rate(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_pmqkd(cfg)
    path = args.certificate or cfg.certificate_path
    reference = _load_certificate(cfg, path) if path is not None and path.exists() else None
    if path is not None and reference is None:
        raise ConfigError(f"certificate file {path} does not exist")
    rep = finite_rate(cfg.params, cfg.channel, counts=cfg.counts, reference=reference)
    _write_text(args.out or cfg.results_path, _json(_report_dict(rep)))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_pmqkd(cfg)
    rows = run_sweep(cfg, args.threads)
    out = args.out or cfg.results_path
    try:
        write_sweep_csv(rows, out)
    except OSError as exc:
        log.error("cannot write %s: %s", out, exc)
        return EXIT_COMPUTATION
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_pmqkd(cfg)
    res = optimize_parameters(cfg.channel, cfg.search, cfg.params)
    body = _report_dict(res.report)
    body["evaluations"] = res.evaluations
    _write_text(args.out or cfg.results_path, _json(body))
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_pmqkd(cfg)
    if cfg.trials < MIN_TRIALS:
        raise ConfigError(f"validate needs at least {MIN_TRIALS} trials, got {cfg.trials}")
    if cfg.params.budget.eps_ph != 1.0:
        raise ConfigError("validate needs a relaxed budget ('budget': {'relaxed_epsilon': ...})")
    seed = cfg.seed if args.seed is None else args.seed
    rep = monte_carlo_validate(cfg.params, cfg.channel, cfg.trials, seed=seed, source=cfg.state)
    body = rep.to_dict()
    if not rep.measurable:
        body["note"] = "allocated epsilon below 10/trials: threshold checks refused"
    _write_text(args.out or cfg.results_path, _json(body))
    if rep.measurable and not rep.all_passed:
        return EXIT_COMPUTATION
    return EXIT_OK


def _require_pmqkd(cfg: RunConfig) -> None:
    if cfg.protocol != "pmqkd":
        raise ConfigError("only 'certify' accepts a custom instance file")


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "certify": cmd_certify,
    "finite-rate": cmd_finite_rate,
    "sweep": cmd_sweep,
    "optimize": cmd_optimize,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finite-qkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=True, help="run configuration (JSON)")
        p.add_argument("--certificate", type=Path, help="certificate file to write (certify) or read")
        p.add_argument("--out", type=Path, help="output path; standard output when omitted")
        p.add_argument("--seed", type=int, help="Monte Carlo seed, overriding the configuration")
        p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    if args.threads < 1:
        log.error("--threads must be at least 1")
        return EXIT_CONFIG
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (SdpError, RuntimeError, ValueError, ArithmeticError) as exc:
        log.error("computation failed: %s", exc)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
