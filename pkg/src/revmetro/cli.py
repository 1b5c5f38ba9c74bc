"""Command-line experiment runner.

Commands: synthesize, protocol, loss, scaling, verify. Settings come from a
flat ``key = value`` file (``--config``) with command-line overrides
(``--n``, ``--out``, ``--set key=value``); overrides win.

Exit codes: 0 success, 2 validation error, 3 convergence failure,
4 numerical-consistency failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import krotov, loss, metrology
from ._io import atomic_write_text, csv_text, json_text
from .dynamics import ControlledSystem, Drift, PulseFormatError, read_pulse, write_pulse
from .hilbert import InvalidCutoffError, NumericalConsistencyError, Space

log = logging.getLogger("revmetro")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_NUMERICAL = 0, 2, 3, 4

# cache key version; bump when the optimizer changes in a way that alters pulses
CACHE_VERSION = 1


class ConfigError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) not in (1, 4):
        raise ValueError("expected one value or four comma-separated values")
    return vals


def _optional_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


def _optional_float(text: str) -> float | None:
    return None if text.lower() in ("", "none") else float(text)


# key -> (parser, default)
SCHEMA = {
    "N": (int, 1),
    "N_x": (_optional_int, None),
    "N_min": (int, 1),
    "N_max": (int, 10),
    "omega1": (float, 1.0),
    "omega2": (float, 2.0),
    "t_final": (float, 40.0),
    "n_steps": (int, 2000),
    "cutoff_headroom": (int, 2),
    "lambda_a": (_float_list, (krotov.KrotovConfig.lambda_a,)),
    "ramp_fraction": (float, 0.05),
    "target_infidelity": (float, 1e-3),
    "max_iters": (int, 5000),
    "guess_amplitude": (float, krotov.KrotovConfig.guess_amplitude),
    "guess_fx": (float, krotov.KrotovConfig.guess_fx),
    "guess_seed": (_optional_int, None),
    "phi_points": (int, 6000),
    "singular_threshold": (float, metrology.SINGULAR_THRESHOLD),
    "fd_step": (float, metrology.FD_STEP),
    "p0": (_optional_float, None),
    "p1": (_optional_float, None),
    "p2": (_optional_float, None),
    "lambda1": (_optional_float, None),
    "lambda2": (_optional_float, None),
    "dt": (_optional_float, None),
    "out": (str, "results"),
    "pulse_cache": (str, ""),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **kw) -> "RunConfig":
        return RunConfig({**self.values, **kw})

    @property
    def out(self) -> Path:
        return Path(self["out"])

    @property
    def cache_dir(self) -> Path:
        return Path(self["pulse_cache"]) if self["pulse_cache"] else self.out / "pulses"

    @property
    def drift(self) -> Drift:
        return Drift(self["omega1"], self["omega2"])

    @property
    def n_x(self) -> int:
        return self["N"] if self["N_x"] is None else self["N_x"]

    def krotov_config(self) -> krotov.KrotovConfig:
        lam = self["lambda_a"]
        return krotov.KrotovConfig(
            lambda_a=lam[0] if len(lam) == 1 else list(lam),
            ramp_fraction=self["ramp_fraction"], max_iters=self["max_iters"],
            target_infidelity=self["target_infidelity"],
            guess_amplitude=self["guess_amplitude"], guess_fx=self["guess_fx"],
            guess_seed=self["guess_seed"])

    def loss_spec(self) -> loss.LossSpec:
        probs = [self[k] for k in ("p0", "p1", "p2")]
        rates = [self[k] for k in ("lambda1", "lambda2", "dt")]
        if all(r is not None for r in rates) and all(p is None for p in probs):
            # first-order conversion on the NOON resource, where <n_j> = N/2
            n = self["N"]
            p1 = rates[2] * rates[0] ** 2 * n / 2
            p2 = rates[2] * rates[1] ** 2 * n / 2
            if max(p1, p2) > loss.MAX_JUMP_PROBABILITY:
                raise loss.LossValidityError(
                    f"jump probabilities ({p1:.3g}, {p2:.3g}) exceed "
                    f"{loss.MAX_JUMP_PROBABILITY}; use a smaller dt")
            return loss.LossSpec.probabilities(1 - p1 - p2, p1, p2)
        if any(r is not None for r in rates):
            raise ConfigError("give either p0, p1, p2 or lambda1, lambda2, dt, not a mix")
        if all(p is None for p in probs):
            return loss.LossSpec.probabilities(0.9, 0.05, 0.05)
        if any(p is None for p in probs):
            raise ConfigError("p0, p1 and p2 must be given together")
        return loss.LossSpec.probabilities(*probs)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def _convert(key: str, value: str, where: str):
    parser = SCHEMA[key][0]
    try:
        return parser(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {value!r} for {key!r}: {exc}") from None


def build_config(config_path=None, overrides=None) -> RunConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        values.update(parse_config_text(text, str(config_path)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, value, "override") if isinstance(value, str) else value
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Range checks that must pass before any computation."""
    n, n_x, head = cfg["N"], cfg.n_x, cfg["cutoff_headroom"]
    if n < 1 or n_x < 1:
        raise ConfigError(f"N and N_x must be >= 1, got N={n}, N_x={n_x}")
    cutoff = max(n, n_x) + head
    if head < 1:
        raise ConfigError(f"N={max(n, n_x)} does not fit below the Fock cutoff {cutoff}; "
                          "cutoff_headroom must be >= 1")
    if not 1 <= cfg["N_min"] <= cfg["N_max"]:
        raise ConfigError("need 1 <= N_min <= N_max")
    if cfg["t_final"] <= 0 or cfg["n_steps"] < 1:
        raise ConfigError("t_final must be positive and n_steps >= 1")
    if cfg["phi_points"] < 2:
        raise ConfigError("phi_points must be >= 2")
    if cfg["fd_step"] <= 0 or cfg["singular_threshold"] < 0:
        raise ConfigError("fd_step must be positive and singular_threshold nonnegative")
    try:
        cfg.krotov_config()
        cfg.loss_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --- pulse synthesis and caching ---------------------------------------------

def control_problem(cfg: RunConfig, adapted: bool, n: int | None = None) -> krotov.ControlProblem:
    n = cfg["N"] if n is None else n
    if adapted:
        return loss.adapted_control_problem(n, cfg.drift, cfg["t_final"], cfg["n_steps"],
                                            cfg["cutoff_headroom"])
    n_x = cfg["N_x"] if n == cfg["N"] else None
    return metrology.closed_control_problem(n, n_x, cfg.drift, cfg["t_final"], cfg["n_steps"],
                                            cfg["cutoff_headroom"])


def cache_key(cfg: RunConfig, adapted: bool, n: int) -> str:
    """sha256 over everything that determines the optimized pulse."""
    problem = control_problem(cfg, adapted, n)
    payload = {
        "version": CACHE_VERSION,
        "pairs": "adapted" if adapted else "closed",
        "N": n,
        "N_x": cfg.n_x if n == cfg["N"] and not adapted else n,
        "cutoffs": [problem.space.cutoff1, problem.space.cutoff2],
        "drift": [cfg["omega1"], cfg["omega2"]],
        "grid": [cfg["t_final"], cfg["n_steps"]],
        "optimizer": {k: cfg[k] for k in ("lambda_a", "ramp_fraction", "target_infidelity",
                                          "max_iters", "guess_amplitude", "guess_fx",
                                          "guess_seed")},
    }
    blob = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()


def pulse_path(cfg: RunConfig, adapted: bool, n: int) -> Path:
    tag = "adapted" if adapted else "closed"
    return cfg.cache_dir / f"pulse_{tag}_N{n}_{cache_key(cfg, adapted, n)[:16]}.csv"


def synthesize(cfg: RunConfig, adapted: bool = False, n: int | None = None) -> tuple[Path, bool]:
    """Optimize (or fetch from cache) the pulse for ``n``; returns ``(path, cache_hit)``."""
    n = cfg["N"] if n is None else n
    path = pulse_path(cfg, adapted, n)
    if path.exists():
        log.info("cache hit: %s", path)
        return path, True
    problem = control_problem(cfg, adapted, n)
    kcfg = cfg.krotov_config()

    def progress(it, j, upd):
        if it % 50 == 0:
            log.info("N=%d iter %d  J_T=%.6e  max|dc|=%.3e", n, it, j, upd)

    record = krotov.optimize(problem, kcfg, callback=progress)
    history = path.with_name(path.stem + "_history.csv")
    extra = {"N": n, "pairs": "adapted" if adapted else "closed",
             "J_T": f"{record.final_infidelity:.17g}", "iterations": len(record.iterations) - 1,
             "cache_key": cache_key(cfg, adapted, n)}
    if not record.converged:
        failed = path.with_name(path.name + ".failed")
        write_pulse(record.final_pulse, failed, extra)
        atomic_write_text(history.with_name(history.name + ".failed"), record.history_csv())
        raise ConvergenceError(
            f"N={n}: J_T={record.final_infidelity:.3e} after {len(record.iterations) - 1} "
            f"iterations (target {kcfg.target_infidelity:g}); partial pulse in {failed}")
    atomic_write_text(history, record.history_csv())
    write_pulse(record.final_pulse, path, extra)
    return path, False


def load_protocol(cfg: RunConfig, exact: bool, adapted: bool, n: int | None = None) -> metrology.ProtocolSpec:
    n = cfg["N"] if n is None else n
    if exact:
        if adapted:
            return loss.exact_adapted_protocol(n, cfg["cutoff_headroom"])
        n_x = cfg["N_x"] if n == cfg["N"] else None
        return metrology.exact_protocol(n, n_x, cfg["cutoff_headroom"])
    path = pulse_path(cfg, adapted, n)
    if not path.exists():
        flag = " --adapted" if adapted else ""
        raise ConfigError(f"no optimized pulse for N={n} at {path}; "
                          f"run 'revmetro synthesize{flag} --n {n}' with the same config first")
    pulse = read_pulse(path)
    problem = control_problem(cfg, adapted, n)
    system = ControlledSystem(problem.space, problem.drift)
    u = system.build_unitary(pulse)
    evolved = [u @ psi for psi in problem.initial]
    eps = krotov.infidelity(evolved, problem.targets)
    n_x = n if adapted else (cfg.n_x if n == cfg["N"] else n)
    return metrology.ProtocolSpec(n, u, problem.space, n_x, infidelity=eps)


# --- commands ------------------------------------------------------------------

def cmd_synthesize(cfg: RunConfig, args) -> int:
    path, hit = synthesize(cfg, args.adapted)
    print(f"{'cache hit' if hit else 'converged'}: {path}")
    return EXIT_OK


def _protocol_outputs(cfg: RunConfig, spec: metrology.ProtocolSpec, exact: bool):
    res = metrology.sweep(spec, cfg["phi_points"], cfg["fd_step"], cfg["singular_threshold"],
                          closed_form=exact)
    summary = {**res.summary(), "N_x": spec.n_x, "source": "exact" if exact else "pulse"}
    return res, summary


def cmd_protocol(cfg: RunConfig, args) -> int:
    spec = load_protocol(cfg, args.exact, False)
    res, summary = _protocol_outputs(cfg, spec, args.exact)
    stem = cfg.out / f"protocol_N{spec.n}"
    atomic_write_text(stem.with_suffix(".csv"), res.to_csv())
    atomic_write_text(stem.with_suffix(".json"), json_text(summary))
    print(json_text(summary), end="")
    return EXIT_OK


def cmd_loss(cfg: RunConfig, args) -> int:
    spec = load_protocol(cfg, args.exact, True)
    lspec = cfg.loss_spec()
    res = loss.loss_sweep(spec, lspec, cfg["phi_points"], cfg["singular_threshold"])
    summary = {**res.summary(), "p1": lspec.p1, "p2": lspec.p2, "infidelity": spec.infidelity,
               "source": "exact" if args.exact else "pulse"}
    stem = cfg.out / f"loss_N{spec.n}"
    atomic_write_text(stem.with_suffix(".csv"), res.to_csv())
    atomic_write_text(stem.with_suffix(".json"), json_text(summary))
    print(json_text(summary), end="")
    return EXIT_OK


def _scaling_member(cfg: RunConfig, exact: bool, n: int):
    try:
        spec = load_protocol(cfg, exact, False, n)
        res = metrology.sweep(spec, cfg["phi_points"], cfg["fd_step"], cfg["singular_threshold"])
        return n, res, None
    except (ValueError, ArithmeticError, PulseFormatError, OSError) as exc:
        return n, None, f"{type(exc).__name__}: {exc}"


def cmd_scaling(cfg: RunConfig, args) -> int:
    ns = list(range(cfg["N_min"], cfg["N_max"] + 1))
    # N_x follows N for every member
    cfg = cfg.replace(N_x=None)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            members = list(pool.map(_scaling_member, [cfg] * len(ns), [args.exact] * len(ns), ns))
    else:
        members = [_scaling_member(cfg, args.exact, n) for n in ns]
    ok = [res for _, res, err in members if err is None]
    errors = {str(n): err for n, _, err in members if err is not None}
    out = {"N": [r.n for r in ok], "partial": bool(errors), "errors": errors,
           "source": "exact" if args.exact else "pulse",
           "infidelity": {str(r.n): r.infidelity for r in ok}}
    if len(ok) >= 2:
        out.update(metrology.scaling_fit(ok).as_dict())
    rows = []
    for r in ok:
        s = r.summary()
        rows.append([r.n, s["infidelity"], s["fisher_mean"], s["fisher_min"], s["fisher_max"],
                     s["inv_delta_phi_max"], s["inv_delta_phi_median"], s["inv_delta_phi_mean"],
                     s["n_excluded"]])
    header = ["N", "infidelity", "fisher_mean", "fisher_min", "fisher_max", "inv_delta_phi_max",
              "inv_delta_phi_median", "inv_delta_phi_mean", "n_excluded"]
    atomic_write_text(cfg.out / "scaling.csv", csv_text(header, rows))
    atomic_write_text(cfg.out / "scaling.json", json_text(out))
    print(json_text(out), end="")
    for n, err in errors.items():
        print(f"N={n} failed: {err}", file=sys.stderr)
    return EXIT_CONVERGENCE if errors else EXIT_OK


def verification_checks(cfg: RunConfig) -> dict:
    """Oracle cross-checks; each entry reports its measured value and pass flag."""
    checks = {}
    n = cfg["N"]

    # jump unraveling against an Euler step of the master equation
    space = Space.for_noon(3)
    psi = np.zeros(space.dim, dtype=complex)
    for s, n1, n2, amp in ((0, 1, 0, 1), (0, 2, 1, 1), (1, 0, 3, 1j)):
        psi[space.index(s, n1, n2)] = amp
    psi /= np.linalg.norm(psi)
    errs = []
    for dt in (1e-2, 5e-3):
        spec = loss.LossSpec.rates(0.1, 0.1, dt)
        rho = loss.jump_decompose(psi, spec, space).density_matrix()
        errs.append(float(np.max(np.abs(rho - loss.lindblad_euler_oracle(psi, spec, space)))))
    ratio = errs[0] / errs[1]
    checks["jump_vs_lindblad_ratio"] = {"value": ratio, "pass": 3.5 <= ratio <= 4.5}

    # finite-difference Fisher information of the pure protocol
    spec = metrology.exact_protocol(n)
    phi, h = 0.3 / n, 1e-5
    psi_r = metrology.protocol_states(spec, phi)
    dpsi = (metrology.protocol_states(spec, phi + h) - metrology.protocol_states(spec, phi - h)) / (2 * h)
    f_fd = float(metrology.pure_state_fisher(psi_r, dpsi))
    checks["fisher_fd_pure"] = {"value": f_fd, "expected": n * n,
                                "pass": abs(f_fd - n * n) <= 1e-6 * n * n}

    # dense SLD Fisher of the lossy mixture against the component form
    aspec = loss.exact_adapted_protocol(n)
    lspec = cfg.loss_spec()
    f_comp = loss.fisher_mixed(aspec, lspec, phi)
    f_dense = loss.fisher_sld_dense(
        lambda p: loss.decayed_protocol(aspec, lspec, p).density_matrix(), phi)
    checks["fisher_sld_dense"] = {"value": f_dense, "expected": f_comp,
                                  "pass": abs(f_dense - f_comp) <= 1e-5 * max(1.0, f_comp)}

    # different unitary completions give the same protocol output
    grid = metrology.phase_grid(64)
    a = metrology.protocol_states(metrology.exact_protocol(n), grid)
    b = metrology.protocol_states(metrology.exact_protocol(n, seed=1), grid)
    dev = float(np.max(np.abs(a - b)))
    checks["completion_invariance"] = {"value": dev, "pass": dev <= 1e-10}
    return checks


def cmd_verify(cfg: RunConfig, args) -> int:
    checks = verification_checks(cfg)
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}  {c['value']:.6g}")
    atomic_write_text(cfg.out / "verify.json", json_text(checks))
    return EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_NUMERICAL


COMMANDS = {
    "synthesize": cmd_synthesize,
    "protocol": cmd_protocol,
    "loss": cmd_loss,
    "scaling": cmd_scaling,
    "verify": cmd_verify,
}


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revmetro", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--exact", action="store_true",
                        help="use an exact unitary completion instead of an optimized pulse")
    parser.add_argument("--adapted", action="store_true",
                        help="synthesize the four-pair loss-adapted mapping")
    parser.add_argument("--n", type=int, help="photon number N (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for scaling runs")
    parser.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                        metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = dict(args.overrides)
    if args.n is not None:
        overrides["N"] = args.n
    if args.out is not None:
        overrides["out"] = args.out
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = build_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InvalidCutoffError, loss.LossValidityError, krotov.ProblemError,
            PulseFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (NumericalConsistencyError, krotov.MonotonicityError, metrology.SingularPointError,
            loss.PostSelectionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
