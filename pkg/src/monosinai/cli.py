"""Command-line front end: ``check``, ``simulate``, ``factor`` and ``verify``.

Exit codes: 0 ok, 2 precondition failure, 3 degenerate construction,
4 parameter search exhausted, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .coupling import Coupling, quantile_coupling
from .dist import Dist, DistributionError, Relation, dominates, entropy, r_dominates
from .process import (
    DegenerateConstruction,
    IIDJoining,
    MarkerConfig,
    SampledJoining,
    build_block_joining,
    decompose,
    filler_entropies,
    frozen_stats,
    sample_alternating,
    weak_star_distance,
)

EXIT_OK = 0
EXIT_PRECONDITION = 2
EXIT_DEGENERATE = 3
EXIT_EXHAUSTED = 4
EXIT_VERIFY = 5

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class PreconditionFailed(RuntimeError):
    pass


def derive_rng(master: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent stream for ``(master seed, label, index)``.

    The label is hashed with CRC-32 so the mapping is stable across
    platforms and interpreter runs.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master), zlib.crc32(label.encode()), int(index)]))


# ---------------------------------------------------------------- config

_TOP_KEYS = {"schema", "p", "q", "relation", "marker", "epsilon", "seedCoupling", "rho",
             "search", "simulate", "factor", "seed", "trials", "budgets", "witness"}
_SECTION_KEYS = {
    "marker": {"a", "b"},
    "search": {"k", "n0Max", "kSuper", "window", "windows", "imax", "smbTrials", "smbHorizon", "smbGrid"},
    "simulate": {"k", "length", "windows", "imax", "excerpt"},
    "factor": {"length", "windows", "m", "exactHorizon", "collisionDraws"},
    "budgets": {"support"},
}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(extra)}")


def load_config(text: str) -> dict:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "config")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"schema must be {SCHEMA_VERSION}")
    for key, allowed in _SECTION_KEYS.items():
        if key in cfg:
            if not isinstance(cfg[key], dict):
                raise ConfigError(f"{key} must be an object")
            _reject_unknown(cfg[key], allowed, key)
    for key in ("p", "q"):
        if key not in cfg:
            raise ConfigError(f"missing field {key}")
    try:
        Dist(cfg["p"])
        Dist(cfg["q"])
    except DistributionError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


class Experiment:
    """Validated view of a configuration."""

    def __init__(self, cfg: dict, seed: int | None = None, trials: int | None = None,
                 imax: int | None = None, exact: bool = False):
        self.raw = cfg
        self.p = Dist(cfg["p"])
        self.q = Dist(cfg["q"])
        if self.p.n != self.q.n:
            raise ConfigError("p and q must have the same length")
        self.n = self.p.n
        rel = cfg.get("relation")
        self.relation = Relation(self.n, [tuple(x) for x in rel]) if rel is not None else None
        m = cfg.get("marker", {})
        self.marker = MarkerConfig(int(m.get("a", 0)), int(m.get("b", 1)), 1)
        self.epsilon = float(cfg.get("epsilon", 0.3))
        self.seed = int(seed if seed is not None else cfg.get("seed", 0))
        self.trials = trials if trials is not None else cfg.get("trials")
        self.imax = imax
        self.exact = exact
        self.budget = int(cfg.get("budgets", {}).get("support", 1 << 22))
        self.want_witness = bool(cfg.get("witness", False))

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def seed_coupling(self) -> Coupling:
        """Coupling whose i.i.d. extension is the seed joining."""
        given = self.raw.get("seedCoupling")
        if given is not None:
            mass = {(int(a), int(b)): float(v) for a, b, v in given}
            c = Coupling.from_mass(range(self.n), range(self.n), mass)
            pm, qm = c.marginals()
            if not (np.allclose(pm.probs, self.p.probs, atol=1e-10) and np.allclose(qm.probs, self.q.probs, atol=1e-10)):
                raise PreconditionFailed("seedCoupling marginals differ from p and q")
            return c
        if self.relation is None:
            if not dominates(self.p, self.q):
                raise PreconditionFailed("p does not dominate q")
            return quantile_coupling(self.p, self.q)
        w = r_dominates(self.p, self.q, self.relation)
        if w is None:
            raise PreconditionFailed("no coupling of p and q is carried by the relation")
        return w

    def rho(self, seed: Coupling) -> Coupling | None:
        choice = self.raw.get("rho", "seed")
        if choice == "seed":
            return None
        if choice == "quantile":
            return quantile_coupling(self.p, self.q)
        mass = {(int(a), int(b)): float(v) for a, b, v in choice}
        return Coupling.from_mass(range(self.n), range(self.n), mass)


# ---------------------------------------------------------------- output helpers

def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(out: Path | None, name: str, text: str) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


# ---------------------------------------------------------------- commands

def cmd_check(exp: Experiment, out: Path | None) -> int:
    hp, hq = entropy(exp.p), entropy(exp.q)
    report = {"p": list(exp.p.probs), "q": list(exp.q.probs), "Hp": hp, "Hq": hq, "entropyGap": hp - hq}
    if exp.relation is None:
        ok = dominates(exp.p, exp.q)
        report["dominates"] = ok
        witness = quantile_coupling(exp.p, exp.q) if ok else None
    else:
        witness = r_dominates(exp.p, exp.q, exp.relation)
        ok = witness is not None
        report["relationFeasible"] = ok
    report["eligible"] = bool(ok and hp > hq)
    if witness is not None and exp.want_witness:
        _write(out, "witness.txt", witness.to_triplets())
        report["witnessSupport"] = len(witness.mass)
    text = _dump_json(report)
    _write(out, "check.json", text)
    sys.stdout.write(text)
    return EXIT_OK if report["eligible"] else EXIT_PRECONDITION


def cmd_simulate(exp: Experiment, out: Path | None) -> int:
    sim = exp.section("simulate")
    ks = sim.get("k", [4, 6, 8, 10])
    length = int(exp.trials or sim.get("length", 1_000_000))
    nwin = int(sim.get("windows", 2))
    imax = int(exp.imax if exp.imax is not None else sim.get("imax", 1))
    excerpt = int(sim.get("excerpt", 2000))
    seed = exp.seed_coupling()
    rho = exp.rho(seed)
    rows = []
    summary = []
    exact_side = IIDJoining(seed, exp.budget)
    for k in ks:
        bj = build_block_joining(seed, exp.marker.with_k(int(k)), rho, exp.budget)
        ws = [sample_alternating(derive_rng(exp.seed, f"simulate/k={k}", i), bj, length) for i in range(nwin)]
        fs = frozen_stats(ws, bj.cfg, exp.p)
        d = weak_star_distance(exact_side, SampledJoining(ws, exp.n), imax)
        rows.append([int(k), fs.p_frozen, fs.bound, d.estimate, d.truncation_bound, sum(len(w) for w in ws)])
        summary.append({"k": int(k), "pFrozenStderr": fs.stderr, "weakStarTerms": list(d.terms),
                        "violations": int(sum(np.count_nonzero(~_allowed(exp)[w.x, w.y]) for w in ws))})
        w0 = ws[0]
        cut = type(w0)(w0.x[:excerpt], w0.y[:excerpt], 0)
        _write(out, f"window_k{k}.txt", cut.to_text())
        try:
            _write(out, f"decomposition_k{k}.json", decompose(cut.x, bj.cfg).to_json() + "\n")
        except DistributionError:
            _write(out, f"decomposition_k{k}.json", "null\n")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["k", "pFrozen", "frozenBound", "weakStarEstimate", "truncationBound", "samples"])
    for r in rows:
        wr.writerow([r[0]] + [repr(float(v)) for v in r[1:5]] + [r[5]])
    _write(out, "stats.csv", buf.getvalue())
    _write(out, "simulate.json", _dump_json(summary))
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _allowed(exp: Experiment) -> np.ndarray:
    from .factorlab import relation_matrix

    return relation_matrix(exp.n, exp.relation)


def cmd_factor(exp: Experiment, out: Path | None) -> int:
    from .factorlab import run_factor

    report = run_factor(exp)
    _write(out, "factor_report.json", _dump_json(report))
    sys.stdout.write(_dump_json({"passes": report["passes"], "params": report.get("params")}))
    return EXIT_OK if report["passes"] else EXIT_VERIFY


def cmd_verify(suite: str, trials: int | None, seed: int) -> int:
    from .verify import SUITES

    names = sorted(SUITES) if suite == "all" else [suite]
    failed = 0
    for name in names:
        if name not in SUITES:
            sys.stdout.write(f"unknown suite {name}\n")
            return EXIT_PRECONDITION
        ok, detail = SUITES[name](trials, seed)
        sys.stdout.write(f"{name}: {'PASS' if ok else 'FAIL'} {detail}\n")
        failed += not ok
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="monosinai", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("check", "simulate", "factor"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int, default=None, help="master seed (u64)")
        sp.add_argument("--out", type=Path, default=None)
        mode = sp.add_mutually_exclusive_group()
        mode.add_argument("--exact", dest="exact", action="store_true")
        mode.add_argument("--sampled", dest="exact", action="store_false")
        sp.set_defaults(exact=False)
        sp.add_argument("--imax", type=int, default=None)
        sp.add_argument("--trials", type=int, default=None)
    vp = sub.add_parser("verify")
    vp.add_argument("suite", nargs="?", default="all")
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--trials", type=int, default=None)
    return ap


def main(argv: list[str] | None = None) -> int:
    from .factorlab import SearchExhausted

    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return cmd_verify(args.suite, args.trials, args.seed)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config.read_text())
        exp = Experiment(cfg, args.seed, args.trials, args.imax, args.exact)
        if args.command == "check":
            return cmd_check(exp, args.out)
        if args.command == "simulate":
            return cmd_simulate(exp, args.out)
        return cmd_factor(exp, args.out)
    except (ConfigError, PreconditionFailed, DistributionError, OSError) as exc:
        sys.stderr.write(f"precondition failed: {exc}\n")
        return EXIT_PRECONDITION
    except DegenerateConstruction as exc:
        sys.stderr.write(f"degenerate construction: {exc}\n")
        return EXIT_DEGENERATE
    except SearchExhausted as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_EXHAUSTED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
