"""Command-line driver: nsinflate <command> [key=value ...] [--config FILE] [--plot].

Every run writes JSON (and CSV for tables) into ``out``; each file carries the
resolved configuration, its hash and the profile table hash.  Outputs hold no
timestamps or timings, so identical configurations give identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_QUADRATURE = 4
EXIT_ORACLE = 5
EXIT_UNSTABLE = 6

COMMANDS = ("params", "build-data", "inflate", "sweep", "oracle", "simulate", "selftest")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        try:
            return _jsonable(x.item())
        except (TypeError, ValueError):
            pass
    return x


class Writer:
    """Single writer for the output files of one run."""

    def __init__(self, cfg: ExperimentConfig):
        from .profile import default_profile
        self.cfg = cfg
        self.dir = Path(cfg.get("out"))
        self.prefix = cfg.get("prefix") or ""
        self.profile_hash = default_profile().table_hash()
        self.files = []

    def _path(self, name):
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / f"{self.prefix}{name}"
        self.files.append(str(p))
        return p

    def provenance(self):
        return {"config": self.cfg.resolved(), "config_text": self.cfg.text(),
                "config_hash": self.cfg.hash(), "profile_hash": self.profile_hash}

    def json(self, name, payload: dict):
        body = dict(self.provenance())
        body["result"] = payload
        with open(self._path(name), "w") as fh:
            json.dump(_jsonable(body), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name, rows: list):
        if not rows:
            return
        keys = list(rows[0])
        for r in rows[1:]:
            keys += [k for k in r if k not in keys]
        with open(self._path(name), "w", newline="") as fh:
            fh.write(f"# config_hash: {self.cfg.hash()}\n# profile_hash: {self.profile_hash}\n")
            for line in self.cfg.text().splitlines():
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: _jsonable(r.get(k, "")) for k in keys})

    def text(self, name, body: str):
        with open(self._path(name), "w") as fh:
            fh.write(f"# config_hash: {self.cfg.hash()}\n# profile_hash: {self.profile_hash}\n")
            fh.write(body)

    def figure(self, name, fig):
        fig.savefig(self._path(name), dpi=120, metadata={"Software": None})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_params(cfg, w: Writer, plot=False):
    from .params import check_regime, derived_scales, remark_equivalences
    ps = cfg.param_set()
    regime = cfg.get("regime")
    rep = check_regime(ps, regime)
    out = {"params": ps.as_dict(), "regime": regime, "feasibility": rep.as_dict()}
    if ps.q is not None and not ps.p_is_inf:
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = derived_scales(ps, warn=False)
        out["derived"] = {"CN_log2": str(ds.CN_log2), "T0_log2": str(ds.T0_log2),
                          "inflation_rate": str(ds.inflation_rate), "N_over_CN": ds.N_over_CN,
                          "small": ds.small}
        if regime in ("THM1", "THM2"):
            out["equivalences"] = [e.as_dict() for e in remark_equivalences(ps, regime)]
    w.json("params.json", out)
    _echo(out["feasibility"])
    return EXIT_OK if rep.passed else EXIT_INFEASIBLE


def cmd_build_data(cfg, w: Writer, plot=False):
    from .data import build_data, certify_norms
    ps = cfg.param_set()
    data = build_data(ps, cfg.get("regime"))
    w.text("a0.bumps", data.a0.dumps())
    w.text("u0.bumps", data.u0.dumps())
    cert = certify_norms(data)
    out = {"params": ps.as_dict(), "regime": data.regime, "terms": len(data.a0) + len(data.u0),
           "certificate": cert.as_dict()}
    w.json("data.json", out)
    _echo(out["certificate"])
    return EXIT_OK


def cmd_inflate(cfg, w: Writer, plot=False):
    from .data import build_data
    from .inflation import appendixA_split, assemble_u1, compute_B1, compute_B2, lower_bound_chain
    ps = cfg.param_set()
    data = build_data(ps, cfg.get("regime"))
    t = cfg.get("t") or ps.T0
    asm = assemble_u1(data, t)
    rtol = cfg.get("rtol") or 1e-8
    out = {"params": ps.as_dict(), "regime": data.regime}
    if data.regime == "APPENDIX_A":
        b1, b2 = compute_B1(asm, rtol), compute_B2(asm)
        out["B1"], out["B2"] = b1.as_dict(), b2.as_dict()
        out["appendix_split"] = appendixA_split(asm, rtol=max(rtol, 1e-4)).as_dict()
    else:
        rep = lower_bound_chain(asm, data, rtol=rtol)
        out["report"] = rep.as_dict()
        out["B1"], out["B2"] = rep.B1.as_dict(), rep.B2.as_dict()
    w.json("inflate.json", out)
    _echo({k: out[k] for k in ("B1", "B2")})
    return EXIT_OK


def cmd_sweep(cfg, w: Writer, plot=False):
    from .inflation import inflation_sweep
    regime = cfg.get("regime")
    Ns = cfg.N_list or list(range(100, 161, 10))
    ps0 = cfg.param_set(N=Ns[0])
    p = "inf" if ps0.p_is_inf else ps0.p
    table = inflation_sweep(p, regime, Ns, k0=cfg.get("k0"), mu=cfg.get("mu"), t_fixed=cfg.get("t"),
                            rtol=cfg.get("rtol") or 1e-8, workers=cfg.get("workers"))
    rows = [r.as_dict() for r in table.rows]
    w.csv("sweep.csv", rows)
    summary = table.as_dict()
    w.json("sweep.json", summary)
    if plot:
        from .plots import sweep_figure
        w.figure("sweep.png", sweep_figure(table))
    _echo({k: summary[k] for k in ("slope", "expected", "slope_rel_deviation", "ratio_monotone", "ratio_slope")})
    return EXIT_OK


def cmd_oracle(cfg, w: Writer, plot=False):
    from .data import build_data
    from .inflation import assemble_u1, compute_B1, compute_B2, mc_oracle
    ps = cfg.param_set(default_N=6, default_k0=6)
    data = build_data(ps, cfg.get("regime"), check=False)
    t = cfg.get("t") or ps.T0
    asm = assemble_u1(data, t)
    which = ("B1", "B2") if cfg.get("functional") == "both" else (cfg.get("functional"),)
    out = {"params": ps.as_dict(), "t": t, "comparisons": []}
    ok = True
    for name in which:
        quad = (compute_B1(asm) if name == "B1" else compute_B2(asm)).to_float()
        mc = mc_oracle(data, t, n_samples=cfg.get("samples"), seed=cfg.get("seed"), functional=name)
        dev = (quad - mc.value) / mc.sigma if mc.sigma > 0 else (0.0 if quad == mc.value else math.inf)
        agree = mc.agrees(quad)
        ok &= agree
        out["comparisons"].append({"functional": name, "quadrature": quad, "mc": mc.as_dict(),
                                   "deviation_sigma": dev, "agrees": agree})
    w.json("oracle.json", out)
    _echo(out["comparisons"])
    return EXIT_OK if ok else EXIT_ORACLE


def cmd_simulate(cfg, w: Writer, plot=False):
    from .nse import run_probe
    ps = cfg.param_set(default_N=7, default_k0=5)
    w.dir.mkdir(parents=True, exist_ok=True)
    ckpt = w._path("state.npz")
    rep = run_probe(ps, mode=cfg.get("mode"), regime=cfg.get("regime"), M=cfg.get("M"),
                    steps=cfg.get("steps"), check=cfg.get("strict"),
                    identities_every=cfg.get("identities_every"), checkpoint=ckpt)
    w.csv("probe.csv", rep.history)
    d = rep.as_dict()
    d.pop("elapsed", None)
    w.json("simulate.json", d)
    if plot:
        from .plots import probe_figure
        w.figure("probe.png", probe_figure(rep))
    _echo({k: d[k] for k in ("Y", "X", "U1_probe", "y_ratio", "x_ratio", "final_ok", "max_divergence")})
    return EXIT_OK


def cmd_selftest(cfg, w: Writer, plot=False):
    from .selftest import run_selftest
    checks = run_selftest()
    w.json("selftest.json", {"checks": checks})
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}")
    return EXIT_OK if all(c["passed"] for c in checks) else EXIT_ERROR


HANDLERS = {"params": cmd_params, "build-data": cmd_build_data, "inflate": cmd_inflate, "sweep": cmd_sweep,
            "oracle": cmd_oracle, "simulate": cmd_simulate, "selftest": cmd_selftest}


def _echo(obj):
    print(json.dumps(_jsonable(obj), indent=1, sort_keys=True))


def build_parser():
    ap = argparse.ArgumentParser(prog="nsinflate", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("settings", nargs="*", metavar="key=value", help="configuration overrides")
    ap.add_argument("--config", help="key=value config file with optional [sections]")
    ap.add_argument("--out", help="output directory (same as out=...)")
    ap.add_argument("--plot", action="store_true", help="also write matplotlib PNG figures")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.settings)
        if args.out:
            overrides.append(f"out={args.out}")
        cfg = load_config(args.command, args.config, overrides)
        w = Writer(cfg)
        return HANDLERS[args.command](cfg, w, plot=args.plot)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # map library failures to exit codes
        code = classify(exc)
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return code


def classify(exc) -> int:
    from .bump import QuadratureError
    from .nse import AliasingError, PressureError, StabilityError
    from .params import InfeasibleParams
    if isinstance(exc, InfeasibleParams):
        return EXIT_INFEASIBLE
    if isinstance(exc, QuadratureError):
        return EXIT_QUADRATURE
    if isinstance(exc, (StabilityError, PressureError)):
        return EXIT_UNSTABLE
    if isinstance(exc, AliasingError):
        return EXIT_CONFIG
    return EXIT_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
