"""Command-line front end.

Four subcommands share one executable:

    bench     run a configured simulation and write report + trace files
    verify    run built-in invariant suites, print one PASS/FAIL line each
    stats     rank statistics on a plain-text table of numbers
    workload  generate a request list and dump it as CSV

Configs are INI files with [workload], [engine], [adapters] and, depending
on the mode, [hardware]/[model] sections. Bare file names that do not exist
on disk are looked up among the bundled data files, so
`prefillsim bench --config uniform_32.cfg` works from any directory.

Exit codes: 0 success, 1 at least one verification check failed,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .adapters import (
    AdapterKind,
    AdapterParams,
    PositionSchedule,
    ScalingRule,
    delta_for_rows,
    first_step_delta_norm,
    init_zero_delta,
    apply_masked,
)
from .costmodel import (
    H100_PROFILE,
    SHAPE_8B,
    HardwareProfile,
    ModelShape,
    lora_down_intensity,
)
from .engine import AdapterSetup, EngineConfig, EngineMode, simulate
from .errors import ConfigError, StateError
from .linalg import rng_from_seed
from .metrics import cmh_test, wilcoxon_signed_rank
from .model import ModelConfig
from .workload import AdapterMix, WorkloadConfig, dump_workload, generate_workload

__all__ = ["RunConfig", "entry"]

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def _resolve_input(name: str | Path) -> Path:
    """Resolve a user-supplied path, falling back to the bundled data dir."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("prefillsim").joinpath("data", str(name))
    try:
        if bundled.is_file():
            return Path(str(bundled))
    except OSError:
        pass
    raise ConfigError(f"no such file: {name}")


# --------------------------------------------------------------- run config


@dataclass(frozen=True)
class RunConfig:
    """Everything one bench run needs, parsed from a single INI file."""

    workload: WorkloadConfig
    engine: EngineConfig
    setup: AdapterSetup | None
    n_adapters: int
    out: str

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = _resolve_input(path)
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        try:
            return cls._parse(parser, path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    @classmethod
    def _parse(cls, parser: configparser.ConfigParser, path: Path) -> "RunConfig":
        if "workload" not in parser:
            raise ConfigError(f"{path}: missing [workload] section")
        if "engine" not in parser:
            raise ConfigError(f"{path}: missing [engine] section")
        w = parser["workload"]
        workload = WorkloadConfig(
            n_requests=w.getint("n_requests"),
            n_adapters=w.getint("n_adapters"),
            mix=AdapterMix(w.get("mix", "uniform").lower()),
            seed=w.getint("seed", 0),
            l_max=w.getint("l_max", 2048),
        )

        e = parser["engine"]
        mode = e.get("mode", EngineMode.COST).lower()
        hardware = H100_PROFILE
        shape = SHAPE_8B
        model = None
        if mode == EngineMode.COST:
            if "hardware" in parser:
                hw = parser["hardware"]
                hardware = HardwareProfile(
                    peak_flops=hw.getfloat("peak_flops"),
                    hbm_bandwidth=hw.getfloat("hbm_bandwidth"),
                    link_bandwidth=hw.getfloat("link_bandwidth"),
                    bytes_per_param=hw.getint("bytes_per_param"),
                    ridge=hw.getfloat("ridge"),
                    adapter_op_overhead_s=hw.getfloat("adapter_op_overhead_s", 8e-6),
                )
            if "model" in parser:
                m = parser["model"]
                shape = ModelShape(
                    d_model=m.getint("d_model"),
                    n_layers=m.getint("n_layers"),
                    ffn_dim=m.getint("ffn_dim"),
                )
        elif mode == EngineMode.FUNCTIONAL:
            if "model" not in parser:
                raise ConfigError(f"{path}: functional mode needs a [model] section")
            m = parser["model"]
            model = ModelConfig(
                d_model=m.getint("d_model"),
                n_layers=m.getint("n_layers"),
                vocab=m.getint("vocab"),
                seed=m.getint("model_seed", 0),
                max_seq=m.getint("max_seq", 512),
            )
        else:
            raise ConfigError(f"{path}: unknown mode {mode!r}")

        chunk = e.get("chunk_size", "")
        host = e.get("max_host_adapters", "")
        engine = EngineConfig(
            mode=mode,
            max_batch=e.getint("max_batch", 32),
            max_gpu_adapters=e.getint("max_gpu_adapters", 32),
            max_host_adapters=int(host) if host else None,
            chunk_size=int(chunk) if chunk else None,
            step_token_budget=e.getint("step_token_budget", 2048),
            seed=e.getint("seed", 0),
            warmup=e.getboolean("warmup", True),
            hardware=hardware,
            shape=shape,
            model=model,
        )

        setup = None
        count = 0
        if "adapters" in parser:
            a = parser["adapters"]
            count = a.getint("count", workload.n_adapters)
            if count > 0:
                setup = AdapterSetup(
                    kind=AdapterKind(a.get("kind", "direft").lower()),
                    rank=a.getint("rank", 8),
                    schedule=PositionSchedule(
                        a.get("schedule", "all_positions").lower()
                    ),
                    scaling=_parse_scaling(a.get("scaling", "")),
                    perturb_sigma=a.getfloat("perturb_sigma", 0.0),
                )
        if count != workload.n_adapters:
            raise ConfigError(
                f"{path}: adapter count {count} does not match "
                f"workload n_adapters {workload.n_adapters}"
            )

        out = "bench"
        if "output" in parser:
            out = parser["output"].get("path", out)
        return cls(
            workload=workload, engine=engine, setup=setup,
            n_adapters=count, out=out,
        )


def _parse_scaling(text: str) -> ScalingRule | None:
    text = text.strip().lower()
    if not text:
        return None
    head, _, arg = text.partition(":")
    if head == "constant":
        return ScalingRule.constant(float(arg or 1.0))
    if head == "alpha_over_r":
        return ScalingRule.alpha_over_r(float(arg or 32.0))
    if head == "inv_sqrt_r":
        return ScalingRule.inv_sqrt_r()
    raise ConfigError(f"unknown scaling rule {text!r}")


# -------------------------------------------------------------------- bench


def cmd_bench(args: argparse.Namespace) -> int:
    run = RunConfig.from_file(args.config)
    engine_cfg = run.engine
    workload_cfg = run.workload
    if args.mode:
        if args.mode != engine_cfg.mode:
            raise ConfigError(
                "switching mode on the command line needs a config with the "
                "matching [model] section; edit the config instead"
            )
    if args.seed is not None:
        workload_cfg = replace(workload_cfg, seed=args.seed)
        engine_cfg = replace(engine_cfg, seed=args.seed)
    out = args.out or run.out

    workload = generate_workload(workload_cfg)
    result = simulate(workload, engine_cfg, run.setup)

    out_path = Path(out)
    if out_path.parent != Path("."):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    report_json = json.dumps(result.report.to_dict(), indent=2, sort_keys=True)
    Path(f"{out}.report.json").write_text(report_json + "\n")
    Path(f"{out}.report.txt").write_text(result.report.to_text() + "\n")
    result.write_trace(f"{out}.trace.csv")

    print(result.report.to_text())
    print(f"\nwrote {out}.report.json, {out}.report.txt, {out}.trace.csv")
    return EXIT_OK


# ------------------------------------------------------------------- verify


def _check(ok: bool, label: str, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'}  {label:<42}{detail}")
    return ok


def _suite_zero_delta() -> bool:
    ok = True
    rng = rng_from_seed(0, 77)
    d = 64
    x = rng.normal(size=d)
    for kind in AdapterKind:
        for rank in (1, 8, 32):
            dims = (d, d) if kind is AdapterKind.LORA else (d,)
            params = init_zero_delta(kind, rank, dims, seed=rank)
            delta = delta_for_rows(params, x[None, :])
            worst = float(np.max(np.abs(delta)))
            ok &= _check(
                worst <= 1e-12,
                f"zero-delta {kind.value} r={rank}",
                f"max|delta| = {worst:.3e}",
            )
    return ok


def _suite_theorem1() -> bool:
    ok = True
    d = 256
    rng = rng_from_seed(1, 78)
    h = rng.normal(size=d)
    g = rng.normal(size=d)
    eta, eps = 1e-3, 1e-12
    closed_form = eta * (np.abs(h).sum() + 1.0)
    norms = {}
    for r in (1, 4, 16, 64):
        norms[r] = first_step_delta_norm(r, d, h, g, eta, eps, seed=r)
        print(f"      r={r:<4d} |delta| = {norms[r]:.9e}")
    ratio = max(norms.values()) / min(norms.values())
    ok &= _check(ratio <= 1.001, "rank-free first step", f"max/min = {ratio:.6f}")
    rel = abs(norms[64] / closed_form - 1.0)
    ok &= _check(
        rel <= 1e-6,
        "closed form eta*(|h|_1 + 1)",
        f"rel err = {rel:.3e}",
    )
    unit = ScalingRule.constant(1.0)
    n1 = first_step_delta_norm(1, d, h, g, eta, eps, seed=1, scaling=unit)
    n64 = first_step_delta_norm(64, d, h, g, eta, eps, seed=64, scaling=unit)
    growth = n64 / n1
    ok &= _check(
        abs(growth / 8.0 - 1.0) <= 0.005,
        "constant scaling grows sqrt(r)",
        f"r64/r1 = {growth:.4f}",
    )
    return ok


def _suite_intensity(ridge: float = H100_PROFILE.ridge) -> bool:
    ok = True
    print(f"      {'batch':>6} {'rank':>5} {'width':>6} {'intensity':>12}  bound")
    worst = 0.0
    for b in (1, 32, 256):
        for r in (1, 16, 64):
            for d in (512, 4096):
                val = lora_down_intensity(b, d, r)
                worst = max(worst, val)
                side = "compute" if val >= ridge else "memory"
                print(f"      {b:>6} {r:>5} {d:>6} {val:>12.6f}  {side}")
    ok &= _check(
        worst < ridge,
        "adapter GEMMs stay memory-bound",
        f"max = {worst:.4f} < ridge {ridge:g}",
    )
    spot = lora_down_intensity(32, 4096, 16)
    ok &= _check(
        abs(spot - 10.638961) <= 1e-4,
        "spot value b=32 d=4096 r=16",
        f"{spot:.6f}",
    )
    return ok


def _suite_mask(cases: int = 200) -> bool:
    rng = rng_from_seed(2, 79)
    d = 48
    bad = 0
    for i in range(cases):
        rank = int(rng.integers(1, 9))
        kind = AdapterKind.DIREFT if i % 2 else AdapterKind.LORA
        dims = (d, d) if kind is AdapterKind.LORA else (d,)
        params = init_zero_delta(kind, rank, dims, seed=1000 + i)
        # perturb so the delta is non-trivial
        tensors = [t + rng.normal(size=t.shape) * 0.1 for t in params.tensors]
        if kind is AdapterKind.LORA:
            params = AdapterParams(
                kind=kind, rank=rank, dims=dims, scaling=params.scaling,
                A=tensors[0], B=tensors[1],
            )
        else:
            params = AdapterParams(
                kind=kind, rank=rank, dims=dims, scaling=params.scaling,
                A=tensors[0], B=tensors[1], b=tensors[2],
            )
        n_rows = int(rng.integers(1, 12))
        prompt_len = int(rng.integers(0, n_rows + 1))
        outs = rng.normal(size=(n_rows, d))
        ins = rng.normal(size=(n_rows, d))
        masked = apply_masked(params, PositionSchedule.PREFILL_ONLY, outs, ins, prompt_len)
        full = apply_masked(params, PositionSchedule.ALL_POSITIONS, outs, ins, prompt_len)
        src = ins if kind is AdapterKind.LORA else outs
        want_full = outs + delta_for_rows(params, src)
        want_masked = outs.copy()
        want_masked[:prompt_len] = want_full[:prompt_len]
        # touched rows: tiny slack, slicing may pick a different gemm kernel
        if not (
            np.array_equal(masked[prompt_len:], outs[prompt_len:])
            and np.allclose(masked, want_masked, rtol=1e-12, atol=1e-12)
            and np.allclose(full, want_full, rtol=1e-12, atol=1e-12)
        ):
            bad += 1
    return _check(bad == 0, f"masking vs enumeration ({cases} cases)", f"{bad} mismatches")


SUITES = {
    "zero-delta": _suite_zero_delta,
    "theorem1": _suite_theorem1,
    "intensity": _suite_intensity,
    "mask": _suite_mask,
}


def cmd_verify(args: argparse.Namespace) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    all_ok = True
    for name in names:
        print(f"== {name} ==")
        all_ok &= SUITES[name]()
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


# -------------------------------------------------------------------- stats


def _read_table(path: Path) -> list[list[float]]:
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: not a number row: {line!r}") from exc
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigError(f"{path}: ragged rows; expected {width} columns everywhere")
    return rows


def cmd_stats(args: argparse.Namespace) -> int:
    rows = _read_table(_resolve_input(args.table))
    width = len(rows[0])
    if args.test == "wilcoxon":
        if width == 1:
            diffs = [r[0] for r in rows]
            res = wilcoxon_signed_rank(diffs, zero_policy=args.zero_policy)
        elif width == 2:
            x = [r[0] for r in rows]
            y = [r[1] for r in rows]
            res = wilcoxon_signed_rank(x, y, zero_policy=args.zero_policy)
        else:
            raise ConfigError(
                f"wilcoxon input needs 1 (differences) or 2 (paired) columns, got {width}"
            )
        print(f"n          {res.n_used}")
        print(f"mean diff  {res.mean_diff:.6g}")
        print(f"W          {res.statistic:g}")
        print(f"p          {res.p_value:.6g}  ({res.method})")
    else:
        if width != 4:
            raise ConfigError(
                f"cmh input needs 4 columns (n11 n10 n01 n00 per stratum), got {width}"
            )
        strata = [(int(r[1]), int(r[2])) for r in rows]
        res = cmh_test(strata)
        print(f"strata     {len(strata)}")
        print(f"chi2       {res.statistic:.6g}")
        print(f"p          {res.p_value:.6g}")
    return EXIT_OK


# ----------------------------------------------------------------- workload


def cmd_workload(args: argparse.Namespace) -> int:
    parser = configparser.ConfigParser()
    path = _resolve_input(args.config)
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if "workload" not in parser:
        raise ConfigError(f"{path}: missing [workload] section")
    w = parser["workload"]
    cfg = WorkloadConfig(
        n_requests=w.getint("n_requests"),
        n_adapters=w.getint("n_adapters"),
        mix=AdapterMix(w.get("mix", "uniform").lower()),
        seed=args.seed if args.seed is not None else w.getint("seed", 0),
        l_max=w.getint("l_max", 2048),
    )
    specs = generate_workload(cfg)
    if args.out:
        dump_workload(specs, args.out)
        print(f"wrote {len(specs)} requests to {args.out}")
    else:
        print("request_id,prompt_len,output_len,adapter_id")
        for s in specs:
            aid = "" if s.adapter_id is None else s.adapter_id
            print(f"{s.request_id},{s.prompt_len},{s.output_len},{aid}")
    return EXIT_OK


# -------------------------------------------------------------------- entry


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefillsim",
        description="Multi-adapter serving simulator and adapter-math toolbox.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="run a configured simulation")
    p_bench.add_argument("--config", required=True, help="INI run configuration")
    p_bench.add_argument("--seed", type=int, help="override workload and engine seeds")
    p_bench.add_argument("--out", help="output path prefix (default from config)")
    p_bench.add_argument(
        "--mode", choices=(EngineMode.COST, EngineMode.FUNCTIONAL),
        help="must match the config's mode; a cross-check, not a switch",
    )
    p_bench.set_defaults(func=cmd_bench)

    p_verify = sub.add_parser("verify", help="run built-in invariant suites")
    p_verify.add_argument(
        "--suite", default="all", choices=("all", *SUITES), help="which suite to run"
    )
    p_verify.set_defaults(func=cmd_verify)

    p_stats = sub.add_parser("stats", help="rank statistics on a number table")
    p_stats.add_argument("table", help="text file: 1-2 columns (wilcoxon), 4 (cmh)")
    p_stats.add_argument("--test", default="wilcoxon", choices=("wilcoxon", "cmh"))
    p_stats.add_argument("--zero-policy", default="drop", choices=("drop", "pratt"))
    p_stats.set_defaults(func=cmd_stats)

    p_wl = sub.add_parser("workload", help="generate and dump a request list")
    p_wl.add_argument("--config", required=True, help="INI file with a [workload] section")
    p_wl.add_argument("--seed", type=int, help="override the workload seed")
    p_wl.add_argument("--out", help="CSV output path (default: stdout)")
    p_wl.set_defaults(func=cmd_workload)
    return parser


def entry(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, StateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(entry())
