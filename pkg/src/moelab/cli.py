"""Command-line front door.

Every subcommand funnels into the same handler functions the HTTP service
uses, so CLI and service emit byte-identical JSON. Exit codes: 0 success,
1 validation violations, 2 usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .model import canonical_json
from .service import (
    ApiError,
    handle_advise,
    handle_calibrate,
    handle_cost,
    handle_estimate,
    handle_fixtures,
    handle_plan_dynamic_cp,
    handle_plan_echo,
    handle_simulate,
)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _read_spec(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read spec {path!r}: {exc}")


def _emit(payload: dict) -> None:
    sys.stdout.write(canonical_json(payload) + "\n")
    if sys.stderr.isatty():  # human summary only on a tty
        diag = payload.get("diagnostics") or []
        sys.stderr.write(f"# schema v{payload.get('schema_version')}, "
                         f"{len(diag)} diagnostic(s)\n")


def _run_handler(handler, *args) -> int:
    try:
        _emit(handler(*args))
        return EXIT_OK
    except ApiError as exc:
        _emit({"schema_version": 1, "diagnostics": exc.diagnostics, "result": None})
        return EXIT_VIOLATIONS
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale MoE training-systems laboratory",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("estimate", help="per-GPU memory report for a job spec")
    p.add_argument("spec", help="TrainingJobSpec JSON file")
    p.add_argument("--levers", default="",
                   help="comma-separated recompute modules to apply on top of the spec")
    p.add_argument("--offload", default="", help="comma-separated offload modules")
    p.add_argument("--mem-efficient-permutation", action="store_true")

    p = sub.add_parser("cost", help="communication/compute cost report")
    p.add_argument("spec")

    p = sub.add_parser("advise", help="parallelism guideline hits")
    p.add_argument("spec")

    p = sub.add_parser("simulate", help="pipeline schedule simulation")
    p.add_argument("--layout", required=True)
    p.add_argument("--pp", type=int, required=True)
    p.add_argument("--vpp", type=int, default=1)
    p.add_argument("--microbatches", type=int, required=True)
    p.add_argument("--schedule", default="1F1B", choices=["1F1B", "interleaved"])
    p.add_argument("--extra-warmup", action="store_true")
    p.add_argument("--wd-split", action="store_true")
    p.add_argument("--costs", default=None,
                   help='per-symbol costs JSON, e.g. {"t":{"f":1,"b":2,"w":1}}')
    p.add_argument("--chrome-trace", default=None, metavar="PATH",
                   help="also write a Chrome trace-event file")

    p = sub.add_parser("plan", help="runtime planners")
    plan_sub = p.add_subparsers(dest="planner")
    pg = plan_sub.add_parser("groups", help="per-rank process groups")
    pg.add_argument("spec")
    pd = plan_sub.add_parser("dynamic-cp")
    pd.add_argument("--lengths", required=True, help="comma-separated sequence lengths")
    pd.add_argument("--memory-budget-tokens", type=int, required=True)
    pd.add_argument("--dp", type=int, default=1)
    pd.add_argument("--cp-max", type=int, default=1)
    pd.add_argument("--pp", type=int, default=1)
    pe = plan_sub.add_parser("echo")
    pe.add_argument("--counts", required=True, help="comma-separated per-expert token counts")
    pe.add_argument("--experts-per-rank", type=int, default=1)
    pe.add_argument("--spare-slots-per-rank", type=int, default=1)

    p = sub.add_parser("calibrate", help="fit alpha-beta pairs from a latency CSV")
    p.add_argument("csv", help="CSV with columns kind,ep,platform,us")

    p = sub.add_parser("quant-check", help="quantization property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=20000)

    p = sub.add_parser("moe-check", help="MoE numerics property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=50)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        return _dispatch(argv)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


def _dispatch(argv: list[str] | None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    if args.command == "estimate":
        payload = _read_spec(args.spec)
        if args.levers:
            payload["recompute_modules"] = [m for m in args.levers.split(",") if m]
        if args.offload:
            payload["offload_modules"] = [m for m in args.offload.split(",") if m]
        if args.mem_efficient_permutation:
            payload["mem_efficient_permutation"] = True
        return _run_handler(handle_estimate, payload)

    if args.command == "cost":
        return _run_handler(handle_cost, _read_spec(args.spec))

    if args.command == "advise":
        return _run_handler(handle_advise, _read_spec(args.spec))

    if args.command == "simulate":
        payload = {
            "layout": args.layout,
            "pp": args.pp,
            "vpp": args.vpp,
            "num_microbatches": args.microbatches,
            "schedule_kind": args.schedule,
            "extra_warmup": args.extra_warmup,
            "wd_split": args.wd_split,
            "costs": json.loads(args.costs) if args.costs else None,
        }
        code = _run_handler(handle_simulate, payload)
        if code == EXIT_OK and args.chrome_trace:
            from .layout import parse_layout
            from .schedule import DEFAULT_COSTS, SymbolCost, simulate

            costs = dict(DEFAULT_COSTS)
            for sym, c in (payload["costs"] or {}).items():
                costs[sym] = SymbolCost(**c)
            sched = simulate(
                parse_layout(args.layout).bind(args.pp, args.vpp),
                costs, args.microbatches, schedule_kind=args.schedule,
                extra_warmup=args.extra_warmup, wd_split=args.wd_split,
            )
            with open(args.chrome_trace, "w") as f:
                json.dump(sched.chrome_trace(), f)
        return code

    if args.command == "plan":
        if args.planner == "groups":
            payload = _read_spec(args.spec)
            return _run_handler(_handle_groups, payload)
        if args.planner == "dynamic-cp":
            return _run_handler(handle_plan_dynamic_cp, {
                "lengths": [int(x) for x in args.lengths.split(",")],
                "memory_budget_tokens": args.memory_budget_tokens,
                "dp": args.dp,
                "cp_max": args.cp_max,
                "pp": args.pp,
            })
        if args.planner == "echo":
            return _run_handler(handle_plan_echo, {
                "counts": [int(x) for x in args.counts.split(",")],
                "experts_per_rank": args.experts_per_rank,
                "spare_slots_per_rank": args.spare_slots_per_rank,
            })
        parser.parse_args([args.command, "--help"])
        return EXIT_USAGE

    if args.command == "calibrate":
        with open(args.csv) as f:
            return _run_handler(handle_calibrate, f.read())

    if args.command == "quant-check":
        return _run_handler(_quant_check, args.seed, args.samples)

    if args.command == "moe-check":
        return _run_handler(_moe_check, args.seed, args.instances)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
        return EXIT_OK

    parser.print_usage(sys.stderr)
    return EXIT_USAGE


def _handle_groups(payload: dict) -> dict:
    from .folding import derive_groups
    from .service import _load_spec, _respond

    spec = _load_spec(payload)
    groups = derive_groups(spec.parallel)
    return _respond(spec, [g.as_dict() for g in groups])


def _quant_check(seed: int, samples: int) -> dict:
    """Round-trip, scale-invariance, RHT, and SR spot checks on random data."""
    from .formats import E4M3, E2M1
    from .model import PrecisionRecipe
    from .quant import make_recipe, quantize, rht, rht_inverse

    rng = np.random.default_rng(seed)
    results = {}
    for kind in ("fp8_tensor", "fp8_block", "mxfp8", "nvfp4"):
        recipe = make_recipe(kind)
        x = rng.normal(size=(max(1, samples // 256), 256))
        q = quantize(x, recipe)
        y = q.dequantize()
        scale = q._decode_scale_grid()
        fmt = E2M1 if kind == "nvfp4" else E4M3
        normal = np.abs(x) / scale >= fmt._values[fmt._codes >= (1 << fmt.mantissa_bits)][0]
        rel = np.abs((y - x)[normal] / x[normal]).max(initial=0.0)
        bound = 0.25 if kind == "nvfp4" else 2.0 ** -3
        results[kind] = {"max_rel_err_normals": float(rel), "bound": bound,
                         "ok": bool(rel <= bound)}
    xr = rng.normal(size=(4, 64))
    rt = float(np.abs(rht_inverse(rht(xr, 16, seed), 16, seed) - xr).max())
    results["rht_roundtrip_err"] = rt
    results["ok"] = bool(all(v["ok"] for v in results.values() if isinstance(v, dict)) and rt < 1e-6)
    return {"schema_version": 1, "diagnostics": [], "result": results}


def _moe_check(seed: int, instances: int) -> dict:
    """Combine equivalence, conservation, and capacity checks on random instances."""
    from .routing import (
        ExpertParams,
        apply_capacity,
        combine_mem_efficient,
        combine_standard,
        route,
    )

    rng = np.random.default_rng(seed)
    worst = 0.0
    conserved = True
    for _ in range(instances):
        t = int(rng.integers(2, 33))
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(4, e) + 1))
        h, m = 16, 32
        x = rng.normal(size=(t, h))
        w_r = rng.normal(size=(h, e))
        params = ExpertParams(
            w1=[rng.normal(size=(m, h)) for _ in range(e)],
            w2=[rng.normal(size=(h, m)) for _ in range(e)],
        )
        d = route(x, w_r, top_k=k)
        conserved &= int(d.counts.sum()) == t * k
        a = combine_standard(x, d, params)
        b = combine_mem_efficient(x, d, params)
        denom = np.abs(a).max(initial=1e-30)
        worst = max(worst, float(np.abs(a - b).max() / denom))
    return {
        "schema_version": 1,
        "diagnostics": [],
        "result": {
            "instances": instances,
            "combine_max_rel_diff": worst,
            "dropless_conservation": conserved,
            "ok": bool(conserved and worst <= 1e-6),
        },
    }


if __name__ == "__main__":
    sys.exit(main())
