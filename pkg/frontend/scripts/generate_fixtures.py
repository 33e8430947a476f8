#!/usr/bin/env python3
"""Regenerate the frontend's canned service responses from the live
handlers. Run from the repository root:

    python3 frontend/scripts/generate_fixtures.py
"""
import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[2] / "src"))

from moelab.fixtures import load_fixture  # noqa: E402
from moelab.service import (  # noqa: E402
    ApiError,
    handle_advise,
    handle_cost,
    handle_estimate,
    handle_simulate,
)

OUT = pathlib.Path(__file__).resolve().parents[1] / "test" / "fixtures"

# The full H100 lever stack from the case-study configuration.
LEVERS = {
    "recompute_modules": ["mlp", "mla_up_proj", "moe_act", "layernorm"],
    "offload_modules": ["attention", "expert_fc1"],
    "mem_efficient_permutation": True,
    "optimizer_moment_bytes": 2,
}


def call(handler, payload):
    try:
        return {"status": 200, "body": handler(payload)}
    except ApiError as exc:
        return {"status": exc.status,
                "body": {"schema_version": 1, "request_digest": None,
                         "diagnostics": exc.diagnostics, "result": None}}


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    base = json.loads(load_fixture("deepseek-v3").model_dump_json())
    levered = json.loads(json.dumps(base))
    levered.update(LEVERS)
    levered["parallel"]["precision_recipe"] = "fp8_block"

    invalid = json.loads(json.dumps(base))
    invalid["model"]["top_k"] = 1000

    sim_req = {
        "layout": base["parallel"]["pipeline_layout"],
        "pp": base["parallel"]["pp"],
        "vpp": base["parallel"]["vpp"],
        "num_microbatches": 16,
        "include_events": True,
    }

    fixtures = {
        "spec_baseline.json": base,
        "spec_levered.json": levered,
        "spec_invalid.json": invalid,
        "estimate_baseline.json": call(handle_estimate, base),
        "estimate_levered.json": call(handle_estimate, levered),
        "estimate_invalid.json": call(handle_estimate, invalid),
        "cost_baseline.json": call(handle_cost, base),
        "advise_baseline.json": call(handle_advise, base),
        "simulate_baseline.json": call(handle_simulate, sim_req),
    }
    for name, doc in fixtures.items():
        (OUT / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print("wrote", OUT / name)


if __name__ == "__main__":
    main()
