// Every number the dashboard or compare view would render must resolve,
// by endpoint + digest + JSON path, to a value inside the logged service
// responses. The UI computes no domain math of its own.

import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { pinSnapshot, recordResponse } from "../src/state.js";
import type { TrainingJobSpec } from "../src/types.js";
import {
  buildCompare,
  buildDashboard,
  collectTraced,
  resolvePath,
} from "../src/viewmodel.js";
import { baselineService, loadFixture, stateWithResponses } from "./helpers.js";

const baseSpec = loadFixture<TrainingJobSpec>("spec_baseline.json");

describe("traceability", () => {
  it("every dashboard number resolves inside a logged response", async () => {
    const client = new ApiClient(baselineService().transport());
    const { state } = await stateWithResponses(baseSpec, client, [
      "estimate",
      "cost",
      "advise",
    ]);
    const view = buildDashboard(state);
    const traced = collectTraced(view);
    expect(traced.length).toBeGreaterThanOrEqual(6); // bars, total, comm stats

    const log = client.requestLog();
    for (const t of traced) {
      const entry = log.find(
        (e) =>
          e.endpoint === t.endpoint && e.envelope.request_digest === t.digest,
      );
      expect(entry, `${t.endpoint} ${t.path}`).toBeDefined();
      expect(resolvePath(entry!.envelope, t.path)).toBe(t.value);
    }
  });

  it("lever deltas trace back to the levered estimate response", async () => {
    const leveredSpec = loadFixture<TrainingJobSpec>("spec_levered.json");
    const client = new ApiClient(baselineService().transport());
    const { state } = await stateWithResponses(leveredSpec, client, ["estimate"]);
    const view = buildDashboard(state);
    expect(view.leverDeltas.length).toBeGreaterThanOrEqual(5);
    const log = client.requestLog();
    for (const d of view.leverDeltas) {
      const entry = log.find(
        (e) => e.endpoint === d.bytes.endpoint
          && e.envelope.request_digest === d.bytes.digest,
      );
      expect(entry).toBeDefined();
      expect(resolvePath(entry!.envelope, d.bytes.path)).toBe(d.bytes.value);
    }
  });

  it("compare view numbers resolve inside the snapshots' logged responses", async () => {
    const client = new ApiClient(baselineService().transport());
    let { state } = await stateWithResponses(baseSpec, client, ["estimate", "cost"]);
    state = pinSnapshot(state, "a");
    state = pinSnapshot(state, "b");
    const view = buildCompare(state.snapshots);
    const traced = collectTraced(view);
    expect(traced.length).toBeGreaterThan(0);
    const log = client.requestLog();
    for (const t of traced) {
      const entry = log.find(
        (e) =>
          e.endpoint === t.endpoint && e.envelope.request_digest === t.digest,
      );
      expect(entry).toBeDefined();
      expect(resolvePath(entry!.envelope, t.path)).toBe(t.value);
    }
  });

  it("only spec inputs may appear untraced (the capacity line)", async () => {
    const client = new ApiClient(baselineService().transport());
    const { state } = await stateWithResponses(baseSpec, client, ["estimate"]);
    const view = buildDashboard(state);
    expect(view.capacity.source).toBe("input");
    expect(view.capacity.field).toBe("cluster.gpu_memory");
    expect(view.capacity.value).toBe(baseSpec.cluster.gpu_memory);
  });

  it("bubble ratio is traced to the simulate response", async () => {
    const svc = baselineService();
    const client = new ApiClient(svc.transport());
    let { state } = await stateWithResponses(baseSpec, client, ["estimate"]);
    const { entry } = await client.call("simulate", {
      layout: baseSpec.parallel.pipeline_layout,
      pp: baseSpec.parallel.pp,
      vpp: baseSpec.parallel.vpp,
      num_microbatches: 16,
      include_events: true,
    });
    state = recordResponse(state, entry);
    const view = buildDashboard(state);
    expect(view.bubbleRatio).not.toBeNull();
    expect(view.bubbleRatio!.endpoint).toBe("simulate");
    expect(resolvePath(entry.envelope, view.bubbleRatio!.path)).toBe(
      view.bubbleRatio!.value,
    );
  });
});
