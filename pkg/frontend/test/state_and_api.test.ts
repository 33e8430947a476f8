import { describe, expect, it, vi } from "vitest";

import { ApiClient, debounce, type Transport } from "../src/api.js";
import { initialState, markOffline, preCheck, recordResponse, withSpec } from "../src/state.js";
import type { TrainingJobSpec } from "../src/types.js";
import { buildDashboard } from "../src/viewmodel.js";
import { baselineService, loadFixture } from "./helpers.js";

const baseSpec = loadFixture<TrainingJobSpec>("spec_baseline.json");

describe("client-side pre-checks", () => {
  it("accepts the bundled fixture", () => {
    expect(preCheck(baseSpec)).toEqual([]);
  });

  it("catches top-k over expert count", () => {
    const bad = structuredClone(baseSpec);
    bad.model.top_k = 1000;
    expect(preCheck(bad).join(" ")).toMatch(/top_k/);
  });

  it("catches folded world-size mismatch", () => {
    const bad = structuredClone(baseSpec);
    bad.parallel.ep = 32;
    expect(preCheck(bad).join(" ")).toMatch(/world mismatch/);
  });

  it("catches batch divisibility", () => {
    const bad = structuredClone(baseSpec);
    bad.parallel.global_batch_size = 100;
    expect(preCheck(bad).join(" ")).toMatch(/GBS/);
  });

  it("edits re-run the pre-checks", () => {
    let state = initialState(baseSpec);
    const bad = structuredClone(baseSpec);
    bad.model.top_k = 1000;
    state = withSpec(state, bad);
    expect(state.preCheckViolations.length).toBeGreaterThan(0);
  });
});

describe("api client", () => {
  it("last write wins on overlapping requests", async () => {
    const resolvers: Array<() => void> = [];
    const transport: Transport = (_path, body) =>
      new Promise((resolve) => {
        resolvers.push(() =>
          resolve({ status: 200, json: { schema_version: 1, request_digest: String(body), diagnostics: [], result: null } }),
        );
      });
    const client = new ApiClient(transport);
    const first = client.call("estimate", "req-1");
    const second = client.call("estimate", "req-2");
    resolvers[1]!();
    resolvers[0]!();
    const [r1, r2] = await Promise.all([first, second]);
    expect(r1.stale).toBe(true); // superseded by req-2
    expect(r2.stale).toBe(false);
  });

  it("logs every response it receives", async () => {
    const client = new ApiClient(baselineService().transport());
    await client.call("estimate", baseSpec);
    await client.call("cost", baseSpec);
    expect(client.requestLog().map((e) => e.endpoint)).toEqual(["estimate", "cost"]);
  });

  it("debounce collapses rapid edits", () => {
    vi.useFakeTimers();
    const hits: number[] = [];
    const fire = debounce((n: number) => hits.push(n), 250);
    fire(1);
    fire(2);
    fire(3);
    vi.advanceTimersByTime(249);
    expect(hits).toEqual([]);
    vi.advanceTimersByTime(2);
    expect(hits).toEqual([3]);
    vi.useRealTimers();
  });
});

describe("offline behaviour", () => {
  it("keeps the last responses and raises the banner", async () => {
    const svc = baselineService();
    const client = new ApiClient(svc.transport());
    let state = initialState(baseSpec);
    const { entry } = await client.call("estimate", baseSpec);
    state = recordResponse(state, entry);

    svc.unreachable = true;
    await expect(client.call("estimate", baseSpec)).rejects.toThrow();
    state = markOffline(state);

    const view = buildDashboard(state);
    expect(view.offline).toBe(true);
    expect(view.bars.length).toBe(3); // last snapshot still rendered
    expect(view.total).not.toBeNull();
  });
});
