// Shared test plumbing: a fake transport that serves the committed
// responses captured from the real service (see scripts/generate_fixtures.py).

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { ApiClient, type LogEntry, type Transport } from "../src/api.js";
import { initialState, recordResponse, type TunerState } from "../src/state.js";
import type { TrainingJobSpec } from "../src/types.js";

const HERE = dirname(fileURLToPath(import.meta.url));

export function loadFixture<T = unknown>(name: string): T {
  return JSON.parse(readFileSync(join(HERE, "fixtures", name), "utf-8")) as T;
}

interface Canned {
  status: number;
  body: unknown;
}

function canonical(value: unknown): string {
  if (value === null || typeof value !== "object") return JSON.stringify(value);
  if (Array.isArray(value)) return `[${value.map(canonical).join(",")}]`;
  const rec = value as Record<string, unknown>;
  const keys = Object.keys(rec).sort();
  return `{${keys.map((k) => `${JSON.stringify(k)}:${canonical(rec[k])}`).join(",")}}`;
}

export class FakeService {
  private routes = new Map<string, Canned>();
  public unreachable = false;

  register(path: string, request: unknown, response: Canned): void {
    this.routes.set(`${path}|${canonical(request)}`, response);
  }

  transport(): Transport {
    return async (path, body) => {
      if (this.unreachable) throw new Error("connection refused");
      const canned = this.routes.get(`${path}|${canonical(body)}`);
      if (!canned) throw new Error(`no canned response for ${path}`);
      return { status: canned.status, json: canned.body };
    };
  }
}

export function baselineService(): FakeService {
  const svc = new FakeService();
  const base = loadFixture("spec_baseline.json");
  const levered = loadFixture("spec_levered.json");
  const invalid = loadFixture("spec_invalid.json");
  svc.register("/api/v1/estimate", base, loadFixture("estimate_baseline.json"));
  svc.register("/api/v1/estimate", levered, loadFixture("estimate_levered.json"));
  svc.register("/api/v1/estimate", invalid, loadFixture("estimate_invalid.json"));
  svc.register("/api/v1/cost", base, loadFixture("cost_baseline.json"));
  svc.register("/api/v1/advise", base, loadFixture("advise_baseline.json"));
  const sim = loadFixture<{ body: { result: unknown } }>("simulate_baseline.json");
  const baseSpec = base as TrainingJobSpec;
  svc.register(
    "/api/v1/simulate",
    {
      layout: baseSpec.parallel.pipeline_layout,
      pp: baseSpec.parallel.pp,
      vpp: baseSpec.parallel.vpp,
      num_microbatches: 16,
      include_events: true,
    },
    sim as unknown as Canned,
  );
  return svc;
}

export async function stateWithResponses(
  spec: TrainingJobSpec,
  client: ApiClient,
  endpoints: Array<"estimate" | "cost" | "advise">,
): Promise<{ state: TunerState; entries: LogEntry[] }> {
  let state = initialState(spec);
  const entries: LogEntry[] = [];
  for (const endpoint of endpoints) {
    const { entry } = await client.call(endpoint, spec);
    state = recordResponse(state, entry);
    entries.push(entry);
  }
  return { state, entries };
}
