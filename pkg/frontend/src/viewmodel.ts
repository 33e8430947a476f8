// Pure view-model builders. Every number destined for the screen is a
// `Traced` value carrying its provenance: the endpoint, the response
// digest, and the JSON path inside the logged envelope. The traceability
// tests walk the view model and re-resolve each path against the request
// log, proving the UI invented nothing.

import type { LogEntry } from "./api.js";
import type { Snapshot, TunerState } from "./state.js";
import type {
  AdvisorHit,
  CostReport,
  MemoryReport,
  ScheduleResult,
} from "./types.js";

export interface Traced {
  value: number;
  endpoint: string;
  digest: string | null;
  path: string;
}

export interface InputNumber {
  value: number;
  source: "input";
  field: string;
}

export interface MemoryBar {
  label: string;
  bytes: Traced;
}

export interface DashboardView {
  offline: boolean;
  preCheckViolations: string[];
  bars: MemoryBar[];
  total: Traced | null;
  capacity: InputNumber;
  feasible: boolean | null; // total <= capacity; null until estimate arrives
  leverDeltas: { lever: string; bytes: Traced }[];
  exposedCommFraction: Traced | null;
  a2aVolume: Traced | null;
  bubbleRatio: Traced | null;
  advisor: AdvisorHit[];
  inflightAssumption: string;
}

export function resolvePath(root: unknown, path: string): unknown {
  let node: unknown = root;
  for (const key of path.split(".")) {
    if (node == null || typeof node !== "object") return undefined;
    node = (node as Record<string, unknown>)[key];
  }
  return node;
}

function traced(entry: LogEntry, path: string): Traced {
  const value = resolvePath(entry.envelope, path);
  if (typeof value !== "number") {
    throw new Error(`no numeric value at ${path} in ${entry.endpoint} response`);
  }
  return {
    value,
    endpoint: entry.endpoint,
    digest: entry.envelope.request_digest,
    path,
  };
}

export function buildDashboard(state: TunerState): DashboardView {
  const est = state.responses.estimate;
  const cost = state.responses.cost;
  const advise = state.responses.advise;
  const sim = state.responses.simulate;

  const bars: MemoryBar[] = [];
  let total: Traced | null = null;
  const leverDeltas: { lever: string; bytes: Traced }[] = [];
  let inflight = "";
  if (est && est.status === 200 && est.envelope.result) {
    const report = est.envelope.result as MemoryReport;
    bars.push(
      { label: "weights + grads", bytes: traced(est, "result.weights_and_grads") },
      {
        label: "master weights + optimizer",
        bytes: traced(est, "result.master_weights_and_optimizer"),
      },
      { label: "activations", bytes: traced(est, "result.activations") },
    );
    total = traced(est, "result.total");
    for (const lever of Object.keys(report.deltas).sort()) {
      leverDeltas.push({ lever, bytes: traced(est, `result.deltas.${lever}`) });
    }
    inflight = `in-flight micro-batches assumed: ${JSON.stringify(
      report.assumptions["inflight_microbatches"],
    )}`;
  }

  const capacity: InputNumber = {
    value: state.spec.cluster.gpu_memory,
    source: "input",
    field: "cluster.gpu_memory",
  };

  return {
    offline: state.offline,
    preCheckViolations: state.preCheckViolations,
    bars,
    total,
    capacity,
    feasible: total === null ? null : total.value <= capacity.value,
    leverDeltas,
    exposedCommFraction:
      cost && cost.status === 200
        ? traced(cost, "result.exposed_comm_fraction")
        : null,
    a2aVolume:
      cost && cost.status === 200
        ? traced(cost, "result.a2a_send_volume_bytes")
        : null,
    bubbleRatio:
      sim && sim.status === 200 ? traced(sim, "result.bubble_ratio") : null,
    advisor:
      advise && advise.status === 200 && advise.envelope.result
        ? (advise.envelope.result as AdvisorHit[])
        : [],
    inflightAssumption: inflight,
  };
}

export interface DiffCell {
  label: string;
  a: Traced;
  b: Traced;
  delta: number; // presentation arithmetic over two traced values
}

export interface CompareColumn {
  name: string;
  flagged: boolean;
  violations: string[];
  total: Traced | null;
  exposedComm: Traced | null;
  timeline: ScheduleResult | null;
}

export interface CompareView {
  columns: CompareColumn[];
  diffs: DiffCell[]; // pairwise diff of the first two comparable columns
  sortedBy: "total" | "exposed_comm";
  order: string[]; // snapshot names, flagged ones excluded
}

const DIFF_PATHS: [string, string][] = [
  ["weights + grads", "result.weights_and_grads"],
  ["master weights + optimizer", "result.master_weights_and_optimizer"],
  ["activations", "result.activations"],
  ["total", "result.total"],
];

export function buildCompare(
  snapshots: Snapshot[],
  sortBy: "total" | "exposed_comm" = "total",
): CompareView {
  if (snapshots.length < 2) {
    throw new Error("need at least two snapshots to compare");
  }
  const columns: CompareColumn[] = snapshots.map((snap) => {
    const est = snap.responses.estimate;
    const cost = snap.responses.cost;
    const sim = snap.responses.simulate;
    const ok = snap.violations.length === 0;
    return {
      name: snap.name,
      flagged: !ok,
      violations: snap.violations,
      total: est && est.status === 200 ? traced(est, "result.total") : null,
      exposedComm:
        cost && cost.status === 200
          ? traced(cost, "result.exposed_comm_fraction")
          : null,
      timeline:
        sim && sim.status === 200
          ? (sim.envelope.result as ScheduleResult)
          : null,
    };
  });

  const sortable = columns.filter((c) => !c.flagged && c.total !== null);
  const key = (c: CompareColumn) =>
    sortBy === "total" ? c.total!.value : c.exposedComm?.value ?? Infinity;
  const order = [...sortable].sort((x, y) => key(x) - key(y)).map((c) => c.name);

  const diffs: DiffCell[] = [];
  const [first, second] = snapshots;
  const ea = first!.responses.estimate;
  const eb = second!.responses.estimate;
  if (ea && eb && ea.status === 200 && eb.status === 200) {
    for (const [label, path] of DIFF_PATHS) {
      const a = traced(ea, path);
      const b = traced(eb, path);
      diffs.push({ label, a, b, delta: b.value - a.value });
    }
  }
  return { columns, diffs, sortedBy: sortBy, order };
}

/** Every Traced leaf reachable in a view model (for the traceability test
 * and for render-layer sanity). */
export function collectTraced(view: unknown): Traced[] {
  const out: Traced[] = [];
  const visit = (node: unknown): void => {
    if (node == null || typeof node !== "object") return;
    const rec = node as Record<string, unknown>;
    if (
      typeof rec["value"] === "number" &&
      typeof rec["path"] === "string" &&
      typeof rec["endpoint"] === "string"
    ) {
      out.push(node as Traced);
      return;
    }
    for (const child of Object.values(rec)) visit(child);
  };
  visit(view);
  return out;
}
