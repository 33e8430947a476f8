// Tuner state: the spec under edit, last responses per endpoint, pinned
// snapshots, and the client-side invariant pre-checks run before any POST.

import type { LogEntry } from "./api.js";
import type { EndpointName, TrainingJobSpec } from "./types.js";

export interface Snapshot {
  name: string;
  spec: TrainingJobSpec;
  responses: Partial<Record<EndpointName, LogEntry>>;
  violations: string[];
}

export interface TunerState {
  spec: TrainingJobSpec;
  responses: Partial<Record<EndpointName, LogEntry>>;
  snapshots: Snapshot[];
  offline: boolean;
  preCheckViolations: string[];
}

export function initialState(spec: TrainingJobSpec): TunerState {
  return {
    spec,
    responses: {},
    snapshots: [],
    offline: false,
    preCheckViolations: preCheck(spec),
  };
}

/** Client-side mirror of the service's structural invariants: cheap checks
 * that catch obviously-broken edits before a round trip. Domain math stays
 * on the service. */
export function preCheck(spec: TrainingJobSpec): string[] {
  const out: string[] = [];
  const m = spec.model;
  const p = spec.parallel;
  if (m.top_k < 1 || m.top_k > m.num_experts) {
    out.push(`top_k=${m.top_k} must satisfy 1 <= K <= E=${m.num_experts}`);
  }
  if (m.num_dense_prefix_layers > m.num_layers) {
    out.push("dense prefix exceeds num_layers");
  }
  if (m.latent_dim != null && m.latent_dim >= m.hidden_dim) {
    out.push("latent_dim must be < hidden_dim");
  }
  const edp = p.edp || Math.max(1, (p.tp * p.cp * p.dp) / (p.etp * p.ep));
  const attnWorld = p.tp * p.cp * p.dp * p.pp;
  const moeWorld = p.etp * p.ep * edp * p.pp;
  if (attnWorld !== moeWorld) {
    out.push(`world mismatch: TP*CP*DP*PP=${attnWorld} vs ETP*EP*EDP*PP=${moeWorld}`);
  }
  if (spec.cluster.num_gpus !== attnWorld) {
    out.push(`cluster num_gpus=${spec.cluster.num_gpus} != world ${attnWorld}`);
  }
  if (p.global_batch_size % (p.microbatch_size * p.dp) !== 0) {
    out.push("GBS not divisible by MBS*DP");
  }
  if (p.seq_len % p.cp !== 0) {
    out.push("seq_len not divisible by CP");
  }
  return out;
}

export function withSpec(state: TunerState, spec: TrainingJobSpec): TunerState {
  return { ...state, spec, preCheckViolations: preCheck(spec) };
}

export function recordResponse(state: TunerState, entry: LogEntry): TunerState {
  return { ...state, responses: { ...state.responses, [entry.endpoint]: entry }, offline: false };
}

export function markOffline(state: TunerState): TunerState {
  // offline banner; the last responses stay rendered
  return { ...state, offline: true };
}

export function pinSnapshot(state: TunerState, name: string): TunerState {
  const violations: string[] = [...state.preCheckViolations];
  const est = state.responses.estimate;
  if (est && est.status !== 200) {
    for (const d of est.envelope.diagnostics) {
      violations.push(typeof d === "string" ? d : JSON.stringify(d));
    }
  }
  const snap: Snapshot = Object.freeze({
    name,
    spec: structuredClone(state.spec),
    responses: { ...state.responses },
    violations,
  });
  return { ...state, snapshots: [...state.snapshots, snap] };
}
