// Wiring: fetch the bundled fixture, then live-refresh the dashboard on
// every edit (debounced; responses resolve last-write-wins).

import { ApiClient, debounce, fetchTransport } from "./api.js";
import {
  initialState,
  markOffline,
  pinSnapshot,
  recordResponse,
  withSpec,
  type TunerState,
} from "./state.js";
import { buildCompare, buildDashboard } from "./viewmodel.js";
import { renderCompare, renderDashboard } from "./render.js";
import type { TrainingJobSpec } from "./types.js";

const SERVICE = (window as unknown as { MOELAB_URL?: string }).MOELAB_URL
  ?? "http://127.0.0.1:8321";

async function boot(): Promise<void> {
  const dashboardRoot = document.getElementById("dashboard")!;
  const compareRoot = document.getElementById("compare")!;
  const editor = document.getElementById("spec-editor") as HTMLTextAreaElement;
  const pinButton = document.getElementById("pin")! as HTMLButtonElement;
  const compareButton = document.getElementById("run-compare")! as HTMLButtonElement;

  const listing = await fetch(`${SERVICE}/api/v1/fixtures`).then((r) => r.json());
  const spec = listing.result.fixtures[0].spec as TrainingJobSpec;
  editor.value = JSON.stringify(spec, null, 2);

  const client = new ApiClient(fetchTransport(SERVICE));
  let state: TunerState = initialState(spec);

  const refresh = async () => {
    renderDashboard(buildDashboard(state), dashboardRoot);
    if (state.preCheckViolations.length) return; // blocked before POST
    const calls: Array<["estimate" | "cost" | "advise", unknown]> = [
      ["estimate", state.spec],
      ["cost", state.spec],
      ["advise", state.spec],
    ];
    try {
      for (const [endpoint, body] of calls) {
        const { entry, stale } = await client.call(endpoint, body);
        if (!stale) state = recordResponse(state, entry);
      }
      if (state.spec.parallel.pipeline_layout) {
        const { entry, stale } = await client.call("simulate", {
          layout: state.spec.parallel.pipeline_layout,
          pp: state.spec.parallel.pp,
          vpp: state.spec.parallel.vpp,
          num_microbatches: Math.min(
            32,
            state.spec.parallel.global_batch_size
              / (state.spec.parallel.microbatch_size * state.spec.parallel.dp),
          ),
          include_events: false,
        });
        if (!stale) state = recordResponse(state, entry);
      }
    } catch {
      state = markOffline(state);
    }
    renderDashboard(buildDashboard(state), dashboardRoot);
  };

  const debouncedRefresh = debounce(() => void refresh(), 250);
  editor.addEventListener("input", () => {
    try {
      state = withSpec(state, JSON.parse(editor.value) as TrainingJobSpec);
    } catch {
      return; // keep last valid spec while the user types
    }
    debouncedRefresh();
  });

  pinButton.addEventListener("click", () => {
    state = pinSnapshot(state, `snapshot ${state.snapshots.length + 1}`);
  });
  compareButton.addEventListener("click", () => {
    if (state.snapshots.length >= 2) {
      renderCompare(buildCompare(state.snapshots), compareRoot);
    }
  });

  await refresh();
}

void boot();
