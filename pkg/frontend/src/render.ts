// DOM rendering of the view models. Numbers shown here come exclusively
// from Traced values (service responses) or InputNumber values (the user's
// own spec fields); bar widths are presentation scaling only.

import type { CompareView, DashboardView } from "./viewmodel.js";

const GB = 1e9;

function fmtGB(bytes: number): string {
  return `${(bytes / GB).toFixed(1)} GB`;
}

export function renderDashboard(view: DashboardView, root: HTMLElement): void {
  root.replaceChildren();

  if (view.offline) {
    const banner = el("div", "banner offline", "service unreachable — showing last snapshot");
    root.appendChild(banner);
  }
  for (const v of view.preCheckViolations) {
    root.appendChild(el("div", "banner violation", v));
  }

  const mem = el("section", "memory");
  mem.appendChild(el("h2", "", "per-GPU memory"));
  const scale = Math.max(view.capacity.value, view.total?.value ?? 0);
  for (const bar of view.bars) {
    const row = el("div", "bar-row");
    row.appendChild(el("span", "bar-label", bar.label));
    const track = el("div", "bar-track");
    const fill = el("div", "bar-fill");
    fill.style.width = `${((100 * bar.bytes.value) / scale).toFixed(2)}%`;
    fill.title = `${bar.bytes.endpoint}:${bar.bytes.path}`;
    track.appendChild(fill);
    row.appendChild(track);
    row.appendChild(el("span", "bar-value", fmtGB(bar.bytes.value)));
    mem.appendChild(row);
  }
  const capLine = el("div", "capacity-line",
    `GPU capacity ${fmtGB(view.capacity.value)}`);
  mem.appendChild(capLine);
  if (view.total) {
    const verdict = el(
      "div",
      view.feasible ? "verdict feasible" : "verdict infeasible",
      `${fmtGB(view.total.value)} total — ${view.feasible ? "fits" : "exceeds capacity"}`,
    );
    mem.appendChild(verdict);
  }
  root.appendChild(mem);

  const perf = el("section", "perf");
  perf.appendChild(el("h2", "", "communication and schedule"));
  if (view.a2aVolume) {
    perf.appendChild(el("div", "stat", `all-to-all send ${fmtGB(view.a2aVolume.value)}`));
  }
  if (view.exposedCommFraction) {
    perf.appendChild(el("div", "stat",
      `exposed comm ${(100 * view.exposedCommFraction.value).toFixed(1)}%`));
  }
  if (view.bubbleRatio) {
    perf.appendChild(el("div", "stat",
      `pipeline bubble ${(100 * view.bubbleRatio.value).toFixed(2)}%`));
  }
  root.appendChild(perf);

  if (view.leverDeltas.length) {
    const levers = el("section", "levers");
    levers.appendChild(el("h2", "", "lever savings"));
    for (const d of view.leverDeltas) {
      levers.appendChild(el("div", "stat", `${d.lever}: −${fmtGB(d.bytes.value)}`));
    }
    root.appendChild(levers);
  }

  const advisor = el("section", "advisor");
  advisor.appendChild(el("h2", "", "advisor"));
  for (const hit of view.advisor) {
    advisor.appendChild(el("div", `hit ${hit.severity}`, `${hit.guideline}: ${hit.message}`));
  }
  if (view.inflightAssumption) {
    advisor.appendChild(el("div", "note", view.inflightAssumption));
  }
  root.appendChild(advisor);
}

export function renderCompare(view: CompareView, root: HTMLElement): void {
  root.replaceChildren();
  const table = el("table", "compare");
  const header = el("tr", "");
  header.appendChild(el("th", "", "metric"));
  for (const col of view.columns) {
    header.appendChild(el("th", col.flagged ? "flagged" : "",
      col.flagged ? `${col.name} (violations)` : col.name));
  }
  table.appendChild(header);
  for (const diff of view.diffs) {
    const row = el("tr", "");
    row.appendChild(el("td", "", diff.label));
    row.appendChild(el("td", "", fmtGB(diff.a.value)));
    row.appendChild(el("td", "", `${fmtGB(diff.b.value)} (${diff.delta >= 0 ? "+" : ""}${fmtGB(diff.delta)})`));
    table.appendChild(row);
  }
  root.appendChild(table);
  root.appendChild(el("div", "order", `sorted by ${view.sortedBy}: ${view.order.join(" < ")}`));
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}
