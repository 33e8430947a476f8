// Service client with a request log. Every response the UI may render is
// recorded here first; the traceability tests replay the log to prove no
// displayed number was computed locally.

import type { ApiEnvelope, EndpointName } from "./types.js";

export interface LogEntry {
  seq: number;
  endpoint: EndpointName;
  requestBody: unknown;
  envelope: ApiEnvelope<unknown>;
  status: number;
}

export type Transport = (
  path: string,
  body: unknown,
) => Promise<{ status: number; json: unknown }>;

const ENDPOINT_PATHS: Record<EndpointName, string> = {
  estimate: "/api/v1/estimate",
  cost: "/api/v1/cost",
  advise: "/api/v1/advise",
  simulate: "/api/v1/simulate",
};

export function fetchTransport(baseUrl: string): Transport {
  return async (path, body) => {
    const response = await fetch(baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return { status: response.status, json: await response.json() };
  };
}

export class ApiClient {
  private log: LogEntry[] = [];
  private seq = 0;
  // last-write-wins: only the newest in-flight request per endpoint may
  // publish its response
  private latest: Map<EndpointName, number> = new Map();

  constructor(private transport: Transport) {}

  requestLog(): readonly LogEntry[] {
    return this.log;
  }

  async call(
    endpoint: EndpointName,
    body: unknown,
  ): Promise<{ entry: LogEntry; stale: boolean }> {
    const seq = ++this.seq;
    this.latest.set(endpoint, seq);
    const { status, json } = await this.transport(ENDPOINT_PATHS[endpoint], body);
    const entry: LogEntry = {
      seq,
      endpoint,
      requestBody: body,
      envelope: json as ApiEnvelope<unknown>,
      status,
    };
    this.log.push(entry);
    const stale = this.latest.get(endpoint) !== seq;
    return { entry, stale };
  }
}

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
  timers: { set: typeof setTimeout; clear: typeof clearTimeout } = {
    set: setTimeout,
    clear: clearTimeout,
  },
): (...args: A) => void {
  let handle: ReturnType<typeof setTimeout> | undefined;
  return (...args: A) => {
    if (handle !== undefined) timers.clear(handle);
    handle = timers.set(() => fn(...args), waitMs);
  };
}
