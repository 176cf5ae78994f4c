/** Typed client for the training service; one in-flight request at a time. */

import type { ApiRun, EvalReport, LrCurve, Progress } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    return typeof body.detail === "string"
      ? body.detail
      : JSON.stringify(body.detail ?? body);
  } catch {
    return response.statusText;
  }
}

export class CockpitClient {
  constructor(
    private base: string = "",
    private fetcher: typeof fetch = fetch,
  ) {}

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetcher(`${this.base}${path}`);
    if (!response.ok) {
      throw new ApiError(response.status, await parseDetail(response));
    }
    return (await response.json()) as T;
  }

  run(): Promise<ApiRun> {
    return this.get<ApiRun>("/api/run");
  }

  progress(): Promise<Progress> {
    return this.get<Progress>("/api/run/progress");
  }

  lrCurve(): Promise<LrCurve> {
    return this.get<LrCurve>("/api/run/lrcurve");
  }

  metrics(): Promise<EvalReport> {
    return this.get<EvalReport>("/api/run/metrics");
  }

  async start(config: unknown, interactive = true): Promise<string> {
    const response = await this.fetcher(`${this.base}/api/run/start`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ config, interactive }),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await parseDetail(response));
    }
    return ((await response.json()) as { run_id: string }).run_id;
  }

  async submitLr(stage: number, lr: number): Promise<void> {
    const response = await this.fetcher(`${this.base}/api/run/lr`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ stage, lr }),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await parseDetail(response));
    }
  }
}
