/**
 * Dashboard wiring: one polling loop, one request queue, DOM event glue.
 *
 * The page renders purely from the latest snapshots; user actions go
 * through a serialized queue so at most one mutation is in flight.
 */

import { ApiError, CockpitClient } from "./api.js";
import { DEFAULT_VIEWPORT, lrAtPixel, nearestSample } from "./chart.js";
import {
  renderCurrentLrs,
  renderLrCurve,
  renderMetricsTable,
  renderProgress,
  renderSparkline,
  renderStaleBanner,
  formatLr,
} from "./render.js";
import type { LrCurve, Progress } from "./types.js";

const POLL_INTERVAL_MS = 1000;

interface Snapshots {
  progress: Progress | null;
  curve: LrCurve | null;
  metricsHtml: string;
  lastSeen: string | null; // non-null only while the server is unreachable
  selectedLr: number | null;
  notice: string;
}

export class App {
  private snaps: Snapshots = {
    progress: null,
    curve: null,
    metricsHtml: renderMetricsTable(null),
    lastSeen: null,
    selectedLr: null,
    notice: "",
  };
  private queue: Promise<void> = Promise.resolve();
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private client: CockpitClient,
    private root: Document = document,
  ) {}

  start(): void {
    this.bindEvents();
    void this.poll();
    this.timer = setInterval(() => void this.poll(), POLL_INTERVAL_MS);
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
  }

  /** One poll cycle: progress always, curve/metrics when relevant. */
  async poll(): Promise<void> {
    try {
      const progress = await this.client.progress();
      this.snaps.progress = progress;
      this.snaps.lastSeen = null;
      if (progress.status === "awaiting_lr" || progress.status === "lrfind") {
        try {
          this.snaps.curve = await this.client.lrCurve();
        } catch (err) {
          if (!(err instanceof ApiError && err.status === 404)) throw err;
        }
      }
      if (progress.status === "done") {
        try {
          const report = await this.client.metrics();
          this.snaps.metricsHtml = renderMetricsTable(report);
        } catch (err) {
          if (!(err instanceof ApiError && err.status === 404)) throw err;
        }
      }
    } catch {
      this.snaps.lastSeen = this.snaps.lastSeen ?? new Date().toISOString();
    }
    this.render();
  }

  /** Serialized user action: submit the chosen rate for the current stage. */
  submitSelectedLr(): void {
    const progress = this.snaps.progress;
    const lr = this.snaps.selectedLr;
    if (!progress || lr === null) return;
    if (progress.status !== "awaiting_lr") {
      this.snaps.notice = "Run is not awaiting an LR choice.";
      this.render();
      return;
    }
    this.queue = this.queue.then(async () => {
      try {
        await this.client.submitLr(progress.stage, lr);
        this.snaps.notice = `Submitted lr ${formatLr(lr)} for stage ${progress.stage + 1}.`;
      } catch (err) {
        this.snaps.notice = err instanceof ApiError
          ? `Rejected (${err.status}): ${err.detail}`
          : `Network failure — try again.`;
      }
      this.render();
      await this.poll();
    });
  }

  selectLrFromPixel(px: number): void {
    if (!this.snaps.curve) return;
    this.snaps.selectedLr = lrAtPixel(px, this.snaps.curve, DEFAULT_VIEWPORT);
    this.snaps.notice = "";
    this.render();
  }

  selectLrFromInput(raw: string): void {
    const value = Number(raw);
    const curve = this.snaps.curve;
    if (!Number.isFinite(value) || value <= 0) {
      this.snaps.notice = "LR must be a positive number.";
    } else if (curve && (value < curve.samples[0].lr ||
        value > curve.samples[curve.samples.length - 1].lr)) {
      this.snaps.notice = "LR outside the sampled range.";
    } else {
      this.snaps.selectedLr = value;
      this.snaps.notice = "";
    }
    this.render();
  }

  hoverReadout(px: number): string {
    if (!this.snaps.curve) return "";
    const s = nearestSample(px, this.snaps.curve, DEFAULT_VIEWPORT);
    return `lr ${formatLr(s.lr)} — smoothed loss ${s.smoothed.toFixed(4)}`;
  }

  render(): void {
    const el = (id: string) => this.root.getElementById(id);
    const progress = this.snaps.progress;
    const banner = el("banner");
    if (banner) banner.innerHTML = renderStaleBanner(this.snaps.lastSeen);
    const prog = el("progress");
    if (prog) {
      prog.innerHTML = progress
        ? renderProgress(progress)
        : `<div class="empty-state">No run yet — start one via the API or CLI.</div>`;
    }
    const spark = el("sparkline");
    if (spark && progress) spark.innerHTML = renderSparkline(progress);
    const lrs = el("current-lrs");
    if (lrs && progress) lrs.innerHTML = renderCurrentLrs(progress);
    const curveEl = el("curve");
    if (curveEl) curveEl.innerHTML = renderLrCurve(this.snaps.curve);
    const metricsEl = el("metrics");
    if (metricsEl) metricsEl.innerHTML = this.snaps.metricsHtml;
    const selected = el("selected-lr");
    if (selected) {
      selected.textContent = this.snaps.selectedLr === null
        ? "none"
        : formatLr(this.snaps.selectedLr);
    }
    const notice = el("notice");
    if (notice) notice.textContent = this.snaps.notice;
  }

  private bindEvents(): void {
    const chartHost = this.root.getElementById("curve");
    chartHost?.addEventListener("click", (event) => {
      const svg = this.root.getElementById("lr-chart");
      if (!svg) return;
      const rect = svg.getBoundingClientRect();
      const scale = DEFAULT_VIEWPORT.width / rect.width;
      this.selectLrFromPixel((event as MouseEvent).clientX - rect.left) ;
      void scale;
    });
    chartHost?.addEventListener("mousemove", (event) => {
      const readout = this.root.getElementById("hover-readout");
      const svg = this.root.getElementById("lr-chart");
      if (!readout || !svg) return;
      const rect = svg.getBoundingClientRect();
      readout.textContent = this.hoverReadout(
        (event as MouseEvent).clientX - rect.left);
    });
    this.root.getElementById("lr-input")?.addEventListener("change", (ev) => {
      this.selectLrFromInput((ev.target as HTMLInputElement).value);
    });
    this.root.getElementById("lr-submit")?.addEventListener("click", () => {
      this.submitSelectedLr();
    });
  }
}

export function mount(base = ""): App {
  const app = new App(new CockpitClient(base));
  app.start();
  return app;
}
