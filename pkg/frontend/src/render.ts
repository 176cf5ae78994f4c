/**
 * Pure snapshot-to-HTML renderers.
 *
 * Every number shown is an echo of an API payload; rendering the same
 * snapshot twice yields byte-identical markup, which the snapshot tests
 * rely on.
 */

import { DEFAULT_VIEWPORT, geometry, svgPath } from "./chart.js";
import type { EvalReport, LrCurve, Progress, RunStatus } from "./types.js";

const STATUS_LABELS: Record<RunStatus, string> = {
  idle: "Idle",
  lrfind: "Finding LR",
  training: "Training",
  awaiting_lr: "Awaiting LR choice",
  done: "Done",
  failed: "Failed",
};

export function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function formatLr(lr: number): string {
  return lr.toExponential(2).replace("e-", "e-").replace("e+", "e+");
}

export function renderStatusBadge(status: RunStatus): string {
  return `<span class="badge badge-${status}">${STATUS_LABELS[status]}</span>`;
}

export function renderProgress(p: Progress): string {
  const pct = p.total_epochs > 0
    ? Math.round((p.epochs_completed / p.total_epochs) * 100)
    : 0;
  const label = `${p.epochs_completed} of ${p.total_epochs} epochs`;
  const detail = p.status === "failed" && p.error
    ? `<div class="error">${esc(p.error)}</div>`
    : "";
  return [
    `<div class="progress-row">`,
    renderStatusBadge(p.status),
    `<span class="progress-label">stage ${p.stage + 1}, step ${p.step + 1} — ${label}</span>`,
    `</div>`,
    `<div class="progress-bar"><div class="progress-fill" style="width:${pct}%"></div></div>`,
    detail,
  ].join("");
}

export function renderSparkline(p: Progress, width = 240, height = 48): string {
  const losses = p.history.map((h) => h.train_loss);
  if (losses.length === 0) {
    return `<svg class="sparkline" width="${width}" height="${height}"></svg>`;
  }
  const lo = Math.min(...losses);
  const hi = Math.max(...losses);
  const span = hi - lo || 1;
  const step = losses.length > 1 ? width / (losses.length - 1) : 0;
  const path = losses
    .map((v, i) => {
      const x = i * step;
      const y = height - 4 - ((v - lo) / span) * (height - 8);
      return `${i === 0 ? "M" : "L"}${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
  return [
    `<svg class="sparkline" width="${width}" height="${height}" viewBox="0 0 ${width} ${height}">`,
    `<path d="${path}" fill="none" stroke="#2563eb" stroke-width="1.5"/>`,
    `</svg>`,
  ].join("");
}

export function renderCurrentLrs(p: Progress): string {
  const last = p.history[p.history.length - 1];
  if (!last) return `<div class="lrs">no learning rates yet</div>`;
  const cells = last.lrs
    .map((lr, i) => `<span class="lr-chip">g${i}: ${formatLr(lr)}</span>`)
    .join(" ");
  return `<div class="lrs">${cells}</div>`;
}

export function renderLrCurve(curve: LrCurve | null): string {
  if (!curve || curve.samples.length === 0) {
    return `<div class="empty-state">No LR curve yet — it appears after the range test runs.</div>`;
  }
  const vp = DEFAULT_VIEWPORT;
  const geo = geometry(curve, vp);
  const samples = curve.samples;
  const xTicks = [samples[0].lr, curve.suggested_lr,
    samples[samples.length - 1].lr]
    .map(formatLr)
    .join(" · ");
  return [
    `<svg id="lr-chart" width="${vp.width}" height="${vp.height}" viewBox="0 0 ${vp.width} ${vp.height}" data-samples="${samples.length}">`,
    `<rect width="${vp.width}" height="${vp.height}" fill="#fafafa"/>`,
    `<path d="${svgPath(curve, vp)}" fill="none" stroke="#2563eb" stroke-width="2"/>`,
    `<circle id="lr-suggested" cx="${geo.marker.x.toFixed(1)}" cy="${geo.marker.y.toFixed(1)}" r="5" fill="#dc2626"/>`,
    `<text x="${vp.margin}" y="${vp.height - 10}" font-size="11">lr: ${xTicks} (${curve.stop_reason})</text>`,
    `</svg>`,
    `<div class="curve-meta">suggested lr: <b>${formatLr(curve.suggested_lr)}</b>; click the chart or type a value to choose.</div>`,
  ].join("");
}

export function renderMetricsTable(report: EvalReport | null): string {
  if (!report) {
    return `<div class="empty-state">Metrics appear when the run finishes.</div>`;
  }
  const header = report.classes.map((c) => `<th>${esc(c)}</th>`).join("");
  const rows: [string, "recall" | "ppv" | "f1"][] = [
    ["Recall (Sensitivity) %", "recall"],
    ["Positive Predictive Value (Precision) %", "ppv"],
    ["F-1 score %", "f1"],
  ];
  const body = rows
    .map(([title, key]) => {
      const cells = report.classes
        .map((c) => {
          const v = report.per_class[c]?.[key];
          return `<td>${v === null || v === undefined ? "undef" : v.toFixed(2)}</td>`;
        })
        .join("");
      return `<tr><td class="metric-name">${title}</td>${cells}</tr>`;
    })
    .join("");
  return [
    `<table class="metrics"><thead><tr><th></th>${header}</tr></thead>`,
    `<tbody>${body}</tbody></table>`,
    `<div class="accuracy">Accuracy: <b>${report.accuracy.toFixed(2)}%</b> (${report.n} samples)</div>`,
  ].join("");
}

export function renderStaleBanner(lastSeen: string | null): string {
  if (lastSeen === null) return "";
  return `<div class="stale-banner">Server unreachable — showing data from ${esc(lastSeen)}.</div>`;
}
