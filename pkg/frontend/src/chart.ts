/**
 * Pure geometry for the loss-vs-learning-rate chart.
 *
 * Everything is computed against an abstract viewport so both the SVG
 * renderer and the click handler share one mapping; no DOM access here.
 */

import type { LrCurve } from "./types.js";

export interface Viewport {
  width: number;
  height: number;
  margin: number;
}

export const DEFAULT_VIEWPORT: Viewport = { width: 640, height: 360, margin: 48 };

export interface ChartGeometry {
  /** pixel coordinates of each sample, in sample order */
  points: { x: number; y: number }[];
  /** pixel position of the suggestion marker */
  marker: { x: number; y: number };
  logMin: number;
  logMax: number;
}

export function geometry(curve: LrCurve, vp: Viewport = DEFAULT_VIEWPORT): ChartGeometry {
  const xs = curve.samples.map((s) => Math.log10(s.lr));
  const ys = curve.samples.map((s) => s.smoothed);
  const logMin = Math.min(...xs);
  const logMax = Math.max(...xs);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const xSpan = logMax - logMin || 1;
  const ySpan = yMax - yMin || 1;
  const toX = (lx: number) =>
    vp.margin + ((lx - logMin) / xSpan) * (vp.width - 2 * vp.margin);
  const toY = (y: number) =>
    vp.height - vp.margin - ((y - yMin) / ySpan) * (vp.height - 2 * vp.margin);
  const points = curve.samples.map((s) => ({
    x: toX(Math.log10(s.lr)),
    y: toY(s.smoothed),
  }));
  const suggested = curve.samples.find((s) => s.lr === curve.suggested_lr) ??
    curve.samples[0];
  return {
    points,
    marker: { x: toX(Math.log10(suggested.lr)), y: toY(suggested.smoothed) },
    logMin,
    logMax,
  };
}

/** Invert a horizontal pixel offset back to a learning rate (log scale). */
export function lrAtPixel(
  px: number,
  curve: LrCurve,
  vp: Viewport = DEFAULT_VIEWPORT,
): number {
  const { logMin, logMax } = geometry(curve, vp);
  const usable = vp.width - 2 * vp.margin;
  const frac = Math.min(1, Math.max(0, (px - vp.margin) / usable));
  const lr = 10 ** (logMin + frac * (logMax - logMin));
  // clamp into the sampled range so a selection is always submittable
  const lo = curve.samples[0].lr;
  const hi = curve.samples[curve.samples.length - 1].lr;
  return Math.min(hi, Math.max(lo, lr));
}

/** Nearest sampled point to a horizontal pixel offset (for hover readouts). */
export function nearestSample(
  px: number,
  curve: LrCurve,
  vp: Viewport = DEFAULT_VIEWPORT,
): { lr: number; smoothed: number; index: number } {
  const geo = geometry(curve, vp);
  let best = 0;
  let bestDist = Infinity;
  geo.points.forEach((p, i) => {
    const d = Math.abs(p.x - px);
    if (d < bestDist) {
      bestDist = d;
      best = i;
    }
  });
  const s = curve.samples[best];
  return { lr: s.lr, smoothed: s.smoothed, index: best };
}

export function svgPath(curve: LrCurve, vp: Viewport = DEFAULT_VIEWPORT): string {
  return geometry(curve, vp)
    .points.map((p, i) => `${i === 0 ? "M" : "L"}${p.x.toFixed(1)},${p.y.toFixed(1)}`)
    .join(" ");
}
