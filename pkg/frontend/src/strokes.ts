/** Geometry helpers for turning raw pointer trails into wire-format strokes. */

import type { Polarity, Stroke, StrokeKind } from "./api.js";

export type Point = [number, number]; // [row, col]

function dist(a: Point, b: Point): number {
  return Math.hypot(a[0] - b[0], a[1] - b[1]);
}

/** Total polyline arc length. */
export function arcLength(points: Point[]): number {
  let total = 0;
  for (let i = 1; i < points.length; i++) total += dist(points[i - 1], points[i]);
  return total;
}

/**
 * Resample a pointer trail to at most maxPoints, uniformly by arc length.
 * Endpoints are always preserved; short trails pass through unchanged.
 */
export function resamplePoints(points: Point[], maxPoints = 256): Point[] {
  if (points.length <= 2 || points.length <= maxPoints) return points.slice();
  const total = arcLength(points);
  if (total === 0) return [points[0], points[points.length - 1]];
  const out: Point[] = [points[0]];
  const step = total / (maxPoints - 1);
  let travelled = 0;
  let target = step;
  for (let i = 1; i < points.length; i++) {
    let segLen = dist(points[i - 1], points[i]);
    let segStart = travelled;
    while (target <= segStart + segLen && out.length < maxPoints - 1) {
      const t = segLen === 0 ? 0 : (target - segStart) / segLen;
      out.push([
        points[i - 1][0] + t * (points[i][0] - points[i - 1][0]),
        points[i - 1][1] + t * (points[i][1] - points[i - 1][1]),
      ]);
      target += step;
    }
    travelled += segLen;
  }
  out.push(points[points.length - 1]);
  return out;
}

/** Sample a quadratic Bezier through three control points. */
export function quadraticBezier(
  p0: Point,
  p1: Point,
  p2: Point,
  samples = 48,
): Point[] {
  const out: Point[] = [];
  for (let i = 0; i < samples; i++) {
    const t = i / (samples - 1);
    const a = (1 - t) * (1 - t);
    const b = 2 * (1 - t) * t;
    const c = t * t;
    out.push([
      a * p0[0] + b * p1[0] + c * p2[0],
      a * p0[1] + b * p1[1] + c * p2[1],
    ]);
  }
  return out;
}

/** Build a wire-format stroke from a raw trail, resampling to the point cap. */
export function makeStroke(
  kind: StrokeKind,
  polarity: Polarity,
  trail: Point[],
  width = 3,
): Stroke {
  if (trail.length === 0) throw new Error("stroke needs at least one point");
  if (width <= 0) throw new Error("stroke width must be positive");
  const points = kind === "point" ? [trail[0]] : resamplePoints(trail);
  return { kind, polarity, width, points: points.map((p) => [p[0], p[1]]) };
}
