/** Zoom/pan view transform between canvas and source-image pixels.
 *
 * canvas = source * zoom + pan, so the inverse is (canvas - pan) / zoom.
 * Prompt coordinates are stored in source space, independent of the view.
 */

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export interface Vec2 {
  x: number;
  y: number;
}

export function sourceToCanvas(p: Vec2, view: ViewTransform): Vec2 {
  return { x: p.x * view.zoom + view.panX, y: p.y * view.zoom + view.panY };
}

export function canvasToSource(p: Vec2, view: ViewTransform): Vec2 {
  if (view.zoom <= 0) {
    throw new Error(`zoom must be positive, got ${view.zoom}`);
  }
  return { x: (p.x - view.panX) / view.zoom, y: (p.y - view.panY) / view.zoom };
}

export function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}
