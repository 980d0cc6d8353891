/** Turn canvas gestures into PromptRequests in source-pixel space. */

import type { BoxCoords, MergeBase, PromptRequest } from "./api-types.js";
import { canvasToSource, clamp, Vec2, ViewTransform } from "./transform.js";

export interface DragGesture {
  start: Vec2; // canvas coords
  end: Vec2;
}

export interface ImageExtents {
  width: number;
  height: number;
}

/**
 * Normalize a drag into a source-space box: inverse-transform both corners,
 * order them so x0 < x1 and y0 < y1, clamp to the image, and round to whole
 * pixels. Returns null for degenerate (zero-area) drags, which the caller
 * surfaces as a hint instead of a request.
 */
export function boxFromDrag(drag: DragGesture, view: ViewTransform,
                            image: ImageExtents): BoxCoords | null {
  const a = canvasToSource(drag.start, view);
  const b = canvasToSource(drag.end, view);
  const x0 = clamp(Math.round(Math.min(a.x, b.x)), 0, image.width);
  const x1 = clamp(Math.round(Math.max(a.x, b.x)), 0, image.width);
  const y0 = clamp(Math.round(Math.min(a.y, b.y)), 0, image.height);
  const y1 = clamp(Math.round(Math.max(a.y, b.y)), 0, image.height);
  if (x1 - x0 < 1 || y1 - y0 < 1) {
    return null;
  }
  return { x0, y0, x1, y1 };
}

/** Inverse-transform a click and clamp it inside the image. */
export function pointFromClick(click: Vec2, view: ViewTransform,
                               image: ImageExtents): { x: number; y: number } {
  const p = canvasToSource(click, view);
  return {
    x: clamp(Math.round(p.x), 0, image.width - 1),
    y: clamp(Math.round(p.y), 0, image.height - 1),
  };
}

export function buildPromptRequest(
  gesture: DragGesture | Vec2,
  view: ViewTransform,
  image: ImageExtents,
  policy?: MergeBase,
): PromptRequest | null {
  if ("start" in gesture) {
    const box = boxFromDrag(gesture, view, image);
    if (box === null) {
      return null;
    }
    return policy ? { kind: "box", box, policy } : { kind: "box", box };
  }
  const point = pointFromClick(gesture, view, image);
  return policy ? { kind: "point", point, policy } : { kind: "point", point };
}
