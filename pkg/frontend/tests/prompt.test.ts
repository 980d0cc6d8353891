import { describe, expect, it } from "vitest";

import { boxFromDrag, buildPromptRequest, pointFromClick } from "../src/prompt";
import { sourceToCanvas } from "../src/transform";
import { mulberry32, randomView } from "./transform.test";

const IMAGE = { width: 640, height: 480 };
const UNIT = { zoom: 1, panX: 0, panY: 0 };

describe("boxFromDrag", () => {
  it("normalizes reversed corners at zoom 1", () => {
    const box = boxFromDrag({ start: { x: 10, y: 40 }, end: { x: 3, y: 5 } },
                            UNIT, IMAGE);
    expect(box).toEqual({ x0: 3, y0: 5, x1: 10, y1: 40 });
  });

  it("rejects zero-area drags", () => {
    expect(boxFromDrag({ start: { x: 7, y: 9 }, end: { x: 7, y: 30 } },
                       UNIT, IMAGE)).toBeNull();
    expect(boxFromDrag({ start: { x: 7, y: 9 }, end: { x: 7.2, y: 9.3 } },
                       UNIT, IMAGE)).toBeNull();
  });

  it("clamps drags that leave the image", () => {
    const box = boxFromDrag({ start: { x: -50, y: -10 },
                              end: { x: 9999, y: 9999 } }, UNIT, IMAGE);
    expect(box).toEqual({ x0: 0, y0: 0, x1: 640, y1: 480 });
  });

  it("inverse-transforms and corner-normalizes under random zoom/pan", () => {
    const rand = mulberry32(7);
    for (let i = 0; i < 500; i++) {
      const view = randomView(rand);
      // pick a real source-space box, project it to canvas, drag backwards
      const sx0 = rand() * (IMAGE.width - 2);
      const sy0 = rand() * (IMAGE.height - 2);
      const sx1 = sx0 + 1 + rand() * (IMAGE.width - sx0 - 1);
      const sy1 = sy0 + 1 + rand() * (IMAGE.height - sy0 - 1);
      const a = sourceToCanvas({ x: sx1, y: sy0 }, view); // reversed corners
      const b = sourceToCanvas({ x: sx0, y: sy1 }, view);
      const box = boxFromDrag({ start: a, end: b }, view, IMAGE);
      if (box === null) continue; // sub-pixel boxes at tiny zoom round away
      expect(box.x0).toBeLessThan(box.x1);
      expect(box.y0).toBeLessThan(box.y1);
      expect(box.x0).toBeGreaterThanOrEqual(0);
      expect(box.y0).toBeGreaterThanOrEqual(0);
      expect(box.x1).toBeLessThanOrEqual(IMAGE.width);
      expect(box.y1).toBeLessThanOrEqual(IMAGE.height);
      // the drag corners land back on the source box within rounding
      expect(Math.abs(box.x0 - sx0)).toBeLessThanOrEqual(0.5 + 1e-6);
      expect(Math.abs(box.y0 - sy0)).toBeLessThanOrEqual(0.5 + 1e-6);
      expect(Math.abs(box.x1 - sx1)).toBeLessThanOrEqual(0.5 + 1e-6);
      expect(Math.abs(box.y1 - sy1)).toBeLessThanOrEqual(0.5 + 1e-6);
    }
  });
});

describe("pointFromClick", () => {
  it("inverse-transforms through 2x zoom", () => {
    const view = { zoom: 2, panX: 0, panY: 0 };
    expect(pointFromClick({ x: 100, y: 100 }, view, IMAGE))
      .toEqual({ x: 50, y: 50 });
  });

  it("clamps to the last pixel", () => {
    expect(pointFromClick({ x: 99999, y: -5 }, UNIT, IMAGE))
      .toEqual({ x: 639, y: 0 });
  });
});

describe("buildPromptRequest", () => {
  it("emits a box request from a drag", () => {
    const req = buildPromptRequest(
      { start: { x: 10, y: 40 }, end: { x: 3, y: 5 } }, UNIT, IMAGE);
    expect(req).toEqual({ kind: "box", box: { x0: 3, y0: 5, x1: 10, y1: 40 } });
  });

  it("emits a point request from a click", () => {
    const req = buildPromptRequest({ x: 100, y: 100 },
                                   { zoom: 2, panX: 0, panY: 0 }, IMAGE);
    expect(req).toEqual({ kind: "point", point: { x: 50, y: 50 } });
  });

  it("returns null for degenerate drags", () => {
    expect(buildPromptRequest({ start: { x: 5, y: 5 }, end: { x: 5, y: 5 } },
                              UNIT, IMAGE)).toBeNull();
  });

  it("threads the policy override", () => {
    const req = buildPromptRequest({ x: 8, y: 8 }, UNIT, IMAGE, "mask");
    expect(req).toMatchObject({ kind: "point", policy: "mask" });
  });
});
