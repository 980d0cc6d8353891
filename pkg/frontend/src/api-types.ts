/** JSON schema shared with the matting service; mirrored here in one place. */

export interface SessionMeta {
  id: string;
  width: number;
  height: number;
  n_candidates: number;
  candidate_source: string;
}

export interface BoxCoords {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface PointCoords {
  x: number;
  y: number;
}

export type MergeBase = "mask" | "os8";

/** Prompt coordinates are always in source-image pixel space. */
export interface PromptRequest {
  kind: "box" | "point";
  box?: BoxCoords;
  point?: PointCoords;
  policy?: MergeBase;
}

export interface MatteResponse {
  result: number;
  candidate_id: number;
  width: number;
  height: number;
  matte_png: string; // base64 PNG
  mask_png: string;  // base64 PNG
  timing_ms: number;
}

export interface CandidatePreview {
  id: number;
  score: number;
  mask_png: string;
}

export interface ApiError {
  error: string;
  field?: string;
}

export type BackgroundKind = "white" | "black" | "checker";
