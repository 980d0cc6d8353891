/** Client-side session state: append-only history, one in-flight request,
 * and the three synchronized result views. No matting math happens here. */

import type {
  BackgroundKind, MatteResponse, PromptRequest, SessionMeta,
} from "./api-types.js";
import type { ViewTransform } from "./transform.js";

export interface HistoryEntry {
  result: number;
  candidateId: number;
  prompt: PromptRequest;
  mattePng: string;
  maskPng: string;
  timingMs: number;
}

export interface AnnotationState {
  session: SessionMeta | null;
  view: ViewTransform;
  mode: "box" | "point";
  background: BackgroundKind;
  history: HistoryEntry[];
  active: number | null;       // index into history shown in the views
  busy: boolean;
  queue: PromptRequest[];
  error: string | null;
}

export function initialState(): AnnotationState {
  return {
    session: null,
    view: { zoom: 1, panX: 0, panY: 0 },
    mode: "box",
    background: "white",
    history: [],
    active: null,
    busy: false,
    queue: [],
    error: null,
  };
}

export function beginSession(state: AnnotationState,
                             meta: SessionMeta): AnnotationState {
  return { ...initialState(), session: meta, view: state.view,
           mode: state.mode, background: state.background };
}

/** Queue discipline: at most one request in flight per session. Returns the
 * request to send now, or null if it was queued behind the active one. */
export function submitPrompt(state: AnnotationState,
                             request: PromptRequest): PromptRequest | null {
  if (state.busy) {
    state.queue.push(request);
    return null;
  }
  state.busy = true;
  return request;
}

/** Success path: append exactly one history entry and focus it. */
export function renderResult(state: AnnotationState, request: PromptRequest,
                             response: MatteResponse): HistoryEntry {
  const entry: HistoryEntry = {
    result: response.result,
    candidateId: response.candidate_id,
    prompt: request,
    mattePng: response.matte_png,
    maskPng: response.mask_png,
    timingMs: response.timing_ms,
  };
  state.history.push(entry);
  state.active = state.history.length - 1;
  state.error = null;
  return entry;
}

/** Failure path: show the banner, leave history and views untouched. */
export function renderError(state: AnnotationState, message: string): void {
  state.error = message;
}

/** After a response (either way): release the slot and pop the next queued
 * request, if any. */
export function completeRequest(state: AnnotationState): PromptRequest | null {
  const next = state.queue.shift() ?? null;
  state.busy = next !== null;
  return next;
}

export function setBackground(state: AnnotationState,
                              background: BackgroundKind): boolean {
  const changed = state.background !== background;
  state.background = background;
  return changed && state.active !== null;
}

/** URL of the composite for the active result under the chosen background;
 * re-fetched whenever either changes. */
export function compositeUrl(base: string, state: AnnotationState): string | null {
  if (state.session === null || state.active === null) {
    return null;
  }
  const entry = state.history[state.active];
  return `${base}/v1/sessions/${state.session.id}/results/${entry.result}` +
    `/composite?bg=${state.background}`;
}
