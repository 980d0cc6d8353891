/** DOM wiring for the interactive matting page: upload an image, draw a box
 * or click a point, inspect mask / matte / composite, walk the history. */

import type { BackgroundKind, PromptRequest } from "./api-types.js";
import { MatteClient, ServiceError } from "./client.js";
import { buildPromptRequest } from "./prompt.js";
import {
  AnnotationState, beginSession, completeRequest, compositeUrl, initialState,
  renderError, renderResult, setBackground, submitPrompt,
} from "./state.js";
import { sourceToCanvas } from "./transform.js";

const API_BASE = (window as unknown as { MATTEKIT_API?: string }).MATTEKIT_API
  ?? `${location.protocol}//${location.host}`;

const client = new MatteClient(API_BASE);
const state: AnnotationState = initialState();

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
};

const canvas = el<HTMLCanvasElement>("image-canvas");
const ctx = canvas.getContext("2d")!;
const overlaySource = el<HTMLImageElement>("overlay-source");
const maskView = el<HTMLImageElement>("mask-view");
const matteView = el<HTMLImageElement>("matte-view");
const compositeView = el<HTMLImageElement>("composite-view");
const historyList = el<HTMLUListElement>("history");
const banner = el<HTMLDivElement>("error-banner");
const hint = el<HTMLDivElement>("hint");

let sourceImage: HTMLImageElement | null = null;
let dragStart: { x: number; y: number } | null = null;
let dragCurrent: { x: number; y: number } | null = null;

function fitView(): void {
  if (!sourceImage || !state.session) return;
  const zoom = Math.min(canvas.width / state.session.width,
                        canvas.height / state.session.height);
  state.view = {
    zoom,
    panX: (canvas.width - state.session.width * zoom) / 2,
    panY: (canvas.height - state.session.height * zoom) / 2,
  };
}

function drawCanvas(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!sourceImage || !state.session) return;
  const topLeft = sourceToCanvas({ x: 0, y: 0 }, state.view);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(sourceImage, topLeft.x, topLeft.y,
                state.session.width * state.view.zoom,
                state.session.height * state.view.zoom);
  if (dragStart && dragCurrent) {
    ctx.strokeStyle = "#2ea3ff";
    ctx.lineWidth = 1.5;
    ctx.strokeRect(Math.min(dragStart.x, dragCurrent.x),
                   Math.min(dragStart.y, dragCurrent.y),
                   Math.abs(dragCurrent.x - dragStart.x),
                   Math.abs(dragCurrent.y - dragStart.y));
  }
}

function showViews(): void {
  if (state.active === null) return;
  const entry = state.history[state.active];
  maskView.src = `data:image/png;base64,${entry.maskPng}`;
  // grayscale matte shown exactly as decoded, no client-side rescaling
  matteView.src = `data:image/png;base64,${entry.mattePng}`;
  const url = compositeUrl(API_BASE, state);
  if (url) compositeView.src = url;
}

function showHistory(): void {
  historyList.replaceChildren();
  state.history.forEach((entry, index) => {
    const item = document.createElement("li");
    const thumb = document.createElement("img");
    thumb.src = `data:image/png;base64,${entry.mattePng}`;
    thumb.className = "thumb";
    const label = document.createElement("span");
    label.textContent =
      `#${entry.result} · candidate ${entry.candidateId} · ` +
      `${entry.timingMs.toFixed(0)} ms`;
    item.append(thumb, label);
    item.classList.toggle("active", index === state.active);
    item.onclick = () => { state.active = index; showViews(); showHistory(); };
    historyList.append(item);
  });
}

function showError(): void {
  banner.textContent = state.error ?? "";
  banner.hidden = state.error === null;
}

function send(request: PromptRequest): void {
  if (!state.session) return;
  const now = submitPrompt(state, request);
  if (now === null) {
    hint.textContent = "queued…";
    return;
  }
  void dispatch(now);
}

async function dispatch(request: PromptRequest): Promise<void> {
  if (!state.session) return;
  try {
    const response = await client.matte(state.session.id, request);
    renderResult(state, request, response);
    showViews();
    showHistory();
  } catch (err) {
    renderError(state, err instanceof ServiceError
      ? err.message : `request failed: ${err}`);
  }
  showError();
  const next = completeRequest(state);
  hint.textContent = "";
  if (next) void dispatch(next);
}

canvas.addEventListener("mousedown", (ev) => {
  if (!state.session || state.mode !== "box") return;
  dragStart = { x: ev.offsetX, y: ev.offsetY };
  dragCurrent = dragStart;
});

canvas.addEventListener("mousemove", (ev) => {
  if (!dragStart) return;
  dragCurrent = { x: ev.offsetX, y: ev.offsetY };
  drawCanvas();
});

canvas.addEventListener("mouseup", (ev) => {
  if (!state.session) return;
  const image = { width: state.session.width, height: state.session.height };
  const policy = (el<HTMLSelectElement>("policy-select").value || undefined) as
    PromptRequest["policy"];
  let request: PromptRequest | null;
  if (state.mode === "box" && dragStart) {
    request = buildPromptRequest(
      { start: dragStart, end: { x: ev.offsetX, y: ev.offsetY } },
      state.view, image, policy);
    if (request === null) hint.textContent = "zero-area box: drag a region";
  } else {
    request = buildPromptRequest({ x: ev.offsetX, y: ev.offsetY },
                                 state.view, image, policy);
  }
  dragStart = dragCurrent = null;
  drawCanvas();
  if (request) send(request);
});

canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  const factor = ev.deltaY < 0 ? 1.25 : 0.8;
  const pivot = { x: ev.offsetX, y: ev.offsetY };
  state.view = {
    zoom: state.view.zoom * factor,
    panX: pivot.x - (pivot.x - state.view.panX) * factor,
    panY: pivot.y - (pivot.y - state.view.panY) * factor,
  };
  drawCanvas();
});

el<HTMLInputElement>("file-input").addEventListener("change", async (ev) => {
  const file = (ev.target as HTMLInputElement).files?.[0];
  if (!file) return;
  try {
    const meta = await client.createSession(file, file.name.replace(/\.[^.]*$/, ""));
    Object.assign(state, beginSession(state, meta));
    sourceImage = new Image();
    sourceImage.onload = () => { fitView(); drawCanvas(); };
    sourceImage.src = URL.createObjectURL(file);
    overlaySource.src = sourceImage.src;
    historyList.replaceChildren();
    hint.textContent =
      `${meta.width}x${meta.height}, ${meta.n_candidates} candidates ` +
      `(${meta.candidate_source})`;
  } catch (err) {
    renderError(state, `upload failed: ${err}`);
  }
  showError();
});

for (const mode of ["box", "point"] as const) {
  el<HTMLInputElement>(`mode-${mode}`).addEventListener("change", () => {
    state.mode = mode;
  });
}

el<HTMLSelectElement>("bg-select").addEventListener("change", (ev) => {
  const choice = (ev.target as HTMLSelectElement).value as BackgroundKind;
  if (setBackground(state, choice)) {
    showViews(); // re-requests the composite for the active result
  }
});

void client.health().then((ok) => {
  hint.textContent = ok ? "service ready: load an image"
    : `service unreachable at ${API_BASE}`;
});
