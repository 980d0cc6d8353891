/** Thin fetch wrapper over the matting service API. */

import type {
  ApiError, CandidatePreview, MatteResponse, PromptRequest, SessionMeta,
} from "./api-types.js";

export class ServiceError extends Error {
  constructor(readonly status: number, readonly detail: ApiError) {
    super(detail.field ? `${detail.field}: ${detail.error}` : detail.error);
  }
}

async function parseError(response: Response): Promise<ServiceError> {
  let detail: ApiError = { error: `HTTP ${response.status}` };
  try {
    detail = (await response.json()) as ApiError;
  } catch {
    // non-JSON error body; keep the status-only message
  }
  return new ServiceError(response.status, detail);
}

export class MatteClient {
  constructor(readonly base: string) {}

  async health(): Promise<boolean> {
    try {
      const r = await fetch(`${this.base}/v1/health`);
      return r.ok;
    } catch {
      return false;
    }
  }

  async createSession(png: Blob | ArrayBuffer | Uint8Array,
                      stem?: string): Promise<SessionMeta> {
    const url = stem
      ? `${this.base}/v1/sessions?stem=${encodeURIComponent(stem)}`
      : `${this.base}/v1/sessions`;
    const r = await fetch(url, { method: "POST", body: png as BodyInit });
    if (r.status !== 201) {
      throw await parseError(r);
    }
    return (await r.json()) as SessionMeta;
  }

  async candidates(sessionId: string): Promise<CandidatePreview[]> {
    const r = await fetch(`${this.base}/v1/sessions/${sessionId}/candidates`);
    if (!r.ok) {
      throw await parseError(r);
    }
    return ((await r.json()) as { candidates: CandidatePreview[] }).candidates;
  }

  async matte(sessionId: string,
              request: PromptRequest): Promise<MatteResponse> {
    const r = await fetch(`${this.base}/v1/sessions/${sessionId}/matte`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    if (!r.ok) {
      throw await parseError(r);
    }
    return (await r.json()) as MatteResponse;
  }

  async composite(url: string): Promise<Blob> {
    const r = await fetch(url);
    if (!r.ok) {
      throw await parseError(r);
    }
    return await r.blob();
  }
}
