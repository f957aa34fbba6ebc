/** Typed client for the /v1 annotation HTTP API. */

export type StrokeKind =
  | "point"
  | "center_scribble"
  | "line_scribble"
  | "bezier_scribble"
  | "freehand";

export type Polarity = "positive" | "negative";

/** Wire format shared with the server: points are [row, col] pairs. */
export interface Stroke {
  kind: StrokeKind;
  polarity: Polarity;
  width: number;
  points: [number, number][];
}

export interface SessionInfo {
  id: string;
  height: number;
  width: number;
}

export interface PromptResponse {
  /** base64-encoded PNG of the refined binary mask */
  mask: string;
  round: number;
  dice?: number;
}

export interface InstantiateResponse {
  mask: string;
  round: number;
  attributes: {
    group_id: number;
    length_px: number;
    mean_width_px: number;
    segment_count: number;
  };
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseOrThrow<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class AnnotationClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}/v1${path}`;
  }

  /** Upload a PNG image; returns the new session. */
  async createSession(png: ArrayBuffer | Uint8Array | Blob): Promise<SessionInfo> {
    const resp = await this.fetchImpl(this.url("/sessions"), {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png as BodyInit,
    });
    return parseOrThrow<SessionInfo>(resp);
  }

  /** Optional label mask upload; later responses then include Dice. */
  async registerGroundTruth(
    sessionId: string,
    png: ArrayBuffer | Uint8Array | Blob,
  ): Promise<void> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}/ground_truth`), {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png as BodyInit,
    });
    await parseOrThrow<{ ok: boolean }>(resp);
  }

  /** Submit one round of strokes; the server runs one refinement step. */
  async sendPrompts(sessionId: string, strokes: Stroke[]): Promise<PromptResponse> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}/prompts`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ strokes }),
    });
    return parseOrThrow<PromptResponse>(resp);
  }

  /** Drop the latest round server-side; returns the restored round. */
  async undo(sessionId: string): Promise<{ round: number; mask?: string }> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}/undo`), {
      method: "POST",
    });
    return parseOrThrow<{ round: number; mask?: string }>(resp);
  }

  /** Instance mode: one stroke selects a single road from the prediction. */
  async instantiate(sessionId: string, stroke: Stroke): Promise<InstantiateResponse> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}/instantiate`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ stroke }),
    });
    return parseOrThrow<InstantiateResponse>(resp);
  }

  /** Current mask as raw PNG bytes. */
  async exportMask(sessionId: string): Promise<ArrayBuffer> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}/export`));
    if (!resp.ok) throw new ApiError(resp.status, resp.statusText);
    return resp.arrayBuffer();
  }

  async deleteSession(sessionId: string): Promise<void> {
    const resp = await this.fetchImpl(this.url(`/sessions/${sessionId}`), {
      method: "DELETE",
    });
    await parseOrThrow<{ ok: boolean }>(resp);
  }
}
