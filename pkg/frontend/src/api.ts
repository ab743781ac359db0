/** REST client for session management, freezing, and export. */

import {
  Capture,
  ErrorReply,
  parseStepMessage,
  PROTOCOL_VERSION,
  StepResponse,
} from "./protocol.js";

export interface VolumeInfo {
  volume_id: string;
  has_annotation: boolean;
}

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status?: number,
  ) {
    super(message);
  }
}

async function requestJson(url: string, init?: RequestInit): Promise<unknown> {
  let resp: Response;
  try {
    resp = await fetch(url, init);
  } catch (err) {
    throw new ApiError(`server unreachable: ${err instanceof Error ? err.message : err}`);
  }
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // keep the status code
    }
    throw new ApiError(detail, resp.status);
  }
  return resp.json();
}

export class ApiClient {
  constructor(readonly base: string) {}

  async listVolumes(): Promise<VolumeInfo[]> {
    const body = (await requestJson(`${this.base}/v1/volumes`)) as {
      volumes?: VolumeInfo[];
    };
    return body.volumes ?? [];
  }

  async createSession(volumeId: string, fold = 0): Promise<StepResponse> {
    const raw = await requestJson(`${this.base}/v1/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ v: PROTOCOL_VERSION, volume_id: volumeId, fold }),
    });
    const parsed: StepResponse | ErrorReply = parseStepMessage(raw);
    if ("error" in parsed) throw new ApiError(parsed.error);
    return parsed;
  }

  async deleteSession(sessionId: string): Promise<void> {
    await requestJson(`${this.base}/v1/sessions/${sessionId}`, { method: "DELETE" });
  }

  async freeze(sessionId: string, score: number | null): Promise<Capture> {
    const body = (await requestJson(`${this.base}/v1/sessions/${sessionId}/freeze`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ v: PROTOCOL_VERSION, score }),
    })) as { capture?: Capture };
    if (!body.capture) throw new ApiError("freeze returned no capture");
    return body.capture;
  }

  exportUrl(sessionId: string): string {
    return `${this.base}/v1/sessions/${sessionId}/export`;
  }

  async fetchExport(sessionId: string): Promise<string> {
    let resp: Response;
    try {
      resp = await fetch(this.exportUrl(sessionId));
    } catch (err) {
      throw new ApiError(`server unreachable: ${err instanceof Error ? err.message : err}`);
    }
    if (!resp.ok) throw new ApiError(`export failed: ${resp.status}`, resp.status);
    return resp.text();
  }

  stepSocketUrl(sessionId: string): string {
    const ws = this.base.replace(/^http/, "ws");
    return `${ws}/v1/sessions/${sessionId}/step`;
  }
}
