/**
 * Stepping socket: one persistent websocket, replies correlated by seq.
 *
 * The server echoes the seq of each request, so concurrent callers can
 * await their own reply. A closed socket rejects everything outstanding.
 */

import { Delta, ErrorReply, parseStepMessage, PROTOCOL_VERSION, StepResponse } from "./protocol.js";

type Resolver = (m: StepResponse | ErrorReply) => void;

export class StepSocket {
  private waiting = new Map<number, { resolve: Resolver; reject: (e: Error) => void }>();

  private constructor(private readonly ws: WebSocket) {
    ws.onmessage = (ev) => {
      let raw: unknown;
      try {
        raw = JSON.parse(typeof ev.data === "string" ? ev.data : "");
      } catch {
        return;
      }
      const msg = parseStepMessage(raw);
      const seq = msg.seq;
      if (seq === undefined) return;
      const waiter = this.waiting.get(seq);
      if (waiter) {
        this.waiting.delete(seq);
        waiter.resolve(msg);
      }
    };
    const failAll = (why: string) => {
      for (const { reject } of this.waiting.values()) reject(new Error(why));
      this.waiting.clear();
    };
    ws.onclose = () => failAll("socket closed");
    ws.onerror = () => failAll("socket error");
  }

  static connect(url: string): Promise<StepSocket> {
    return new Promise((resolve, reject) => {
      const ws = new WebSocket(url);
      ws.onopen = () => resolve(new StepSocket(ws));
      ws.onerror = () => reject(new Error(`cannot open step socket at ${url}`));
    });
  }

  send(delta: Delta, seq: number): Promise<StepResponse | ErrorReply> {
    if (this.ws.readyState !== WebSocket.OPEN) {
      return Promise.reject(new Error("socket not open"));
    }
    return new Promise((resolve, reject) => {
      this.waiting.set(seq, { resolve, reject });
      this.ws.send(
        JSON.stringify({ v: PROTOCOL_VERSION, dt_mm: delta.dt_mm, dr_rad: delta.dr_rad, seq }),
      );
    });
  }

  close(): void {
    this.ws.close();
  }
}
