/**
 * Step scheduling: at most one request in flight, newer inputs coalesce.
 *
 * While a step request is outstanding, further inputs accumulate into one
 * pending delta instead of queueing per keystroke. A response renders only
 * when it answers the newest request AND nothing is pending behind it;
 * otherwise it is stale and dropped, and the pending delta goes out as the
 * next request. A burst of N inputs therefore produces exactly one rendered
 * final state: the reply to the last coalesced request.
 */

import { addDeltas, Delta, ErrorReply, isErrorReply, StepResponse } from "./protocol.js";

export type StepSender = (delta: Delta, seq: number) => Promise<StepResponse | ErrorReply>;

export interface CoalescerHooks {
  onRender: (response: StepResponse) => void;
  onError?: (message: string) => void;
}

export class StepCoalescer {
  private pending: Delta | null = null;
  private inFlight = false;
  private seq = 0;
  private idleResolvers: (() => void)[] = [];

  constructor(
    private readonly send: StepSender,
    private readonly hooks: CoalescerHooks,
  ) {}

  /** Queue one input. Sends immediately when the line is free. */
  push(delta: Delta): void {
    if (this.inFlight) {
      this.pending = this.pending ? addDeltas(this.pending, delta) : delta;
      return;
    }
    void this.dispatch(delta);
  }

  /** Resolves once no request is in flight and nothing is pending. */
  idle(): Promise<void> {
    if (!this.inFlight && this.pending === null) return Promise.resolve();
    return new Promise((resolve) => this.idleResolvers.push(resolve));
  }

  get sentCount(): number {
    return this.seq;
  }

  private async dispatch(delta: Delta): Promise<void> {
    this.inFlight = true;
    const seq = ++this.seq;
    let response: StepResponse | ErrorReply | null = null;
    let failure: string | null = null;
    try {
      response = await this.send(delta, seq);
    } catch (err) {
      failure = err instanceof Error ? err.message : String(err);
    }
    this.inFlight = false;

    if (failure !== null) {
      this.hooks.onError?.(failure);
    } else if (response !== null && isErrorReply(response)) {
      this.hooks.onError?.(response.error);
    } else if (response !== null && seq === this.seq && this.pending === null) {
      this.hooks.onRender(response);
    } // else: superseded by newer input, discard

    if (this.pending !== null) {
      const next = this.pending;
      this.pending = null;
      void this.dispatch(next);
      return;
    }
    for (const resolve of this.idleResolvers.splice(0)) resolve();
  }
}
