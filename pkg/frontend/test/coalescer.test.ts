import { describe, expect, it } from "vitest";

import { StepCoalescer } from "../src/coalescer.js";
import { Delta, ErrorReply, StepResponse } from "../src/protocol.js";

function fakeResponse(seq: number, label: string): StepResponse {
  return {
    v: 1,
    seq,
    session_id: "s",
    volume_id: label,
    fold: 0,
    pose: { t_mm: [0, 0, 0], rotvec_rad: [0, 0, 0] },
    oracle: { trans_mm: seq, rot_deg: 0 },
    model: { brain_prob: 0.9, has_pose: true, trans_mm: seq, rot_deg: 0 },
    warnings: [],
    slice_png_b64: label,
    mask_png_b64: null,
  };
}

interface Sent {
  delta: Delta;
  seq: number;
  resolve: (r: StepResponse | ErrorReply) => void;
}

/** Transport stub that lets the test decide when each reply arrives. */
function manualTransport() {
  const sent: Sent[] = [];
  const send = (delta: Delta, seq: number) =>
    new Promise<StepResponse | ErrorReply>((resolve) => {
      sent.push({ delta, seq, resolve });
    });
  return { sent, send };
}

const unit: Delta = { dt_mm: [1, 0, 0], dr_rad: [0, 0, 0] };

describe("StepCoalescer", () => {
  it("keeps at most one request in flight and coalesces a burst", async () => {
    const { sent, send } = manualTransport();
    const rendered: StepResponse[] = [];
    const c = new StepCoalescer(send, { onRender: (r) => rendered.push(r) });

    for (let i = 0; i < 10; i++) c.push(unit);
    // only the first input went out; the other nine are coalescing
    expect(sent.length).toBe(1);

    sent[0]!.resolve(fakeResponse(1, "first"));
    await Promise.resolve();
    await Promise.resolve();
    // the reply was stale (nine inputs pending), so nothing rendered yet
    expect(rendered.length).toBe(0);
    expect(sent.length).toBe(2);
    // the second request carries the nine coalesced inputs as one delta
    expect(sent[1]!.delta.dt_mm).toEqual([9, 0, 0]);

    sent[1]!.resolve(fakeResponse(2, "final"));
    await c.idle();
    // exactly one rendered final state, matching the last server response
    expect(rendered.length).toBe(1);
    expect(rendered[0]!.volume_id).toBe("final");
    expect(c.sentCount).toBe(2);
  });

  it("renders every response when inputs arrive one at a time", async () => {
    const { sent, send } = manualTransport();
    const rendered: StepResponse[] = [];
    const c = new StepCoalescer(send, { onRender: (r) => rendered.push(r) });

    for (let i = 1; i <= 3; i++) {
      c.push(unit);
      sent[i - 1]!.resolve(fakeResponse(i, `r${i}`));
      await c.idle();
    }
    expect(rendered.map((r) => r.volume_id)).toEqual(["r1", "r2", "r3"]);
  });

  it("routes error replies to onError and keeps accepting input", async () => {
    const { sent, send } = manualTransport();
    const rendered: StepResponse[] = [];
    const errors: string[] = [];
    const c = new StepCoalescer(send, {
      onRender: (r) => rendered.push(r),
      onError: (e) => errors.push(e),
    });

    c.push(unit);
    sent[0]!.resolve({ v: 1, seq: 1, error: "boom" });
    await c.idle();
    expect(errors).toEqual(["boom"]);
    expect(rendered.length).toBe(0);

    c.push(unit);
    sent[1]!.resolve(fakeResponse(2, "after-error"));
    await c.idle();
    expect(rendered.map((r) => r.volume_id)).toEqual(["after-error"]);
  });

  it("survives transport rejections", async () => {
    let calls = 0;
    const send = (_: Delta, seq: number): Promise<StepResponse | ErrorReply> => {
      calls += 1;
      return calls === 1
        ? Promise.reject(new Error("socket closed"))
        : Promise.resolve(fakeResponse(seq, "recovered"));
    };
    const rendered: StepResponse[] = [];
    const errors: string[] = [];
    const c = new StepCoalescer(send, {
      onRender: (r) => rendered.push(r),
      onError: (e) => errors.push(e),
    });
    c.push(unit);
    await c.idle();
    c.push(unit);
    await c.idle();
    expect(errors).toEqual(["socket closed"]);
    expect(rendered.map((r) => r.volume_id)).toEqual(["recovered"]);
  });

  it("flushes inputs that arrived during a failing request", async () => {
    const { sent, send } = manualTransport();
    const rendered: StepResponse[] = [];
    const errors: string[] = [];
    const c = new StepCoalescer(send, {
      onRender: (r) => rendered.push(r),
      onError: (e) => errors.push(e),
    });
    c.push(unit);
    c.push(unit); // pending behind the in-flight request
    sent[0]!.resolve({ v: 1, seq: 1, error: "boom" });
    await Promise.resolve();
    await Promise.resolve();
    expect(sent.length).toBe(2); // pending still went out
    sent[1]!.resolve(fakeResponse(2, "flushed"));
    await c.idle();
    expect(rendered.map((r) => r.volume_id)).toEqual(["flushed"]);
    expect(errors).toEqual(["boom"]);
  });
});
