/**
 * Message schema shared with the navigation service.
 *
 * Every message carries a protocol version field "v". Parsing copies the
 * known fields and ignores everything else, so servers may add fields
 * without breaking this client. Nothing here computes proximity: the UI
 * only ever displays numbers taken verbatim from a server response.
 */

export const PROTOCOL_VERSION = 1;

export type Vec3 = [number, number, number];

export interface Pose {
  t_mm: Vec3;
  rotvec_rad: Vec3;
}

export interface Proximity {
  trans_mm: number;
  rot_deg: number;
}

export interface ModelReading {
  brain_prob: number | null;
  has_pose: boolean;
  trans_mm: number | null;
  rot_deg: number | null;
  note?: string;
}

export interface StepResponse {
  v: number;
  seq?: number;
  session_id: string;
  volume_id: string;
  fold: number;
  pose: Pose;
  oracle: Proximity | null;
  model: ModelReading;
  warnings: string[];
  slice_png_b64: string;
  mask_png_b64: string | null;
  index?: number;
}

export interface ErrorReply {
  v: number;
  seq?: number;
  error: string;
}

export interface Delta {
  dt_mm: Vec3;
  dr_rad: Vec3;
}

export interface Capture {
  index: number;
  at_step: number;
  pose: Pose;
  oracle: Proximity | null;
  model: ModelReading;
  score: number | string | null;
  slice_png_b64: string;
}

export const ZERO_DELTA: Delta = { dt_mm: [0, 0, 0], dr_rad: [0, 0, 0] };

export function addDeltas(a: Delta, b: Delta): Delta {
  const add = (x: Vec3, y: Vec3): Vec3 => [x[0] + y[0], x[1] + y[1], x[2] + y[2]];
  return { dt_mm: add(a.dt_mm, b.dt_mm), dr_rad: add(a.dr_rad, b.dr_rad) };
}

export function isZeroDelta(d: Delta): boolean {
  return d.dt_mm.every((x) => x === 0) && d.dr_rad.every((x) => x === 0);
}

function asVec3(value: unknown): Vec3 | null {
  if (!Array.isArray(value) || value.length !== 3) return null;
  const [a, b, c] = value;
  if (typeof a !== "number" || typeof b !== "number" || typeof c !== "number") return null;
  return [a, b, c];
}

function asPose(value: unknown): Pose | null {
  if (typeof value !== "object" || value === null) return null;
  const t = asVec3((value as Record<string, unknown>)["t_mm"]);
  const r = asVec3((value as Record<string, unknown>)["rotvec_rad"]);
  return t && r ? { t_mm: t, rotvec_rad: r } : null;
}

function asProximity(value: unknown): Proximity | null {
  if (typeof value !== "object" || value === null) return null;
  const o = value as Record<string, unknown>;
  if (typeof o["trans_mm"] !== "number" || typeof o["rot_deg"] !== "number") return null;
  return { trans_mm: o["trans_mm"], rot_deg: o["rot_deg"] };
}

function asModelReading(value: unknown): ModelReading {
  const fallback: ModelReading = {
    brain_prob: null,
    has_pose: false,
    trans_mm: null,
    rot_deg: null,
  };
  if (typeof value !== "object" || value === null) return fallback;
  const o = value as Record<string, unknown>;
  return {
    brain_prob: typeof o["brain_prob"] === "number" ? o["brain_prob"] : null,
    has_pose: o["has_pose"] === true,
    trans_mm: typeof o["trans_mm"] === "number" ? o["trans_mm"] : null,
    rot_deg: typeof o["rot_deg"] === "number" ? o["rot_deg"] : null,
    ...(typeof o["note"] === "string" ? { note: o["note"] } : {}),
  };
}

/** Narrow a raw server message to a step response or an error reply. */
export function parseStepMessage(raw: unknown): StepResponse | ErrorReply {
  if (typeof raw !== "object" || raw === null) {
    return { v: PROTOCOL_VERSION, error: "malformed message" };
  }
  const o = raw as Record<string, unknown>;
  const v = typeof o["v"] === "number" ? o["v"] : -1;
  const seq = typeof o["seq"] === "number" ? { seq: o["seq"] } : {};
  if (typeof o["error"] === "string") return { v, ...seq, error: o["error"] };
  if (v !== PROTOCOL_VERSION) return { v, ...seq, error: `unsupported protocol version ${v}` };

  const pose = asPose(o["pose"]);
  if (!pose || typeof o["slice_png_b64"] !== "string") {
    return { v, ...seq, error: "malformed step response" };
  }
  return {
    v,
    ...seq,
    session_id: typeof o["session_id"] === "string" ? o["session_id"] : "",
    volume_id: typeof o["volume_id"] === "string" ? o["volume_id"] : "",
    fold: typeof o["fold"] === "number" ? o["fold"] : 0,
    pose,
    oracle: asProximity(o["oracle"]),
    model: asModelReading(o["model"]),
    warnings: Array.isArray(o["warnings"])
      ? o["warnings"].filter((w): w is string => typeof w === "string")
      : [],
    slice_png_b64: o["slice_png_b64"],
    mask_png_b64: typeof o["mask_png_b64"] === "string" ? o["mask_png_b64"] : null,
    ...(typeof o["index"] === "number" ? { index: o["index"] } : {}),
  };
}

export function isErrorReply(m: StepResponse | ErrorReply): m is ErrorReply {
  return "error" in m;
}
