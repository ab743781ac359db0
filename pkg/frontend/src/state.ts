/**
 * View state and its pure update functions.
 *
 * Gauges, pose readout, and the slice always derive from `lastResponse`,
 * the latest completed server response; nothing in the UI recomputes a
 * proximity value client-side. A server error grays the gauges but keeps
 * the last good slice on screen.
 */

import { Capture, StepResponse } from "./protocol.js";

export type Connection = "idle" | "connecting" | "connected" | "error";

export interface HistoryPoint {
  oracle: number | null;
  model: number | null;
}

export interface ViewState {
  connection: Connection;
  errorMessage: string | null;
  lastResponse: StepResponse | null;
  /** oracle/model trans_mm per completed step, oldest first */
  transHistory: HistoryPoint[];
  captures: Capture[];
  maskOverlay: boolean;
  staleGauges: boolean;
  stepTransMm: number;
  stepRotRad: number;
  rendered: number;
}

export const HISTORY_LIMIT = 300;

export function initialState(): ViewState {
  return {
    connection: "idle",
    errorMessage: null,
    lastResponse: null,
    transHistory: [],
    captures: [],
    maskOverlay: true,
    staleGauges: false,
    stepTransMm: 2.0,
    stepRotRad: 0.05,
    rendered: 0,
  };
}

export function applyConnecting(s: ViewState): ViewState {
  return { ...s, connection: "connecting", errorMessage: null };
}

export function applyConnected(s: ViewState, first: StepResponse): ViewState {
  return {
    ...s,
    connection: "connected",
    errorMessage: null,
    lastResponse: first,
    transHistory: [],
    captures: [],
    staleGauges: false,
    rendered: s.rendered + 1,
  };
}

export function applyConnectionError(s: ViewState, message: string): ViewState {
  return { ...s, connection: "error", errorMessage: message };
}

/** A completed step response becomes the single source for every readout. */
export function applyStep(s: ViewState, r: StepResponse): ViewState {
  const point: HistoryPoint = {
    oracle: r.oracle ? r.oracle.trans_mm : null,
    model: r.model.trans_mm,
  };
  const transHistory = [...s.transHistory, point].slice(-HISTORY_LIMIT);
  return {
    ...s,
    lastResponse: r,
    transHistory,
    staleGauges: false,
    errorMessage: null,
    rendered: s.rendered + 1,
  };
}

/** Step failure: keep the last good slice, gray the gauges. */
export function applyStepError(s: ViewState, message: string): ViewState {
  return { ...s, staleGauges: true, errorMessage: message };
}

export function applyCapture(s: ViewState, c: Capture): ViewState {
  return { ...s, captures: [...s.captures, c] };
}

export function toggleMask(s: ViewState): ViewState {
  return { ...s, maskOverlay: !s.maskOverlay };
}

export function setStepSizes(s: ViewState, transMm: number, rotRad: number): ViewState {
  return { ...s, stepTransMm: transMm, stepRotRad: rotRad };
}
