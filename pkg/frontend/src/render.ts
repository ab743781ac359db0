/**
 * DOM painting. Every value shown comes from the ViewState, whose
 * readouts are copied verbatim from server responses.
 */

import { Capture, StepResponse } from "./protocol.js";
import { HistoryPoint, ViewState } from "./state.js";

export interface Elements {
  status: HTMLElement;
  errorBanner: HTMLElement;
  errorText: HTMLElement;
  slice: HTMLCanvasElement;
  warnings: HTMLElement;
  gauges: HTMLElement;
  modelTrans: HTMLElement;
  modelTransBar: HTMLElement;
  modelRot: HTMLElement;
  modelRotBar: HTMLElement;
  oracleTrans: HTMLElement;
  oracleTransBar: HTMLElement;
  oracleRot: HTMLElement;
  oracleRotBar: HTMLElement;
  brainProb: HTMLElement;
  poseReadout: HTMLElement;
  sparkline: HTMLCanvasElement;
  captures: HTMLElement;
  stepTransVal: HTMLElement;
  stepRotVal: HTMLElement;
}

const TRANS_FULL_MM = 40; // gauge bar saturates here
const ROT_FULL_DEG = 90;

function fmt(x: number | null | undefined, digits = 1): string {
  return x === null || x === undefined || Number.isNaN(x) ? "--" : x.toFixed(digits);
}

function setGauge(valueEl: HTMLElement, barEl: HTMLElement, value: number | null, full: number): void {
  valueEl.textContent = fmt(value);
  const frac = value === null ? 0 : Math.max(0, Math.min(1, 1 - value / full));
  barEl.style.width = `${(frac * 100).toFixed(1)}%`;
}

const sliceCache = new Map<string, HTMLImageElement>();

function loadImage(b64: string): Promise<HTMLImageElement> {
  const cached = sliceCache.get(b64);
  if (cached) return Promise.resolve(cached);
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => {
      sliceCache.clear(); // keep only the most recent decode
      sliceCache.set(b64, img);
      resolve(img);
    };
    img.onerror = () => reject(new Error("slice decode failed"));
    img.src = `data:image/png;base64,${b64}`;
  });
}

function tintMask(mask: HTMLImageElement): HTMLCanvasElement {
  const off = document.createElement("canvas");
  off.width = mask.width;
  off.height = mask.height;
  const ctx = off.getContext("2d");
  if (!ctx) return off;
  ctx.drawImage(mask, 0, 0);
  const data = ctx.getImageData(0, 0, off.width, off.height);
  const px = data.data;
  for (let i = 0; i < px.length; i += 4) {
    const lum = px[i] ?? 0;
    px[i] = 80;
    px[i + 1] = 220;
    px[i + 2] = 120;
    px[i + 3] = lum > 127 ? 90 : 0;
  }
  ctx.putImageData(data, 0, 0);
  return off;
}

let drawToken = 0;

export async function drawSlice(
  canvas: HTMLCanvasElement,
  response: StepResponse,
  maskOverlay: boolean,
): Promise<void> {
  const token = ++drawToken;
  const slice = await loadImage(response.slice_png_b64);
  const mask =
    maskOverlay && response.mask_png_b64 ? await loadImage(response.mask_png_b64) : null;
  if (token !== drawToken) return; // a newer draw superseded this one
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(slice, 0, 0, canvas.width, canvas.height);
  if (mask) ctx.drawImage(tintMask(mask), 0, 0, canvas.width, canvas.height);
}

function drawSparkline(canvas: HTMLCanvasElement, history: HistoryPoint[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  if (history.length < 2) return;
  const values = history.flatMap((p) => [p.oracle, p.model]).filter((x): x is number => x !== null);
  if (values.length === 0) return;
  const max = Math.max(...values, 1e-6);
  const x = (i: number) => (i / (history.length - 1)) * (w - 2) + 1;
  const y = (v: number) => h - 2 - (v / max) * (h - 4);
  const trace = (pick: (p: HistoryPoint) => number | null, style: string) => {
    ctx.strokeStyle = style;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    let started = false;
    history.forEach((p, i) => {
      const v = pick(p);
      if (v === null) {
        started = false;
        return;
      }
      if (!started) {
        ctx.moveTo(x(i), y(v));
        started = true;
      } else {
        ctx.lineTo(x(i), y(v));
      }
    });
    ctx.stroke();
  };
  trace((p) => p.oracle, "#3a86ff");
  trace((p) => p.model, "#fb8500");
}

function captureCard(c: Capture): HTMLElement {
  const card = document.createElement("div");
  card.className = "capture";
  const img = document.createElement("img");
  img.src = `data:image/png;base64,${c.slice_png_b64}`;
  img.alt = `capture ${c.index}`;
  const label = document.createElement("div");
  const score = c.score === null || c.score === undefined ? "unscored" : `score ${c.score}`;
  const oracle = c.oracle ? `${c.oracle.trans_mm.toFixed(1)} mm` : "--";
  label.textContent = `#${c.index} at step ${c.at_step}, ${score}, oracle ${oracle}`;
  card.append(img, label);
  return card;
}

export function render(state: ViewState, els: Elements): void {
  els.status.dataset["state"] = state.connection;
  els.status.textContent =
    state.connection === "connected"
      ? `connected: ${state.lastResponse?.volume_id ?? ""} fold ${state.lastResponse?.fold ?? 0}`
      : state.connection;

  const showBanner = state.connection === "error";
  els.errorBanner.hidden = !showBanner;
  if (showBanner) els.errorText.textContent = state.errorMessage ?? "connection failed";

  els.gauges.classList.toggle("stale", state.staleGauges);

  const r = state.lastResponse;
  if (r) {
    void drawSlice(els.slice, r, state.maskOverlay);
    setGauge(els.modelTrans, els.modelTransBar, r.model.trans_mm, TRANS_FULL_MM);
    setGauge(els.modelRot, els.modelRotBar, r.model.rot_deg, ROT_FULL_DEG);
    setGauge(els.oracleTrans, els.oracleTransBar, r.oracle?.trans_mm ?? null, TRANS_FULL_MM);
    setGauge(els.oracleRot, els.oracleRotBar, r.oracle?.rot_deg ?? null, ROT_FULL_DEG);
    els.brainProb.textContent =
      r.model.brain_prob === null
        ? "--"
        : `${(r.model.brain_prob * 100).toFixed(0)}%${r.model.has_pose ? "" : " (no pose)"}`;
    const t = r.pose.t_mm.map((x) => x.toFixed(1)).join(", ");
    const rv = r.pose.rotvec_rad.map((x) => x.toFixed(3)).join(", ");
    els.poseReadout.textContent = `t = [${t}] mm   r = [${rv}] rad`;
    els.warnings.textContent = r.warnings.join(", ");
  }

  drawSparkline(els.sparkline, state.transHistory);

  els.captures.replaceChildren(...state.captures.map(captureCard));
  els.stepTransVal.textContent = `${state.stepTransMm.toFixed(1)} mm`;
  els.stepRotVal.textContent = `${state.stepRotRad.toFixed(3)} rad`;
}
