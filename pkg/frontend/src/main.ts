/** Application wiring: connect, steer, freeze, export. */

import { ApiClient } from "./api.js";
import { StepCoalescer } from "./coalescer.js";
import { deltaForKey } from "./keyboard.js";
import { Capture, StepResponse } from "./protocol.js";
import { Elements, render } from "./render.js";
import { StepSocket } from "./socket.js";
import {
  applyCapture,
  applyConnected,
  applyConnecting,
  applyConnectionError,
  applyStep,
  applyStepError,
  initialState,
  setStepSizes,
  toggleMask,
  ViewState,
} from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const els: Elements = {
  status: el("status"),
  errorBanner: el("error-banner"),
  errorText: el("error-text"),
  slice: el<HTMLCanvasElement>("slice-canvas"),
  warnings: el("warnings"),
  gauges: el("gauges"),
  modelTrans: el("model-trans"),
  modelTransBar: el("model-trans-bar"),
  modelRot: el("model-rot"),
  modelRotBar: el("model-rot-bar"),
  oracleTrans: el("oracle-trans"),
  oracleTransBar: el("oracle-trans-bar"),
  oracleRot: el("oracle-rot"),
  oracleRotBar: el("oracle-rot-bar"),
  brainProb: el("brain-prob"),
  poseReadout: el("pose-readout"),
  sparkline: el<HTMLCanvasElement>("sparkline"),
  captures: el("captures"),
  stepTransVal: el("step-trans-val"),
  stepRotVal: el("step-rot-val"),
};

const volumeSelect = el<HTMLSelectElement>("volume-select");
const serverInput = el<HTMLInputElement>("server-input");
const scoreInput = el<HTMLInputElement>("score-input");
const stepTransSlider = el<HTMLInputElement>("step-trans");
const stepRotSlider = el<HTMLInputElement>("step-rot");

let state: ViewState = initialState();
let api: ApiClient | null = null;
let socket: StepSocket | null = null;
let coalescer: StepCoalescer | null = null;
let sessionId: string | null = null;

function paint(): void {
  render(state, els);
}

function update(next: ViewState): void {
  state = next;
  paint();
}

// served under the service's /ui mount by default; same origin then applies
serverInput.value = location.protocol.startsWith("http") ? location.origin : "http://127.0.0.1:8000";

async function connect(): Promise<void> {
  update(applyConnecting(state));
  socket?.close();
  socket = null;
  coalescer = null;
  try {
    api = new ApiClient(serverInput.value.replace(/\/+$/, ""));
    const volumes = await api.listVolumes();
    if (volumes.length === 0) throw new Error("server lists no volumes");
    const known = new Set(volumes.map((v) => v.volume_id));
    if (volumeSelect.options.length !== volumes.length || !known.has(volumeSelect.value)) {
      volumeSelect.replaceChildren(
        ...volumes.map((v) => new Option(v.volume_id, v.volume_id)),
      );
    }
    const first: StepResponse = await api.createSession(volumeSelect.value, 0);
    sessionId = first.session_id;
    socket = await StepSocket.connect(api.stepSocketUrl(sessionId));
    coalescer = new StepCoalescer((delta, seq) => socket!.send(delta, seq), {
      onRender: (r) => update(applyStep(state, r)),
      onError: (message) => update(applyStepError(state, message)),
    });
    update(applyConnected(state, first));
  } catch (err) {
    update(applyConnectionError(state, err instanceof Error ? err.message : String(err)));
  }
}

el("connect-btn").addEventListener("click", () => void connect());
el("retry-btn").addEventListener("click", () => void connect());
volumeSelect.addEventListener("change", () => void connect());

window.addEventListener("keydown", (ev) => {
  if (ev.target instanceof HTMLInputElement || ev.target instanceof HTMLSelectElement) return;
  const delta = deltaForKey(ev.key, state.stepTransMm, state.stepRotRad);
  if (!delta || !coalescer) return;
  ev.preventDefault();
  coalescer.push(delta);
});

el("mask-toggle").addEventListener("change", () => update(toggleMask(state)));

const syncStepSizes = () =>
  update(setStepSizes(state, Number(stepTransSlider.value), Number(stepRotSlider.value)));
stepTransSlider.addEventListener("input", syncStepSizes);
stepRotSlider.addEventListener("input", syncStepSizes);

el("freeze-btn").addEventListener("click", () => {
  if (!api || !sessionId) return;
  const raw = scoreInput.value.trim();
  const score = raw === "" ? null : Number(raw);
  void api
    .freeze(sessionId, Number.isFinite(score as number) ? score : null)
    .then((c: Capture) => update(applyCapture(state, c)))
    .catch((err) => update(applyStepError(state, `freeze failed: ${err}`)));
});

el("export-btn").addEventListener("click", () => {
  if (!api || !sessionId) return;
  void api
    .fetchExport(sessionId)
    .then((text) => {
      const blob = new Blob([text], { type: "application/x-ndjson" });
      const a = document.createElement("a");
      a.href = URL.createObjectURL(blob);
      a.download = `${sessionId}_export.jsonl`;
      a.click();
      URL.revokeObjectURL(a.href);
    })
    .catch((err) => update(applyStepError(state, `export failed: ${err}`)));
});

paint();
void connect();
