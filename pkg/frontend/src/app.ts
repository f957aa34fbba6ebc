/** Canvas annotation app: wires the DOM to the API client.
 *
 * Interaction model: load an image to start a session, draw strokes on the
 * canvas (left side of the toolbar picks kind and polarity), then "Refine"
 * submits the pending strokes as one round.  "Instance" mode sends a single
 * stroke to the instance endpoint instead.  Undo drops the latest round on
 * both the client and the server.
 */

import { AnnotationClient, type Stroke, type StrokeKind } from "./api.js";
import { RoundHistory } from "./history.js";
import { blendMask, INSTANCE_OVERLAY, MASK_OVERLAY } from "./overlay.js";
import { makeStroke, type Point } from "./strokes.js";

type Mode = "refine" | "instance";

interface Ui {
  canvas: HTMLCanvasElement;
  kind: HTMLSelectElement;
  polarity: HTMLSelectElement;
  mode: HTMLSelectElement;
  width: HTMLInputElement;
  file: HTMLInputElement;
  refine: HTMLButtonElement;
  undo: HTMLButtonElement;
  exportBtn: HTMLButtonElement;
  status: HTMLElement;
}

function grab(): Ui {
  const byId = <T extends HTMLElement>(id: string): T => {
    const el = document.getElementById(id);
    if (!el) throw new Error(`missing #${id}`);
    return el as T;
  };
  return {
    canvas: byId("canvas"),
    kind: byId("kind"),
    polarity: byId("polarity"),
    mode: byId("mode"),
    width: byId("width"),
    file: byId("file"),
    refine: byId("refine"),
    undo: byId("undo"),
    exportBtn: byId("export"),
    status: byId("status"),
  };
}

async function decodeMaskPng(b64: string): Promise<Uint8Array> {
  const bytes = Uint8Array.from(atob(b64), (c) => c.charCodeAt(0));
  const bitmap = await createImageBitmap(new Blob([bytes], { type: "image/png" }));
  const off = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const mask = new Uint8Array(bitmap.width * bitmap.height);
  for (let i = 0; i < mask.length; i++) mask[i] = data[i * 4] > 127 ? 1 : 0;
  return mask;
}

export class AnnotatorApp {
  private client: AnnotationClient;
  private ui: Ui;
  private sessionId: string | null = null;
  private image: ImageBitmap | null = null;
  private history = new RoundHistory();
  private pending: Stroke[] = [];
  private trail: Point[] = [];
  private drawing = false;
  private instanceMask: Uint8Array | null = null;

  constructor(baseUrl: string) {
    this.client = new AnnotationClient(baseUrl);
    this.ui = grab();
    this.bind();
  }

  private setStatus(msg: string): void {
    this.ui.status.textContent = msg;
  }

  private bind(): void {
    const c = this.ui.canvas;
    c.addEventListener("pointerdown", (e) => {
      if (!this.sessionId) return;
      this.drawing = true;
      this.trail = [this.eventPoint(e)];
    });
    c.addEventListener("pointermove", (e) => {
      if (this.drawing) this.trail.push(this.eventPoint(e));
    });
    c.addEventListener("pointerup", () => void this.finishStroke());
    this.ui.file.addEventListener("change", () => void this.loadFile());
    this.ui.refine.addEventListener("click", () => void this.refine());
    this.ui.undo.addEventListener("click", () => void this.undoRound());
    this.ui.exportBtn.addEventListener("click", () => void this.exportMask());
    this.ui.mode.addEventListener("change", () => {
      this.instanceMask = null;
      void this.render();
    });
  }

  private eventPoint(e: PointerEvent): Point {
    const rect = this.ui.canvas.getBoundingClientRect();
    const col = ((e.clientX - rect.left) / rect.width) * this.ui.canvas.width;
    const row = ((e.clientY - rect.top) / rect.height) * this.ui.canvas.height;
    return [row, col];
  }

  private async loadFile(): Promise<void> {
    const file = this.ui.file.files?.[0];
    if (!file) return;
    const bytes = await file.arrayBuffer();
    const info = await this.client.createSession(bytes);
    this.sessionId = info.id;
    this.history.clear();
    this.pending = [];
    this.instanceMask = null;
    this.image = await createImageBitmap(new Blob([bytes]));
    this.ui.canvas.width = info.width;
    this.ui.canvas.height = info.height;
    await this.render();
    this.setStatus(`session ${info.id}: round 0`);
  }

  private async finishStroke(): Promise<void> {
    if (!this.drawing || !this.sessionId) return;
    this.drawing = false;
    const kind = this.ui.kind.value as StrokeKind;
    const polarity = this.ui.polarity.value as "positive" | "negative";
    const width = Number(this.ui.width.value) || 3;
    const stroke = makeStroke(kind, polarity, this.trail, width);
    this.trail = [];
    if ((this.ui.mode.value as Mode) === "instance") {
      await this.instantiate(stroke);
    } else {
      this.pending.push(stroke);
      await this.render();
      this.setStatus(`${this.pending.length} stroke(s) pending`);
    }
  }

  private async refine(): Promise<void> {
    if (!this.sessionId || this.pending.length === 0) return;
    const strokes = this.pending;
    this.pending = [];
    const resp = await this.client.sendPrompts(this.sessionId, strokes);
    this.history.push({ strokes, mask: resp.mask, dice: resp.dice });
    await this.render();
    const dice = resp.dice !== undefined ? `, dice ${resp.dice.toFixed(3)}` : "";
    this.setStatus(`round ${resp.round}${dice}`);
  }

  private async undoRound(): Promise<void> {
    if (!this.sessionId || this.history.length === 0) return;
    const resp = await this.client.undo(this.sessionId);
    this.history.pop();
    this.instanceMask = null;
    await this.render();
    this.setStatus(`round ${resp.round}`);
  }

  private async instantiate(stroke: Stroke): Promise<void> {
    if (!this.sessionId) return;
    const resp = await this.client.instantiate(this.sessionId, stroke);
    this.instanceMask = await decodeMaskPng(resp.mask);
    await this.render();
    this.setStatus(
      `instance: ${resp.attributes.length_px.toFixed(0)} px long, ` +
        `${resp.attributes.mean_width_px.toFixed(1)} px wide`,
    );
  }

  private async exportMask(): Promise<void> {
    if (!this.sessionId) return;
    const png = await this.client.exportMask(this.sessionId);
    const url = URL.createObjectURL(new Blob([png], { type: "image/png" }));
    const a = document.createElement("a");
    a.href = url;
    a.download = "mask.png";
    a.click();
    URL.revokeObjectURL(url);
  }

  private async render(): Promise<void> {
    const ctx = this.ui.canvas.getContext("2d");
    if (!ctx || !this.image) return;
    const { width, height } = this.ui.canvas;
    ctx.drawImage(this.image, 0, 0, width, height);
    const frame = ctx.getImageData(0, 0, width, height);
    if (this.instanceMask) {
      blendMask(frame.data, this.instanceMask, INSTANCE_OVERLAY);
    } else if (this.history.current) {
      const mask = await decodeMaskPng(this.history.current.mask);
      blendMask(frame.data, mask, MASK_OVERLAY);
    }
    ctx.putImageData(frame, 0, 0);
    ctx.lineWidth = 2;
    for (const s of this.pending) {
      ctx.strokeStyle = s.polarity === "positive" ? "#2f2" : "#f33";
      ctx.beginPath();
      s.points.forEach(([r, c], i) => (i ? ctx.lineTo(c, r) : ctx.moveTo(c, r)));
      ctx.stroke();
    }
  }
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  new AnnotatorApp(
    (window as unknown as { ROADGIE_API?: string }).ROADGIE_API ??
      "http://127.0.0.1:8321",
  );
}
