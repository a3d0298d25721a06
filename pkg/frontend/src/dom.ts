/** Browser wiring: pointer events, event stream, and the render loop. */

import { ApiClient } from "./api.js";
import { EventStream } from "./events.js";
import { drawCanvas, drawImageView } from "./render.js";
import type { Bitmap } from "./types.js";
import { Workbench } from "./workbench.js";

/** Decode PNG bytes with the browser's native decoder. */
export async function decodePngBrowser(bytes: Uint8Array): Promise<Bitmap> {
  const blob = new Blob([bytes.buffer as ArrayBuffer], { type: "image/png" });
  const image = await createImageBitmap(blob);
  const canvas = document.createElement("canvas");
  canvas.width = image.width;
  canvas.height = image.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d context unavailable");
  ctx.drawImage(image, 0, 0);
  const data = ctx.getImageData(0, 0, image.width, image.height);
  return { width: data.width, height: data.height, data: data.data };
}

export interface MountOptions {
  baseUrl?: string;
  imagePixelScale?: number;
}

export interface Mounted {
  workbench: Workbench;
  stream: EventStream;
  stop: () => void;
}

/**
 * Attach the workbench to a projection canvas and an image-view canvas.
 * Left-drag box-labels, click selects, shift-click in the image view
 * places negative correction seeds (plain click positive).
 */
export async function mount(
  projectionCanvas: HTMLCanvasElement,
  imageCanvas: HTMLCanvasElement,
  options: MountOptions = {},
): Promise<Mounted> {
  const baseUrl = options.baseUrl ?? "";
  const pixelScale = options.imagePixelScale ?? 4;
  const api = new ApiClient(baseUrl);
  const workbench = new Workbench(api, decodePngBrowser, {
    width: projectionCanvas.width,
    height: projectionCanvas.height,
  });
  await workbench.load();

  const projectionCtx = projectionCanvas.getContext("2d");
  const imageCtx = imageCanvas.getContext("2d");
  let raf = 0;
  const paint = () => {
    if (projectionCtx) drawCanvas(projectionCtx, workbench.canvas);
    if (imageCtx) drawImageView(imageCtx, workbench.imageView, pixelScale);
    raf = requestAnimationFrame(paint);
  };
  paint();

  projectionCanvas.addEventListener("pointerdown", (ev) => {
    workbench.canvas.beginDrag(ev.offsetX, ev.offsetY);
  });
  projectionCanvas.addEventListener("pointermove", (ev) => {
    workbench.canvas.moveDrag(ev.offsetX, ev.offsetY);
  });
  projectionCanvas.addEventListener("pointerup", () => {
    void workbench.finishBoxDrag();
  });
  projectionCanvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
    workbench.canvas.viewport.zoomAt(ev.offsetX, ev.offsetY, factor);
  });
  imageCanvas.addEventListener("pointerdown", (ev) => {
    const x = ev.offsetX / pixelScale;
    const y = ev.offsetY / pixelScale;
    if (workbench.correctionTarget !== null) {
      workbench.addCorrectionClick(x, y, ev.shiftKey ? "neg" : "pos");
    } else {
      workbench.selectImagePoint(x, y);
    }
  });

  const stream = new EventStream(`${baseUrl}/api/events`);
  stream.onEvent((event) => void workbench.handleEvent(event));
  void stream.run().catch(() => undefined);

  return {
    workbench,
    stream,
    stop: () => {
      stream.stop();
      cancelAnimationFrame(raf);
    },
  };
}
