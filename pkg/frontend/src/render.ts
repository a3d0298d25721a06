/** Canvas 2D renderers. Pure draw functions over the state objects. */

import type { CanvasState } from "./canvas.js";
import type { ImageView } from "./imageview.js";

export const SPRITE_RADIUS = 5;
const SELECT_RING = "#1d4ed8";
const RUBBER_BAND = "rgba(29, 78, 216, 0.25)";
const HIGHLIGHT_LABELED = "#facc15";
const HIGHLIGHT_UNLABELED = "#22d3ee";

export function drawCanvas(
  ctx: CanvasRenderingContext2D,
  state: CanvasState,
): void {
  const { width, height } = state.viewport;
  ctx.clearRect(0, 0, width, height);
  for (const sprite of state.sprites) {
    const [sx, sy] = state.viewport.layoutToScreen(sprite.x, sprite.y);
    if (sx < -SPRITE_RADIUS || sx > width + SPRITE_RADIUS) continue;
    if (sy < -SPRITE_RADIUS || sy > height + SPRITE_RADIUS) continue;
    ctx.beginPath();
    ctx.arc(sx, sy, SPRITE_RADIUS, 0, Math.PI * 2);
    ctx.fillStyle = sprite.color;
    ctx.fill();
    if (state.selectedKeys.has(sprite.key)) {
      ctx.lineWidth = 2;
      ctx.strokeStyle = SELECT_RING;
      ctx.stroke();
    }
  }
  const band = state.dragRectScreen();
  if (band) {
    ctx.fillStyle = RUBBER_BAND;
    ctx.fillRect(band.x0, band.y0, band.x1 - band.x0, band.y1 - band.y0);
    ctx.strokeStyle = SELECT_RING;
    ctx.lineWidth = 1;
    ctx.strokeRect(band.x0, band.y0, band.x1 - band.x0, band.y1 - band.y0);
  }
}

export function drawImageView(
  ctx: CanvasRenderingContext2D,
  view: ImageView,
  pixelScale: number,
): void {
  const bmp = view.bitmap;
  if (!bmp) return;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.imageSmoothingEnabled = false;
  const image = new ImageData(
    new Uint8ClampedArray(bmp.data),
    bmp.width,
    bmp.height,
  );
  // ImageData ignores transforms; paint at 1:1 then scale via drawImage
  const staging = document.createElement("canvas");
  staging.width = bmp.width;
  staging.height = bmp.height;
  const stagingCtx = staging.getContext("2d");
  if (!stagingCtx) return;
  stagingCtx.putImageData(image, 0, 0);
  ctx.drawImage(staging, 0, 0, bmp.width * pixelScale, bmp.height * pixelScale);

  const highlight = view.highlightKey;
  ctx.lineWidth = 2;
  ctx.strokeStyle =
    highlight !== null && view.highlightStyle(highlight) === "labeled"
      ? HIGHLIGHT_LABELED
      : HIGHLIGHT_UNLABELED;
  for (const contour of view.contours) {
    ctx.beginPath();
    for (const [x0, y0, x1, y1] of contour.edges) {
      ctx.moveTo(x0 * pixelScale, y0 * pixelScale);
      ctx.lineTo(x1 * pixelScale, y1 * pixelScale);
    }
    ctx.stroke();
  }
}
