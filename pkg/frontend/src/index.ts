export { ApiClient, ApiError, type FetchLike, type TrainOptions } from "./api.js";
export { CanvasState, UNLABELED_COLOR, type BoxSelection, type Sprite } from "./canvas.js";
export { extractContours, type Contour } from "./contours.js";
export { decodePngBrowser, mount, type Mounted, type MountOptions } from "./dom.js";
export { EventStream, SseParser, type EventHandler } from "./events.js";
export { ImageView, type HighlightStyle } from "./imageview.js";
export { drawCanvas, drawImageView, SPRITE_RADIUS } from "./render.js";
export * from "./types.js";
export { normalizeRect, rectContains, Viewport } from "./viewport.js";
export { Workbench, type LocalModal, type PngDecoder, type WorkbenchOptions } from "./workbench.js";
