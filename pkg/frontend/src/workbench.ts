/** Orchestrates the projection canvas and the image view against the API.
 *
 * The UI never holds authoritative annotation state: every mutation goes
 * to the service and the local state is rebuilt from responses and
 * events. Label writes are therefore strictly non-optimistic.
 */

import { ApiClient } from "./api.js";
import { CanvasState } from "./canvas.js";
import { ImageView } from "./imageview.js";
import type {
  Bitmap,
  ImageInfo,
  SegmentInfo,
  SessionEvent,
} from "./types.js";

export type PngDecoder = (bytes: Uint8Array) => Promise<Bitmap>;

export interface WorkbenchOptions {
  width?: number;
  height?: number;
}

/** Pop-up local re-projection, labeled through the same box path. */
export interface LocalModal {
  canvas: CanvasState;
  keys: string[];
}

export class Workbench {
  readonly canvas: CanvasState;
  readonly imageView = new ImageView();
  images: ImageInfo[] = [];
  modal: LocalModal | null = null;
  /** Inline prompt (missing label, too few selected, job errors). */
  message: string | null = null;
  correctionTarget: string | null = null;
  private posClicks: Array<[number, number]> = [];
  private negClicks: Array<[number, number]> = [];
  private segmentIndex = new Map<string, SegmentInfo>();

  constructor(
    private api: ApiClient,
    private decodePng: PngDecoder,
    options: WorkbenchOptions = {},
  ) {
    this.canvas = new CanvasState(options.width ?? 800, options.height ?? 600);
  }

  async load(): Promise<void> {
    await this.refreshProjection();
    this.images = await this.api.images();
  }

  async refreshProjection(): Promise<void> {
    const proj = await this.api.projection();
    this.segmentIndex = new Map(proj.segments.map((s) => [s.key, s]));
    this.canvas.setProjection(proj.segments, proj.palette);
    if (this.modal) {
      // keep modal sprite labels in sync; coordinates stay modal-local
      this.modal.canvas.palette = proj.palette;
      for (const sprite of this.modal.canvas.sprites) {
        const seg = this.segmentIndex.get(sprite.key);
        if (seg) sprite.label = seg.label;
      }
      this.modal.canvas.recolorFromPalette();
    }
  }

  async loadMore(n: number): Promise<string[]> {
    const { keys } = await this.api.batchNext(n);
    await this.refreshProjection();
    return keys;
  }

  setActiveLabel(label: number | null): void {
    this.canvas.activeLabel = label;
    if (this.modal) this.modal.canvas.activeLabel = label;
  }

  /**
   * Complete a rubber-band gesture on a canvas (main or modal).
   *
   * On the main canvas this issues exactly one /labels/box request whose
   * rect covers exactly the sprites inside the rectangle. The modal's
   * coordinates are client-local, so there the same selection is realized
   * as one point rect per covered key at the service's own coordinates,
   * labeling exactly the boxed keys and nothing else. Either way the
   * canvas recolors from the service's state afterwards; a zero-area drag
   * or a missing active label issues no request at all.
   */
  async finishBoxDrag(target?: CanvasState): Promise<number | null> {
    const canvas = target ?? this.canvas;
    const selection = canvas.endDrag();
    if (!selection || selection.keys.length === 0) return null;
    if (canvas.activeLabel === null) {
      this.message = "select a label before box-labeling";
      return null;
    }
    let count = 0;
    if (canvas === this.canvas) {
      ({ count } = await this.api.labelBox(selection.rect, canvas.activeLabel));
    } else {
      for (const key of selection.keys) {
        const seg = this.segmentIndex.get(key);
        if (!seg || seg.x === null || seg.y === null) continue;
        const point = { x0: seg.x, y0: seg.y, x1: seg.x, y1: seg.y };
        count += (await this.api.labelBox(point, canvas.activeLabel)).count;
      }
    }
    await this.refreshProjection();
    return count;
  }

  /** Sprite click: select it and focus its image with the highlight ring. */
  async selectSprite(key: string): Promise<void> {
    const seg = this.segmentIndex.get(key);
    if (!seg) return;
    this.canvas.selectedKeys = new Set([key]);
    await this.openImage(seg.image, key);
  }

  /** Image-view click on a region: pan the canvas to that segment. */
  selectImagePoint(x: number, y: number): string | null {
    const key = this.imageView.segmentAt(x, y);
    if (key !== null) this.canvas.centerOn(key);
    return key;
  }

  async openImage(imageId: string, highlight?: string): Promise<void> {
    const segments = [...this.segmentIndex.values()].filter(
      (s) => s.image === imageId,
    );
    this.imageView.open(imageId, segments);
    this.imageView.highlightKey = highlight ?? null;
    await this.refreshOverlay();
  }

  async refreshOverlay(): Promise<void> {
    if (this.imageView.imageId === null) return;
    const bytes = await this.api.fetchOverlay(
      this.imageView.imageId,
      this.imageView.highlightKey ?? undefined,
    );
    this.imageView.setOverlay(await this.decodePng(bytes));
  }

  /** Local re-projection of the current selection in a pop-up. */
  async localZoom(): Promise<void> {
    const keys = [...this.canvas.selectedKeys];
    if (keys.length < 6) {
      this.message = "select at least 6 segments for a local view";
      return;
    }
    const { job } = await this.api.reprojectLocal(keys);
    const info = await this.api.waitForJob(job);
    const coords = (info.result?.coords ?? {}) as Record<
      string,
      [number, number]
    >;
    const canvas = new CanvasState(400, 400);
    canvas.activeLabel = this.canvas.activeLabel;
    canvas.setProjection(
      keys
        .map((k) => this.segmentIndex.get(k))
        .filter((s): s is SegmentInfo => s !== undefined && s.key in coords)
        .map((s) => ({ ...s, x: coords[s.key][0], y: coords[s.key][1] })),
      this.canvas.palette,
    );
    this.modal = { canvas, keys };
  }

  closeModal(): void {
    this.modal = null;
  }

  // ------------------------------------------------------------ correction

  startCorrection(key: string): void {
    this.correctionTarget = key;
    this.posClicks = [];
    this.negClicks = [];
  }

  addCorrectionClick(x: number, y: number, polarity: "pos" | "neg"): void {
    const point: [number, number] = [x, y];
    if (polarity === "pos") this.posClicks.push(point);
    else this.negClicks.push(point);
  }

  get correctionClicks(): { pos: number; neg: number } {
    return { pos: this.posClicks.length, neg: this.negClicks.length };
  }

  /**
   * Submit the clicked seeds; on success the overlay refreshes (two
   * contours where one was) and the new children join the canvas.
   */
  async submitCorrection(): Promise<string[] | null> {
    if (this.correctionTarget === null) return null;
    if (this.posClicks.length === 0 || this.negClicks.length === 0) {
      this.message = "place at least one positive and one negative click";
      return null;
    }
    const { children } = await this.api.split(
      this.correctionTarget,
      this.posClicks,
      this.negClicks,
    );
    this.correctionTarget = null;
    this.posClicks = [];
    this.negClicks = [];
    await this.refreshProjection();
    await this.reopenCurrentImage();
    return children;
  }

  // ------------------------------------------------------------- hierarchy

  async applyRecut(
    imageId: string,
    criterion: string,
    threshold: number,
  ): Promise<{ added: string[]; removed: string[]; kept: string[] }> {
    const report = await this.api.recut(imageId, criterion, threshold);
    await this.refreshProjection();
    if (this.imageView.imageId === imageId) await this.reopenCurrentImage();
    return report;
  }

  // ---------------------------------------------------------------- events

  /** Apply a server-sent event; call in arrival order. */
  async handleEvent(event: SessionEvent): Promise<void> {
    if (event.event === "layout-updated") {
      await this.refreshProjection();
    } else if (event.event === "segments-changed") {
      await this.refreshProjection();
      if (this.imageView.imageId === event.image) {
        await this.reopenCurrentImage();
      }
    } else if (event.event === "job-done" && event.error) {
      this.message = `${event.kind} failed: ${event.error}`;
    }
  }

  private async reopenCurrentImage(): Promise<void> {
    const imageId = this.imageView.imageId;
    if (imageId === null) return;
    const highlight = this.imageView.highlightKey;
    const keep =
      highlight !== null && this.segmentIndex.has(highlight)
        ? highlight
        : undefined;
    await this.openImage(imageId, keep);
  }
}
