/** Projection canvas state: sprites, pan/zoom, rubber-band selection.
 *
 * Pure state, no DOM. A renderer draws from it; pointer handlers call
 * begin/move/endDrag with screen coordinates. Sprite positions and labels
 * only ever change from API responses, never optimistically.
 */

import type { Palette, Rect, SegmentInfo } from "./types.js";
import { Viewport, normalizeRect, rectContains } from "./viewport.js";

export const UNLABELED_COLOR = "#888888";

export interface Sprite {
  key: string;
  image: string;
  x: number;
  y: number;
  label: number | null;
  color: string;
}

export interface BoxSelection {
  /** Drag rectangle in layout coordinates, normalized. */
  rect: Rect;
  /** Keys of sprites inside the rectangle at release time. */
  keys: string[];
}

interface DragState {
  startX: number;
  startY: number;
  lastX: number;
  lastY: number;
}

function cssColor(entry: { color: [number, number, number] }): string {
  const [r, g, b] = entry.color;
  return `rgb(${r}, ${g}, ${b})`;
}

export class CanvasState {
  readonly viewport: Viewport;
  sprites: Sprite[] = [];
  palette: Palette = {};
  activeLabel: number | null = null;
  selectedKeys = new Set<string>();
  private drag: DragState | null = null;

  constructor(width: number, height: number) {
    this.viewport = new Viewport(width, height);
  }

  /** Replace sprites from a projection response; placed segments only. */
  setProjection(segments: SegmentInfo[], palette: Palette): void {
    this.palette = palette;
    this.sprites = segments
      .filter((s) => s.x !== null && s.y !== null)
      .map((s) => ({
        key: s.key,
        image: s.image,
        x: s.x as number,
        y: s.y as number,
        label: s.label,
        color:
          s.label !== null && palette[String(s.label)]
            ? cssColor(palette[String(s.label)])
            : UNLABELED_COLOR,
      }));
    const keys = new Set(this.sprites.map((s) => s.key));
    for (const k of this.selectedKeys) {
      if (!keys.has(k)) this.selectedKeys.delete(k);
    }
  }

  sprite(key: string): Sprite | undefined {
    return this.sprites.find((s) => s.key === key);
  }

  /** Recompute sprite colors after labels or palette changed. */
  recolorFromPalette(): void {
    for (const s of this.sprites) {
      s.color =
        s.label !== null && this.palette[String(s.label)]
          ? cssColor(this.palette[String(s.label)])
          : UNLABELED_COLOR;
    }
  }

  /** Keys whose layout coordinates fall inside the rect, closed bounds. */
  keysInRect(rect: Rect): string[] {
    return this.sprites
      .filter((s) => rectContains(rect, s.x, s.y))
      .map((s) => s.key);
  }

  beginDrag(sx: number, sy: number): void {
    this.drag = { startX: sx, startY: sy, lastX: sx, lastY: sy };
  }

  moveDrag(sx: number, sy: number): void {
    if (!this.drag) return;
    this.drag.lastX = sx;
    this.drag.lastY = sy;
  }

  /** Current rubber band in screen coordinates, for the renderer. */
  dragRectScreen(): Rect | null {
    if (!this.drag) return null;
    const d = this.drag;
    return normalizeRect(d.startX, d.startY, d.lastX, d.lastY);
  }

  /**
   * Finish the drag and report what it covered.
   *
   * Returns null for a zero-area gesture (a plain click), which must not
   * produce a labeling request.
   */
  endDrag(): BoxSelection | null {
    if (!this.drag) return null;
    const d = this.drag;
    this.drag = null;
    if (d.startX === d.lastX || d.startY === d.lastY) return null;
    const [ax, ay] = this.viewport.screenToLayout(d.startX, d.startY);
    const [bx, by] = this.viewport.screenToLayout(d.lastX, d.lastY);
    const rect = normalizeRect(ax, ay, bx, by);
    const keys = this.keysInRect(rect);
    this.selectedKeys = new Set(keys);
    return { rect, keys };
  }

  centerOn(key: string): boolean {
    const s = this.sprite(key);
    if (!s) return false;
    this.viewport.centerOn(s.x, s.y);
    return true;
  }
}
