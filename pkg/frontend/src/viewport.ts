/** Pan/zoom between layout space and screen pixels.
 *
 * screen = (layout - center) * scale + screenSize / 2, so the two
 * mappings are exact inverses for any finite scale > 0.
 */

import type { Rect } from "./types.js";

export class Viewport {
  centerX = 0;
  centerY = 0;
  scale = 40;

  constructor(
    public width: number,
    public height: number,
  ) {}

  layoutToScreen(x: number, y: number): [number, number] {
    return [
      (x - this.centerX) * this.scale + this.width / 2,
      (y - this.centerY) * this.scale + this.height / 2,
    ];
  }

  screenToLayout(sx: number, sy: number): [number, number] {
    return [
      (sx - this.width / 2) / this.scale + this.centerX,
      (sy - this.height / 2) / this.scale + this.centerY,
    ];
  }

  panBy(dxScreen: number, dyScreen: number): void {
    this.centerX -= dxScreen / this.scale;
    this.centerY -= dyScreen / this.scale;
  }

  /** Zoom by a factor keeping the layout point under (sx, sy) fixed. */
  zoomAt(sx: number, sy: number, factor: number): void {
    if (!(factor > 0)) throw new Error("zoom factor must be > 0");
    const [lx, ly] = this.screenToLayout(sx, sy);
    this.scale *= factor;
    this.centerX = lx - (sx - this.width / 2) / this.scale;
    this.centerY = ly - (sy - this.height / 2) / this.scale;
  }

  centerOn(x: number, y: number): void {
    this.centerX = x;
    this.centerY = y;
  }
}

/** Normalize two corner points into a Rect with x0 <= x1 and y0 <= y1. */
export function normalizeRect(
  ax: number,
  ay: number,
  bx: number,
  by: number,
): Rect {
  return {
    x0: Math.min(ax, bx),
    y0: Math.min(ay, by),
    x1: Math.max(ax, bx),
    y1: Math.max(ay, by),
  };
}

/** Closed-interval containment, matching the service's box semantics. */
export function rectContains(rect: Rect, x: number, y: number): boolean {
  return rect.x0 <= x && x <= rect.x1 && rect.y0 <= y && y <= rect.y1;
}
