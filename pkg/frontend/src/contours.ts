/** Contour geometry from overlay bitmaps.
 *
 * The service draws region boundaries as pure black pixels. A contour is
 * the outline of one 4-connected component of non-boundary pixels; its
 * path is the set of unit edges between the component and everything
 * else, so it can be stroked directly at image scale.
 */

import type { Bitmap } from "./types.js";

export interface Contour {
  /** Pixel count of the enclosed component. */
  area: number;
  /** [rmin, cmin, rmax, cmax] of the component, inclusive. */
  bbox: [number, number, number, number];
  /** Unit edge segments [x0, y0, x1, y1] in pixel coordinates. */
  edges: Array<[number, number, number, number]>;
}

function isBoundary(bmp: Bitmap, r: number, c: number): boolean {
  const i = (r * bmp.width + c) * 4;
  return bmp.data[i] === 0 && bmp.data[i + 1] === 0 && bmp.data[i + 2] === 0;
}

/** Extract one contour per connected region of the overlay. */
export function extractContours(bmp: Bitmap): Contour[] {
  const { width: w, height: h } = bmp;
  const labels = new Int32Array(w * h).fill(-1);
  const contours: Contour[] = [];

  for (let r = 0; r < h; r++) {
    for (let c = 0; c < w; c++) {
      if (labels[r * w + c] !== -1 || isBoundary(bmp, r, c)) continue;
      const id = contours.length;
      const contour: Contour = { area: 0, bbox: [r, c, r, c], edges: [] };
      const stack: Array<[number, number]> = [[r, c]];
      labels[r * w + c] = id;
      while (stack.length) {
        const [pr, pc] = stack.pop() as [number, number];
        contour.area += 1;
        const bb = contour.bbox;
        bb[0] = Math.min(bb[0], pr);
        bb[1] = Math.min(bb[1], pc);
        bb[2] = Math.max(bb[2], pr);
        bb[3] = Math.max(bb[3], pc);
        visit(pr - 1, pc, pr, pc, contour, "top");
        visit(pr + 1, pc, pr, pc, contour, "bottom");
        visit(pr, pc - 1, pr, pc, contour, "left");
        visit(pr, pc + 1, pr, pc, contour, "right");
      }
      contours.push(contour);

      function visit(
        nr: number,
        nc: number,
        pr: number,
        pc: number,
        out: Contour,
        side: "top" | "bottom" | "left" | "right",
      ): void {
        const inside =
          nr >= 0 && nr < h && nc >= 0 && nc < w && !isBoundary(bmp, nr, nc);
        if (inside) {
          if (labels[nr * w + nc] === -1) {
            labels[nr * w + nc] = id;
            stack.push([nr, nc]);
          }
          return;
        }
        // component edge: emit the unit segment between (pr, pc) and the
        // missing neighbor, in x/y pixel coordinates
        if (side === "top") out.edges.push([pc, pr, pc + 1, pr]);
        else if (side === "bottom") out.edges.push([pc, pr + 1, pc + 1, pr + 1]);
        else if (side === "left") out.edges.push([pc, pr, pc, pr + 1]);
        else out.edges.push([pc + 1, pr, pc + 1, pr + 1]);
      }
    }
  }
  return contours;
}
