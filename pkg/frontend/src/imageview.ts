/** Image view state: the current overlay raster and its contours.
 *
 * The overlay bitmap is authoritative (rendered by the service); the view
 * only derives contour geometry from it for hit-testing and highlight
 * strokes. Decoding PNG bytes into a Bitmap is the embedder's job
 * (canvas in the browser, a PNG library in tests).
 */

import { extractContours, type Contour } from "./contours.js";
import type { Bitmap, SegmentInfo } from "./types.js";

export type HighlightStyle = "labeled" | "unlabeled";

export class ImageView {
  imageId: string | null = null;
  bitmap: Bitmap | null = null;
  contours: Contour[] = [];
  /** Segments of the open image, newest payloads from the API. */
  segments = new Map<string, SegmentInfo>();
  highlightKey: string | null = null;

  open(imageId: string, segments: SegmentInfo[]): void {
    this.imageId = imageId;
    this.segments = new Map(segments.map((s) => [s.key, s]));
    this.bitmap = null;
    this.contours = [];
    this.highlightKey = null;
  }

  setOverlay(bitmap: Bitmap): void {
    this.bitmap = bitmap;
    this.contours = extractContours(bitmap);
  }

  get contourCount(): number {
    return this.contours.length;
  }

  /** Labeled and unlabeled selections render differently. */
  highlightStyle(key: string): HighlightStyle {
    const seg = this.segments.get(key);
    return seg && seg.label !== null ? "labeled" : "unlabeled";
  }

  /**
   * Segment under an image-pixel point: the smallest bbox containing it.
   * Bboxes of siblings can overlap after corrections; smallest wins.
   */
  segmentAt(x: number, y: number): string | null {
    let best: string | null = null;
    let bestArea = Infinity;
    for (const [key, seg] of this.segments) {
      const [rmin, cmin, rmax, cmax] = seg.bbox;
      if (y < rmin || y > rmax || x < cmin || x > cmax) continue;
      const area = (rmax - rmin + 1) * (cmax - cmin + 1);
      if (area < bestArea) {
        bestArea = area;
        best = key;
      }
    }
    return best;
  }
}
