/** Wire types for the annotation service API. */

/** Axis-aligned rectangle in layout coordinates, normalized so min <= max. */
export interface Rect {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface SegmentInfo {
  key: string;
  image: string;
  pixel_count: number;
  /** [rmin, cmin, rmax, cmax], inclusive, in image pixels. */
  bbox: [number, number, number, number];
  label: number | null;
  x: number | null;
  y: number | null;
}

export interface PaletteEntry {
  name: string;
  color: [number, number, number];
}

export type Palette = Record<string, PaletteEntry>;

export interface ProjectionResponse {
  segments: SegmentInfo[];
  palette: Palette;
}

export interface ImageInfo {
  id: string;
  width: number;
  height: number;
  shown: boolean;
  cut: { criterion: string; threshold: number };
  segments: string[];
}

export interface JobInfo {
  job: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed";
  progress: number;
  error?: string;
  result?: Record<string, unknown>;
}

export interface SplitResponse {
  children: string[];
}

export interface RecutResponse {
  added: string[];
  removed: string[];
  kept: string[];
}

export interface MetricsSummary {
  mean: number;
  median: number;
}

export interface MetricsResponse {
  images: number;
  "binary-iou": MetricsSummary;
  "instance-iou": MetricsSummary;
  agreement: MetricsSummary;
}

/** Server-sent event payloads; `event` discriminates. */
export type SessionEvent =
  | ({ event: "job-progress"; epoch?: number; loss?: number } & JobInfo)
  | ({ event: "job-done" } & JobInfo)
  | { event: "layout-updated" }
  | { event: "segments-changed"; image: string };

/** Decoded raster, RGBA row-major like canvas ImageData. */
export interface Bitmap {
  width: number;
  height: number;
  data: Uint8ClampedArray;
}
