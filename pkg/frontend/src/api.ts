/** Typed client for the annotation service.
 *
 * Every mutating POST carries a fresh request_id so the service can
 * deduplicate retries. The fetch implementation is injectable for tests.
 */

import type {
  ImageInfo,
  JobInfo,
  MetricsResponse,
  ProjectionResponse,
  Rect,
  RecutResponse,
  SegmentInfo,
  SplitResponse,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export interface TrainOptions {
  margin?: number;
  momentum?: number;
  weight_decay?: number;
  epochs?: number;
  triplets_per_epoch?: number;
  learning_rate?: number;
  lr_decay?: number;
  seed?: number;
}

let requestCounter = 0;

function nextRequestId(): string {
  requestCounter += 1;
  return `ui-${Date.now().toString(36)}-${requestCounter}`;
}

export class ApiClient {
  private fetchImpl: FetchLike;

  constructor(
    public baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + path);
    if (!res.ok) throw new ApiError(res.status, await detail(res));
    return (await res.json()) as T;
  }

  private async postJson<T>(path: string, body: Record<string, unknown>): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ request_id: nextRequestId(), ...body }),
    });
    if (!res.ok) throw new ApiError(res.status, await detail(res));
    return (await res.json()) as T;
  }

  projection(): Promise<ProjectionResponse> {
    return this.getJson("/api/projection");
  }

  images(): Promise<ImageInfo[]> {
    return this.getJson("/api/images");
  }

  segment(key: string): Promise<SegmentInfo> {
    return this.getJson(`/api/segments/${encodeURIComponent(key)}`);
  }

  overlayUrl(imageId: string, highlight?: string): string {
    const id = encodeURIComponent(imageId);
    const query = highlight === undefined
      ? ""
      : `?highlight=${encodeURIComponent(highlight)}`;
    return `${this.baseUrl}/api/images/${id}/overlay${query}`;
  }

  thumbnailUrl(imageId: string, key: string, size = 64): string {
    const id = encodeURIComponent(imageId);
    return `${this.baseUrl}/api/images/${id}/overlay` +
      `?thumb=${encodeURIComponent(key)}&size=${size}`;
  }

  async fetchOverlay(imageId: string, highlight?: string): Promise<Uint8Array> {
    const res = await this.fetchImpl(this.overlayUrl(imageId, highlight));
    if (!res.ok) throw new ApiError(res.status, await detail(res));
    return new Uint8Array(await res.arrayBuffer());
  }

  labelBox(rect: Rect, label: number): Promise<{ count: number }> {
    return this.postJson("/api/labels/box", {
      rect: [rect.x0, rect.y0, rect.x1, rect.y1],
      label,
    });
  }

  batchNext(n: number): Promise<{ keys: string[] }> {
    return this.postJson("/api/batch/next", { n });
  }

  /** Click coordinates are [x, y] pairs in image pixels. */
  split(
    key: string,
    pos: Array<[number, number]>,
    neg: Array<[number, number]>,
  ): Promise<SplitResponse> {
    return this.postJson(
      `/api/segments/${encodeURIComponent(key)}/split`,
      { pos, neg },
    );
  }

  recut(
    imageId: string,
    criterion: string,
    threshold: number,
  ): Promise<RecutResponse> {
    return this.postJson(
      `/api/images/${encodeURIComponent(imageId)}/recut`,
      { criterion, threshold },
    );
  }

  train(options: TrainOptions = {}): Promise<{ job: string }> {
    return this.postJson("/api/train", { ...options });
  }

  reprojectLocal(keys: string[]): Promise<{ job: string }> {
    return this.postJson("/api/reproject/local", { keys });
  }

  job(id: string): Promise<JobInfo> {
    return this.getJson(`/api/jobs/${encodeURIComponent(id)}`);
  }

  metrics(gtDir: string): Promise<MetricsResponse> {
    return this.getJson(`/api/metrics?gt_dir=${encodeURIComponent(gtDir)}`);
  }

  saveSession(): Promise<{ saved: string }> {
    return this.getJson("/api/session");
  }

  loadSession(directory?: string): Promise<{ loaded: string; images: number }> {
    return this.postJson("/api/session", directory ? { directory } : {});
  }

  /** Poll a job until it settles; throws on failure. */
  async waitForJob(id: string, pollMs = 50, timeoutMs = 30_000): Promise<JobInfo> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const info = await this.job(id);
      if (info.state === "done") return info;
      if (info.state === "failed") {
        throw new ApiError(500, info.error ?? "job failed");
      }
      if (Date.now() > deadline) throw new ApiError(504, `job ${id} timed out`);
      await sleep(pollMs);
    }
  }
}

async function detail(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: string };
    return body.detail ?? res.statusText;
  } catch {
    return res.statusText;
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
