/** Server-sent events client.
 *
 * The service streams `data: {json}` frames separated by blank lines,
 * with `:` comment lines as keepalives. SseParser is a pure incremental
 * parser; EventStream pumps a fetch body through it and dispatches to
 * handlers in arrival order.
 */

import type { SessionEvent } from "./types.js";

export class SseParser {
  private buffer = "";
  private dataLines: string[] = [];

  /** Feed a chunk of stream text; returns any events it completed. */
  feed(chunk: string): SessionEvent[] {
    this.buffer += chunk;
    const events: SessionEvent[] = [];
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl === -1) break;
      const line = this.buffer.slice(0, nl).replace(/\r$/, "");
      this.buffer = this.buffer.slice(nl + 1);
      if (line === "") {
        if (this.dataLines.length) {
          const text = this.dataLines.join("\n");
          this.dataLines = [];
          try {
            events.push(JSON.parse(text) as SessionEvent);
          } catch {
            // malformed frame: drop it rather than kill the stream
          }
        }
        continue;
      }
      if (line.startsWith(":")) continue; // keepalive comment
      if (line.startsWith("data:")) {
        this.dataLines.push(line.slice(5).replace(/^ /, ""));
      }
    }
    return events;
  }
}

export type EventHandler = (event: SessionEvent) => void;

export class EventStream {
  private handlers: EventHandler[] = [];
  private stopped = false;

  constructor(
    private url: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  onEvent(handler: EventHandler): void {
    this.handlers.push(handler);
  }

  stop(): void {
    this.stopped = true;
  }

  /** Consume the stream until it ends or stop() is called. */
  async run(): Promise<void> {
    const res = await this.fetchImpl(this.url);
    if (!res.ok || !res.body) {
      throw new Error(`event stream failed: HTTP ${res.status}`);
    }
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    while (!this.stopped) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const event of parser.feed(decoder.decode(value, { stream: true }))) {
        for (const handler of this.handlers) handler(event);
      }
    }
    reader.cancel().catch(() => undefined);
  }
}
