// Debounced request scheduler with supersession: at most one request in
// flight, a trailing call fires after the quiet window, and when calls
// arrive faster than the window only the newest survives (stale responses
// are dropped). Keeps slider traffic at or under 1000/waitMs requests/s.

export interface ScheduledResult<T> {
  value: T;
  stale: boolean;
}

export class RequestScheduler<A, T> {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private pendingArgs: A | null = null;
  private inFlight = false;
  private generation = 0;

  constructor(
    private readonly run: (args: A) => Promise<T>,
    private readonly onResult: (value: T, args: A) => void,
    private readonly onError: (err: unknown) => void,
    private readonly waitMs: number = 100,
  ) {}

  /** Queue a request; newest arguments win. */
  submit(args: A): void {
    this.pendingArgs = args;
    if (this.timer === null) {
      this.timer = setTimeout(() => {
        this.timer = null;
        void this.fire();
      }, this.waitMs);
    }
  }

  /** Bypass the quiet window (used for discrete actions, not sliders). */
  flush(args: A): void {
    this.pendingArgs = args;
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    void this.fire();
  }

  private async fire(): Promise<void> {
    if (this.inFlight || this.pendingArgs === null) return;
    const args = this.pendingArgs;
    this.pendingArgs = null;
    const generation = ++this.generation;
    this.inFlight = true;
    try {
      const value = await this.run(args);
      if (generation === this.generation) this.onResult(value, args);
    } catch (err) {
      if (generation === this.generation) this.onError(err);
    } finally {
      this.inFlight = false;
      if (this.pendingArgs !== null) {
        // newest-wins: a call arrived while we were busy
        void this.fire();
      }
    }
  }
}
