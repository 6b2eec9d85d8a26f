import type { FetchLike, RenderRequest } from "./api.js";

export interface RenderResult {
	blob: Blob;
	latencyMs: number;
	sequence: number;
}

export interface RenderClientOptions {
	debounceMs?: number;
	fetchFn: FetchLike;
	baseUrl: string;
	onResult: (r: RenderResult) => void;
	onError?: (message: string) => void;
	onInFlight?: (inFlight: boolean) => void;
	/** injectable timers/clock for tests */
	setTimer?: (fn: () => void, ms: number) => unknown;
	clearTimer?: (handle: unknown) => void;
	now?: () => number;
}

/**
 * Debounced, newest-wins render requests.
 *
 * Every `request` call restarts a >= 100 ms debounce timer; when it
 * fires, the latest request body is POSTed with a monotonically
 * increasing sequence number. Responses for anything older than the
 * newest displayed sequence are discarded, so out-of-order completions
 * never overwrite newer renders.
 */
export class RenderClient {
	private debounceMs: number;
	private fetchFn: FetchLike;
	private baseUrl: string;
	private onResult: (r: RenderResult) => void;
	private onError: (message: string) => void;
	private onInFlight: (b: boolean) => void;
	private setTimer: (fn: () => void, ms: number) => unknown;
	private clearTimer: (handle: unknown) => void;
	private now: () => number;

	private pending: RenderRequest | null = null;
	private timer: unknown = null;
	private nextSequence = 0;
	private displayedSequence = -1;
	private inFlight = 0;
	requestsSent = 0;

	constructor(opts: RenderClientOptions) {
		this.debounceMs = Math.max(opts.debounceMs ?? 100, 100);
		this.fetchFn = opts.fetchFn;
		this.baseUrl = opts.baseUrl;
		this.onResult = opts.onResult;
		this.onError = opts.onError ?? (() => undefined);
		this.onInFlight = opts.onInFlight ?? (() => undefined);
		this.setTimer = opts.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
		this.clearTimer = opts.clearTimer ?? ((h) => clearTimeout(h as never));
		this.now = opts.now ?? (() => performance.now());
	}

	/** Queue a render for the given request body (debounced). */
	request(body: RenderRequest): void {
		this.pending = body;
		if (this.timer !== null) {
			this.clearTimer(this.timer);
		}
		this.timer = this.setTimer(() => {
			this.timer = null;
			this.fire();
		}, this.debounceMs);
	}

	/** Send immediately (initial render); still sequence-tracked. */
	fireNow(body: RenderRequest): void {
		this.pending = body;
		this.fire();
	}

	private fire(): void {
		if (!this.pending) return;
		const body = this.pending;
		this.pending = null;
		const seq = this.nextSequence++;
		const started = this.now();
		this.requestsSent += 1;
		this.inFlight += 1;
		this.onInFlight(true);
		this.fetchFn(`${this.baseUrl}/render`, {
			method: "POST",
			headers: { "Content-Type": "application/json" },
			body: JSON.stringify(body),
		})
			.then(async (res) => {
				if (!res.ok) {
					const doc = (await res.json().catch(() => ({}))) as {
						error?: string;
					};
					throw new Error(doc.error ?? `render failed (${res.status})`);
				}
				const blob = await res.blob();
				if (seq <= this.displayedSequence) {
					return; // stale: a newer render already landed
				}
				this.displayedSequence = seq;
				this.onResult({
					blob,
					latencyMs: this.now() - started,
					sequence: seq,
				});
			})
			.catch((err: Error) => this.onError(err.message))
			.finally(() => {
				this.inFlight -= 1;
				if (this.inFlight === 0) {
					this.onInFlight(false);
				}
			});
	}
}
