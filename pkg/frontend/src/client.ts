/** Stream client: connection lifecycle, snapshot handshake, restart flow.
 *
 * The transport is injected as a WebSocket-like factory so tests can drive
 * the client with a mock and Node integration tests can pass the `ws`
 * implementation; the browser passes the native WebSocket.
 */

import { decodeFrame, encodeCommand, StreamMessage } from "./messages";
import { applyMessage, ViewerState } from "./state";

export interface TransportLike {
  send(data: string): void;
  close(): void;
  onopen: ((event?: unknown) => void) | null;
  onmessage: ((event: { data: unknown }) => void) | null;
  onclose: ((event?: unknown) => void) | null;
  onerror: ((event?: unknown) => void) | null;
}

export type TransportFactory = (url: string) => TransportLike;

export type ConnectionStatus = "connecting" | "online" | "offline";

export interface ClientOptions {
  url: string;
  state: ViewerState;
  transportFactory: TransportFactory;
  onChange?: () => void;
  onStatus?: (status: ConnectionStatus) => void;
  reconnectBaseMs?: number;
  reconnectMaxMs?: number;
  ackTimeoutMs?: number;
  setTimeoutFn?: typeof setTimeout;
  clearTimeoutFn?: typeof clearTimeout;
}

export class StreamClient {
  readonly state: ViewerState;
  status: ConnectionStatus = "offline";
  private readonly options: ClientOptions;
  private transport: TransportLike | null = null;
  private backoffMs: number;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
  private ackWaiters: Array<(ok: boolean) => void> = [];
  private closed = false;
  private readonly setT: typeof setTimeout;
  private readonly clearT: typeof clearTimeout;

  constructor(options: ClientOptions) {
    this.options = options;
    this.state = options.state;
    this.backoffMs = options.reconnectBaseMs ?? 500;
    this.setT = options.setTimeoutFn ?? setTimeout;
    this.clearT = options.clearTimeoutFn ?? clearTimeout;
  }

  /** Open the channel; on every (re)connection the snapshot handshake runs
   * first so a late or returning viewer converges to the full state. */
  connect(): void {
    if (this.closed) return;
    this.setStatus("connecting");
    const transport = this.options.transportFactory(this.options.url);
    this.transport = transport;
    transport.onopen = () => {
      this.backoffMs = this.options.reconnectBaseMs ?? 500;
      this.setStatus("online");
      transport.send(encodeCommand("snapshot_request"));
    };
    transport.onmessage = (event) => this.handleFrame(String(event.data));
    transport.onclose = () => this.scheduleReconnect();
    transport.onerror = () => {
      /* closure follows; reconnect handles it */
    };
  }

  close(): void {
    this.closed = true;
    if (this.reconnectTimer !== null) this.clearT(this.reconnectTimer);
    this.transport?.close();
    this.setStatus("offline");
  }

  /** Operator restart: resolves true when the service acknowledges within
   * the timeout; on timeout the alert stays and the caller shows an error. */
  requestRestart(): Promise<boolean> {
    const transport = this.transport;
    if (transport === null || this.status !== "online") {
      return Promise.resolve(false);
    }
    return new Promise((resolve) => {
      const timer = this.setT(() => {
        this.ackWaiters = this.ackWaiters.filter((w) => w !== waiter);
        resolve(false);
      }, this.options.ackTimeoutMs ?? 5000);
      const waiter = (ok: boolean) => {
        this.clearT(timer);
        resolve(ok);
      };
      this.ackWaiters.push(waiter);
      transport.send(encodeCommand("restart_acquisition"));
    });
  }

  private handleFrame(text: string): void {
    let frame;
    try {
      frame = decodeFrame(text);
    } catch {
      return; // tolerate unknown traffic
    }
    if (frame.kind === "error") {
      if (frame.terminal) {
        this.transport?.close();
      }
      return;
    }
    const message = frame as StreamMessage;
    const changed = applyMessage(this.state, message);
    if (message.kind === "restart_ack") {
      const waiters = this.ackWaiters;
      this.ackWaiters = [];
      for (const waiter of waiters) waiter(true);
    }
    if (changed) this.options.onChange?.();
  }

  private scheduleReconnect(): void {
    if (this.closed) return;
    this.setStatus("offline");
    const delay = this.backoffMs;
    this.backoffMs = Math.min(
      this.backoffMs * 2,
      this.options.reconnectMaxMs ?? 10_000,
    );
    this.reconnectTimer = this.setT(() => this.connect(), delay);
  }

  private setStatus(status: ConnectionStatus): void {
    this.status = status;
    this.options.onStatus?.(status);
  }
}
