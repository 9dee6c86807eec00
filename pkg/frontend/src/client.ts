// Connection layer: one WebSocket to the server's /dashboard endpoint.
// Incoming envelopes become reducer actions; outgoing acks and rule edits
// are plain envelopes with a local sequence counter. The WebSocket
// constructor is injected so the same client runs in browsers and in node
// tests.

import {
  Envelope,
  RuleDoc,
  SeqTracker,
  decodeEnvelope,
  encodeEnvelope,
} from "./protocol.js";
import { Action } from "./state.js";

export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type WebSocketFactory = (url: string) => WebSocketLike;

export interface DashboardClientOptions {
  serverUrl: string; // ws://host:port
  token: string;
  missionId?: string;
  clientId?: string;
  makeSocket?: WebSocketFactory;
  now?: () => number;
}

export class DashboardClient {
  private readonly opts: DashboardClientOptions;
  private readonly now: () => number;
  private socket: WebSocketLike | null = null;
  private seq = 0;
  private tracker = new SeqTracker();
  private listeners: ((action: Action) => void)[] = [];

  constructor(opts: DashboardClientOptions) {
    this.opts = opts;
    this.now = opts.now ?? (() => Date.now());
  }

  onAction(listener: (action: Action) => void): void {
    this.listeners.push(listener);
  }

  private dispatch(action: Action): void {
    for (const listener of this.listeners) listener(action);
  }

  connect(): void {
    const makeSocket: WebSocketFactory =
      this.opts.makeSocket ??
      ((url) => new (globalThis as { WebSocket: new (u: string) => WebSocketLike }).WebSocket(url));
    const url = this.opts.serverUrl.replace(/\/$/, "") + "/dashboard";
    this.dispatch({ kind: "connecting", atMs: this.now() });
    this.seq = 0;
    this.tracker = new SeqTracker();
    const socket = makeSocket(url);
    this.socket = socket;
    socket.onopen = () => {
      this.sendEnvelope("HELLO", {
        role: "dashboard",
        token: this.opts.token,
        ...(this.opts.missionId ? { mission_id: this.opts.missionId } : {}),
      });
    };
    socket.onmessage = (ev) => {
      const data = typeof ev.data === "string" ? ev.data : String(ev.data);
      const result = decodeEnvelope(data);
      if (!result.ok) {
        console.warn("undecodable message:", result.error);
        return;
      }
      if (!this.tracker.accept(result.envelope)) return;
      this.dispatch({ kind: "server_event", envelope: result.envelope, atMs: this.now() });
    };
    socket.onclose = () => {
      this.dispatch({ kind: "disconnected", reason: "connection closed", atMs: this.now() });
    };
    socket.onerror = () => {
      this.dispatch({ kind: "disconnected", reason: "socket error", atMs: this.now() });
    };
  }

  close(): void {
    this.socket?.close();
    this.socket = null;
  }

  private sendEnvelope(type: Envelope["type"], payload: Record<string, unknown>): void {
    if (!this.socket) return;
    this.seq += 1;
    const envelope: Envelope = {
      type,
      sender: this.opts.clientId ?? "dashboard-ui",
      seq: this.seq,
      ts_ms: Math.round(this.now()),
      payload,
    };
    this.socket.send(encodeEnvelope(envelope));
  }

  /** Optimistically transition an alert and ask the server to confirm. */
  requestAck(alertId: string, action: "acknowledge" | "resolve"): void {
    this.dispatch({ kind: "ack_requested", alertId, action, atMs: this.now() });
    this.sendEnvelope("ALERT_ACK", { alert_id: alertId, action });
  }

  /** Submit a validated rule draft; the server echo is authoritative. */
  submitRule(rule: RuleDoc): void {
    this.dispatch({ kind: "rule_submitted", rule, atMs: this.now() });
    this.sendEnvelope("RULE_UPDATE", { rule });
  }
}
