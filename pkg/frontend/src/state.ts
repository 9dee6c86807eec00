// Dashboard state as a pure fold over received envelopes and local actions.
// Every action carries its wall-clock time, so replaying a recorded action
// log reproduces the exact same state.

import {
  AlertDoc,
  Envelope,
  MissionDoc,
  RuleDoc,
  Snapshot,
  alertDocSchema,
  framePatternSeed,
  ruleDocSchema,
  snapshotSchema,
} from "./protocol.js";

export type ConnectionPhase = "idle" | "connecting" | "ready" | "closed" | "rejected";

export interface StreamView {
  streamId: string;
  active: boolean;
  lastSeq: number;
  lastFrameAtMs: number | null;
  patternSeed: string;
  recentFrameTimesMs: number[];
}

export interface PendingAck {
  alertId: string;
  action: "acknowledge" | "resolve";
  previousStatus: AlertDoc["status"];
  atMs: number;
}

export interface Toast {
  text: string;
  kind: "info" | "error";
  atMs: number;
}

export interface DashboardState {
  connection: ConnectionPhase;
  serverId: string | null;
  lastError: string | null;
  alerts: AlertDoc[]; // newest-first
  pendingAcks: PendingAck[];
  toasts: Toast[];
  rules: RuleDoc[];
  missions: MissionDoc[];
  streams: Record<string, StreamView>;
  metrics: Record<string, Record<string, unknown>>;
  analyses: Record<string, string>;
  selectedStream: string | null;
  eventsApplied: number;
}

export const initialState: DashboardState = {
  connection: "idle",
  serverId: null,
  lastError: null,
  alerts: [],
  pendingAcks: [],
  toasts: [],
  rules: [],
  missions: [],
  streams: {},
  metrics: {},
  analyses: {},
  selectedStream: null,
  eventsApplied: 0,
};

export type Action =
  | { kind: "connecting"; atMs: number }
  | { kind: "server_event"; envelope: Envelope; atMs: number }
  | { kind: "ack_requested"; alertId: string; action: "acknowledge" | "resolve"; atMs: number }
  | { kind: "rule_submitted"; rule: RuleDoc; atMs: number }
  | { kind: "stream_selected"; streamId: string | null; atMs: number }
  | { kind: "disconnected"; reason: string; atMs: number };

const MAX_ALERTS = 500;
const MAX_TOASTS = 8;
const FPS_WINDOW = 12;

function alertSortKey(a: AlertDoc): [number, string] {
  return [a.timestamp_ms, a.alert_id];
}

function insertAlert(alerts: AlertDoc[], doc: AlertDoc): AlertDoc[] {
  const rest = alerts.filter((a) => a.alert_id !== doc.alert_id);
  rest.push(doc);
  rest.sort((a, b) => {
    const [ta, ia] = alertSortKey(a);
    const [tb, ib] = alertSortKey(b);
    if (ta !== tb) return tb - ta; // newest first
    return ib < ia ? -1 : ib > ia ? 1 : 0;
  });
  return rest.slice(0, MAX_ALERTS);
}

function upsertRule(rules: RuleDoc[], doc: RuleDoc): RuleDoc[] {
  const rest = rules.filter((r) => r.rule_id !== doc.rule_id);
  rest.push(doc);
  rest.sort((a, b) => (a.rule_id < b.rule_id ? -1 : a.rule_id > b.rule_id ? 1 : 0));
  return rest;
}

function pushToast(toasts: Toast[], toast: Toast): Toast[] {
  return [...toasts, toast].slice(-MAX_TOASTS);
}

function applySnapshot(state: DashboardState, raw: unknown): DashboardState {
  const parsed = snapshotSchema.safeParse(raw);
  const snap: Snapshot = parsed.success
    ? parsed.data
    : { alerts: [], rules: [], missions: [], active_streams: [], metrics: {} };
  let alerts: AlertDoc[] = [];
  for (const doc of snap.alerts) alerts = insertAlert(alerts, doc);
  const streams: Record<string, StreamView> = {};
  for (const sid of snap.active_streams) {
    streams[sid] = {
      streamId: sid,
      active: true,
      lastSeq: 0,
      lastFrameAtMs: null,
      patternSeed: "pending",
      recentFrameTimesMs: [],
    };
  }
  const analyses: Record<string, string> = {};
  for (const a of snap.alerts) {
    if (a.detection_id && a.analysis_text) analyses[a.detection_id] = a.analysis_text;
  }
  return {
    ...state,
    alerts,
    rules: [...snap.rules].sort((a, b) => (a.rule_id < b.rule_id ? -1 : 1)),
    missions: snap.missions,
    streams,
    metrics: snap.metrics,
    analyses,
    selectedStream: snap.active_streams[0] ?? null,
  };
}

function applyAlertEvent(state: DashboardState, envelope: Envelope, atMs: number): DashboardState {
  const parsed = alertDocSchema.safeParse(envelope.payload["alert"]);
  if (!parsed.success) return state;
  const doc = parsed.data;
  const ackError = envelope.payload["ack_error"];
  if (typeof ackError === "string") {
    // our optimistic transition was rejected: the echoed doc is the server's
    // authoritative state, so applying it rolls the optimistic change back
    return {
      ...state,
      alerts: insertAlert(state.alerts, doc),
      pendingAcks: state.pendingAcks.filter((p) => p.alertId !== doc.alert_id),
      toasts: pushToast(state.toasts, { text: ackError, kind: "error", atMs }),
    };
  }
  const analyses =
    doc.detection_id && doc.analysis_text
      ? { ...state.analyses, [doc.detection_id]: doc.analysis_text }
      : state.analyses;
  return {
    ...state,
    alerts: insertAlert(state.alerts, doc),
    pendingAcks: state.pendingAcks.filter((p) => p.alertId !== doc.alert_id),
    analyses,
  };
}

function applyFrame(state: DashboardState, envelope: Envelope, atMs: number): DashboardState {
  const sid = String(envelope.payload["stream_id"] ?? "");
  const seq = Number(envelope.payload["frame_seq"] ?? 0);
  if (!sid) return state;
  const prev = state.streams[sid];
  if (prev && seq <= prev.lastSeq) return state; // out-of-order frame
  const frameData = String(envelope.payload["frame_data"] ?? "");
  const view: StreamView = {
    streamId: sid,
    active: true,
    lastSeq: seq,
    lastFrameAtMs: atMs,
    patternSeed: framePatternSeed(frameData),
    recentFrameTimesMs: [...(prev?.recentFrameTimesMs ?? []), atMs].slice(-FPS_WINDOW),
  };
  return {
    ...state,
    streams: { ...state.streams, [sid]: view },
    selectedStream: state.selectedStream ?? sid,
  };
}

export function reduce(state: DashboardState, action: Action): DashboardState {
  switch (action.kind) {
    case "connecting":
      return { ...state, connection: "connecting", lastError: null };
    case "disconnected":
      return {
        ...state,
        connection: state.connection === "rejected" ? "rejected" : "closed",
        lastError: action.reason || state.lastError,
      };
    case "stream_selected":
      return { ...state, selectedStream: action.streamId };
    case "ack_requested": {
      const alert = state.alerts.find((a) => a.alert_id === action.alertId);
      if (!alert) return state;
      const optimistic: AlertDoc["status"] =
        action.action === "acknowledge" ? "acknowledged" : "resolved";
      return {
        ...state,
        alerts: state.alerts.map((a) =>
          a.alert_id === action.alertId ? { ...a, status: optimistic } : a,
        ),
        pendingAcks: [
          ...state.pendingAcks.filter((p) => p.alertId !== action.alertId),
          {
            alertId: action.alertId,
            action: action.action,
            previousStatus: alert.status,
            atMs: action.atMs,
          },
        ],
      };
    }
    case "rule_submitted":
      // optimistic upsert; the server echo confirms or corrects
      return { ...state, rules: upsertRule(state.rules, action.rule) };
    case "server_event":
      return applyServerEvent(state, action.envelope, action.atMs);
  }
}

function applyServerEvent(
  state: DashboardState,
  envelope: Envelope,
  atMs: number,
): DashboardState {
  const next = ((): DashboardState => {
    switch (envelope.type) {
      case "HELLO_ACK": {
        if (envelope.payload["ok"] !== true) {
          return {
            ...state,
            connection: "rejected",
            lastError: String(envelope.payload["error"] ?? "rejected"),
          };
        }
        const base = applySnapshot(state, envelope.payload["snapshot"]);
        return {
          ...base,
          connection: "ready",
          serverId: String(envelope.payload["server_id"] ?? "server"),
        };
      }
      case "ALERT_EVENT":
        return applyAlertEvent(state, envelope, atMs);
      case "ANALYSIS": {
        const det = String(envelope.payload["detection_id"] ?? "");
        const text = String(envelope.payload["text"] ?? "");
        if (!det) return state;
        return {
          ...state,
          analyses: { ...state.analyses, [det]: text },
          alerts: state.alerts.map((a) =>
            a.detection_id === det ? { ...a, analysis_text: text } : a,
          ),
        };
      }
      case "STREAM_START": {
        const sid = String(envelope.payload["stream_id"] ?? "");
        if (!sid) return state;
        const prev = state.streams[sid];
        return {
          ...state,
          streams: {
            ...state.streams,
            [sid]: prev
              ? { ...prev, active: true }
              : {
                  streamId: sid,
                  active: true,
                  lastSeq: 0,
                  lastFrameAtMs: null,
                  patternSeed: "pending",
                  recentFrameTimesMs: [],
                },
          },
          selectedStream: state.selectedStream ?? sid,
        };
      }
      case "VIDEO_FRAME":
        return applyFrame(state, envelope, atMs);
      case "STREAM_STOP": {
        const sid = String(envelope.payload["stream_id"] ?? "");
        const prev = state.streams[sid];
        if (!prev) return state;
        return {
          ...state,
          streams: { ...state.streams, [sid]: { ...prev, active: false } },
        };
      }
      case "RULE_UPDATE": {
        const err = envelope.payload["error"];
        if (typeof err === "string") {
          return {
            ...state,
            toasts: pushToast(state.toasts, { text: err, kind: "error", atMs }),
          };
        }
        const parsed = ruleDocSchema.safeParse(envelope.payload["rule"]);
        if (!parsed.success) return state;
        return { ...state, rules: upsertRule(state.rules, parsed.data) };
      }
      case "METRICS_SNAPSHOT": {
        const drone = String(envelope.payload["drone_id"] ?? envelope.sender);
        return { ...state, metrics: { ...state.metrics, [drone]: envelope.payload } };
      }
      default:
        return state;
    }
  })();
  return { ...next, eventsApplied: state.eventsApplied + 1 };
}

export function replay(actions: Action[], from: DashboardState = initialState): DashboardState {
  return actions.reduce(reduce, from);
}

/** Effective frames-per-second over the recent receive times. */
export function streamFps(view: StreamView): number {
  const times = view.recentFrameTimesMs;
  if (times.length < 2) return 0;
  const first = times[0];
  const last = times[times.length - 1];
  if (first === undefined || last === undefined || last <= first) return 0;
  return (times.length - 1) / ((last - first) / 1000);
}

export interface RuleValidationIssue {
  field: string;
  message: string;
}

/** Client-side validation before a rule edit is sent; server stays
 * authoritative. */
export function validateRuleDraft(draft: {
  rule_id: string;
  mission_id: string;
  target_classes: string[];
  min_confidence: number;
  severity: string;
}): RuleValidationIssue[] {
  const issues: RuleValidationIssue[] = [];
  if (!draft.rule_id.trim()) issues.push({ field: "rule_id", message: "rule id is required" });
  if (!draft.mission_id.trim())
    issues.push({ field: "mission_id", message: "mission is required" });
  if (draft.target_classes.length === 0 || draft.target_classes.every((c) => !c.trim()))
    issues.push({ field: "target_classes", message: "at least one target class" });
  if (!(draft.min_confidence >= 0 && draft.min_confidence <= 1))
    issues.push({ field: "min_confidence", message: "confidence must be within [0, 1]" });
  if (!["info", "warning", "critical"].includes(draft.severity))
    issues.push({ field: "severity", message: "unknown severity" });
  return issues;
}
