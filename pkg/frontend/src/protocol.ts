// Wire envelope parsing for the dashboard connection. One JSON document per
// WebSocket message; unknown or regressed messages are dropped, never fatal.

import { z } from "zod";

export const severitySchema = z.enum(["info", "warning", "critical"]);
export const alertStatusSchema = z.enum(["open", "acknowledged", "resolved"]);

export const alertDocSchema = z.object({
  alert_id: z.string(),
  alert_type: z.string().default("detection"),
  severity: severitySchema.default("info"),
  message: z.string().default(""),
  timestamp_ms: z.number().default(0),
  status: alertStatusSchema.default("open"),
  detection_id: z.string().nullable().default(null),
  rule_id: z.string().nullable().default(null),
  analysis_text: z.string().nullable().default(null),
});
export type AlertDoc = z.infer<typeof alertDocSchema>;

export const ruleDocSchema = z.object({
  rule_id: z.string(),
  mission_id: z.string(),
  target_classes: z.array(z.string()),
  min_confidence: z.number(),
  severity: severitySchema,
  prompt_template: z.string().default(""),
  enabled: z.boolean().default(true),
});
export type RuleDoc = z.infer<typeof ruleDocSchema>;

export const missionDocSchema = z.object({
  mission_id: z.string(),
  name: z.string().default(""),
  status: z.string().default("planned"),
  drone_ids: z.array(z.string()).default([]),
  user_ids: z.array(z.string()).default([]),
});
export type MissionDoc = z.infer<typeof missionDocSchema>;

export const snapshotSchema = z.object({
  alerts: z.array(alertDocSchema).default([]),
  rules: z.array(ruleDocSchema).default([]),
  missions: z.array(missionDocSchema).default([]),
  active_streams: z.array(z.string()).default([]),
  metrics: z.record(z.string(), z.record(z.string(), z.unknown())).default({}),
});
export type Snapshot = z.infer<typeof snapshotSchema>;

export const MSG_TYPES = [
  "HELLO",
  "HELLO_ACK",
  "IMAGE_UPLOAD",
  "VERIFY_RESULT",
  "ANALYSIS",
  "STREAM_START",
  "VIDEO_FRAME",
  "STREAM_STOP",
  "ALERT_EVENT",
  "ALERT_ACK",
  "RULE_UPDATE",
  "METRICS_SNAPSHOT",
] as const;
export type MsgType = (typeof MSG_TYPES)[number];

export const envelopeSchema = z.object({
  type: z.enum(MSG_TYPES),
  sender: z.string().min(1),
  seq: z.number().int().nonnegative(),
  ts_ms: z.number(),
  payload: z.record(z.string(), z.unknown()),
});
export type Envelope = z.infer<typeof envelopeSchema>;

export interface DecodeFailure {
  ok: false;
  error: string;
}
export interface DecodeSuccess {
  ok: true;
  envelope: Envelope;
}

export function decodeEnvelope(data: string): DecodeSuccess | DecodeFailure {
  let doc: unknown;
  try {
    doc = JSON.parse(data);
  } catch (err) {
    return { ok: false, error: `invalid JSON: ${String(err)}` };
  }
  const parsed = envelopeSchema.safeParse(doc);
  if (!parsed.success) {
    return { ok: false, error: parsed.error.issues[0]?.message ?? "schema" };
  }
  return { ok: true, envelope: parsed.data };
}

export function encodeEnvelope(env: Envelope): string {
  return JSON.stringify(env);
}

/** Per-sender monotonicity guard; regressed messages are dropped. */
export class SeqTracker {
  private last = new Map<string, number>();
  dropped = 0;

  accept(env: Envelope): boolean {
    const prev = this.last.get(env.sender);
    if (prev !== undefined && env.seq <= prev) {
      this.dropped += 1;
      return false;
    }
    this.last.set(env.sender, env.seq);
    return true;
  }
}

/** Frame payloads are synthetic; the first header line identifies them. */
export function framePatternSeed(frameDataB64: string): string {
  const headLen = Math.min(frameDataB64.length, 96);
  let decoded: string;
  try {
    decoded =
      typeof atob === "function"
        ? atob(frameDataB64.slice(0, headLen - (headLen % 4)))
        : Buffer.from(frameDataB64.slice(0, headLen), "base64").toString("latin1");
  } catch {
    return "unknown";
  }
  const newline = decoded.indexOf("\n");
  return newline > 0 ? decoded.slice(0, newline) : "unknown";
}
