// Browser shell: URL + token entry, then the live dashboard. All state
// transitions flow through the reducer; this file only wires DOM events and
// repaints.

import { DashboardClient } from "./client.js";
import { drawTestPattern } from "./pattern.js";
import { renderApp } from "./render.js";
import {
  DashboardState,
  initialState,
  reduce,
  validateRuleDraft,
} from "./state.js";
import { RuleDoc } from "./protocol.js";

let state: DashboardState = initialState;
let client: DashboardClient | null = null;

const root = document.getElementById("app") as HTMLElement;

function repaint(): void {
  root.innerHTML = renderApp(state, Date.now());
  const canvas = document.getElementById("stream-canvas") as HTMLCanvasElement | null;
  const sel = state.selectedStream ? state.streams[state.selectedStream] : undefined;
  if (canvas && sel) {
    drawTestPattern(canvas, sel.patternSeed, sel.lastSeq);
  }
}

function apply(action: Parameters<typeof reduce>[1]): void {
  state = reduce(state, action);
  repaint();
}

function promptRuleDraft(existing?: RuleDoc): RuleDoc | null {
  const missionId =
    existing?.mission_id ?? state.missions[0]?.mission_id ?? "m-demo";
  const ruleId = window.prompt("rule id", existing?.rule_id ?? "r-new");
  if (ruleId === null) return null;
  const targets = window.prompt(
    "target classes (comma separated)",
    existing?.target_classes.join(", ") ?? "person",
  );
  if (targets === null) return null;
  const conf = window.prompt(
    "min confidence [0..1]",
    String(existing?.min_confidence ?? 0.5),
  );
  if (conf === null) return null;
  const severity = window.prompt(
    "severity (info|warning|critical)",
    existing?.severity ?? "critical",
  );
  if (severity === null) return null;
  const draft = {
    rule_id: ruleId.trim(),
    mission_id: missionId,
    target_classes: targets.split(",").map((c) => c.trim()).filter(Boolean),
    min_confidence: Number(conf),
    severity: severity.trim(),
  };
  const issues = validateRuleDraft(draft);
  if (issues.length > 0) {
    window.alert(issues.map((i) => `${i.field}: ${i.message}`).join("\n"));
    return null;
  }
  return {
    ...draft,
    severity: draft.severity as RuleDoc["severity"],
    prompt_template:
      existing?.prompt_template ?? "Describe the {class} (confidence {confidence}).",
    enabled: existing?.enabled ?? true,
  };
}

root.addEventListener("click", (ev) => {
  const target = ev.target as HTMLElement;
  if (!client) return;
  const ack = target.getAttribute("data-ack");
  const alertId = target.getAttribute("data-alert");
  if (ack && alertId && (ack === "acknowledge" || ack === "resolve")) {
    client.requestAck(alertId, ack);
    return;
  }
  const streamId = target.getAttribute("data-select-stream");
  if (streamId) {
    apply({ kind: "stream_selected", streamId, atMs: Date.now() });
    return;
  }
  const editRule = target.getAttribute("data-edit-rule");
  if (editRule) {
    const existing = state.rules.find((r) => r.rule_id === editRule);
    const draft = promptRuleDraft(existing);
    if (draft) client.submitRule(draft);
    return;
  }
  const toggleRule = target.getAttribute("data-toggle-rule");
  if (toggleRule) {
    const existing = state.rules.find((r) => r.rule_id === toggleRule);
    if (existing) client.submitRule({ ...existing, enabled: !existing.enabled });
    return;
  }
  if (target.id === "add-rule") {
    const draft = promptRuleDraft();
    if (draft) client.submitRule(draft);
  }
});

function connect(serverUrl: string, token: string): void {
  client = new DashboardClient({ serverUrl, token, missionId: undefined });
  client.onAction((action) => apply(action));
  client.connect();
  window.setInterval(repaint, 1000); // staleness indicator refresh
  void pollStatus(serverUrl);
}

async function pollStatus(serverUrl: string): Promise<void> {
  const httpUrl = serverUrl.replace(/^ws/, "http") + "/status";
  const el = document.getElementById("server-status");
  for (;;) {
    try {
      const resp = await fetch(httpUrl);
      const doc = await resp.json();
      if (el) {
        el.textContent =
          `detections ${doc.detections} | alerts ${doc.alerts} | ` +
          `streams ${doc.active_streams.length} | uptime ${doc.uptime_s}s`;
      }
    } catch {
      if (el) el.textContent = "status unreachable";
    }
    await new Promise((resolve) => setTimeout(resolve, 3000));
  }
}

const form = document.getElementById("connect-form") as HTMLFormElement;
form.addEventListener("submit", (ev) => {
  ev.preventDefault();
  const url = (document.getElementById("server-url") as HTMLInputElement).value;
  const token = (document.getElementById("token") as HTMLInputElement).value;
  form.style.display = "none";
  connect(url, token);
});
