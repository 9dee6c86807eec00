// Pure HTML rendering: identical state + clock in, identical markup out.
// The browser shell swaps this markup in and wires events by delegation.

import { DashboardState, StreamView, streamFps } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmtTime(tsMs: number): string {
  if (!tsMs) return "-";
  return new Date(tsMs).toISOString().slice(11, 19);
}

export function renderStatusBar(state: DashboardState, nowMs: number): string {
  const open = state.alerts.filter((a) => a.status === "open").length;
  const activeStreams = Object.values(state.streams).filter((s) => s.active).length;
  return (
    `<div class="statusbar" data-phase="${state.connection}">` +
    `<span class="conn conn-${state.connection}">${state.connection}</span>` +
    (state.serverId ? `<span>server: ${escapeHtml(state.serverId)}</span>` : "") +
    `<span>open alerts: ${open}</span>` +
    `<span>active streams: ${activeStreams}</span>` +
    `<span>events: ${state.eventsApplied}</span>` +
    (state.lastError ? `<span class="error">${escapeHtml(state.lastError)}</span>` : "") +
    `</div>`
  );
}

export function renderAlertFeed(state: DashboardState): string {
  if (state.alerts.length === 0) {
    return `<div class="alert-feed empty">No alerts yet.</div>`;
  }
  const rows = state.alerts.map((a) => {
    const pending = state.pendingAcks.some((p) => p.alertId === a.alert_id);
    const buttons =
      a.status === "open"
        ? `<button data-ack="acknowledge" data-alert="${escapeHtml(a.alert_id)}">acknowledge</button>`
        : a.status === "acknowledged"
          ? `<button data-ack="resolve" data-alert="${escapeHtml(a.alert_id)}">resolve</button>`
          : "";
    const analysis = a.analysis_text
      ? `<div class="analysis">${escapeHtml(a.analysis_text)}</div>`
      : "";
    return (
      `<li class="alert sev-${a.severity} st-${a.status}${pending ? " pending" : ""}" ` +
      `data-alert-id="${escapeHtml(a.alert_id)}">` +
      `<span class="badge badge-${a.severity}">${a.severity}</span>` +
      `<span class="time">${fmtTime(a.timestamp_ms)}</span>` +
      `<span class="msg">${escapeHtml(a.message)}</span>` +
      `<span class="status">${a.status}${pending ? " (pending)" : ""}</span>` +
      buttons +
      analysis +
      `</li>`
    );
  });
  return `<ul class="alert-feed">${rows.join("")}</ul>`;
}

export function renderRules(state: DashboardState): string {
  const rows = state.rules.map(
    (r) =>
      `<tr data-rule-id="${escapeHtml(r.rule_id)}" class="${r.enabled ? "" : "disabled"}">` +
      `<td>${escapeHtml(r.rule_id)}</td>` +
      `<td>${escapeHtml(r.target_classes.join(", "))}</td>` +
      `<td>${r.min_confidence}</td>` +
      `<td><span class="badge badge-${r.severity}">${r.severity}</span></td>` +
      `<td>${r.enabled ? "enabled" : "disabled"}</td>` +
      `<td><button data-edit-rule="${escapeHtml(r.rule_id)}">edit</button>` +
      `<button data-toggle-rule="${escapeHtml(r.rule_id)}">` +
      `${r.enabled ? "disable" : "enable"}</button></td></tr>`,
  );
  return (
    `<table class="rules"><thead><tr>` +
    `<th>rule</th><th>targets</th><th>min conf</th><th>severity</th>` +
    `<th>state</th><th></th></tr></thead>` +
    `<tbody>${rows.join("")}</tbody></table>`
  );
}

function staleness(view: StreamView, nowMs: number): string {
  if (view.lastFrameAtMs === null) return "no frames yet";
  const age = (nowMs - view.lastFrameAtMs) / 1000;
  return age > 5 ? `stale (${age.toFixed(1)}s)` : `${age.toFixed(1)}s ago`;
}

export function renderStreamPanel(state: DashboardState, nowMs: number): string {
  const views = Object.values(state.streams);
  if (views.length === 0) {
    return `<div class="stream-panel empty">No active stream.</div>`;
  }
  const tabs = views
    .map(
      (v) =>
        `<button data-select-stream="${escapeHtml(v.streamId)}" ` +
        `class="tab${v.streamId === state.selectedStream ? " selected" : ""}` +
        `${v.active ? "" : " ended"}">${escapeHtml(v.streamId)}</button>`,
    )
    .join("");
  const sel = state.selectedStream ? state.streams[state.selectedStream] : undefined;
  let body = `<div class="stream-empty">select a stream</div>`;
  if (sel) {
    body = sel.active
      ? `<div class="stream-live" data-pattern="${escapeHtml(sel.patternSeed)}" ` +
        `data-seq="${sel.lastSeq}">` +
        `<canvas id="stream-canvas" width="320" height="180"></canvas>` +
        `<div class="stream-meta">frame ${sel.lastSeq} | ` +
        `${streamFps(sel).toFixed(2)} fps | ${staleness(sel, nowMs)}</div></div>`
      : `<div class="stream-ended">stream ended (last frame ${sel.lastSeq})</div>`;
  }
  return `<div class="stream-panel"><div class="tabs">${tabs}</div>${body}</div>`;
}

export function renderToasts(state: DashboardState): string {
  if (state.toasts.length === 0) return "";
  const items = state.toasts
    .slice(-3)
    .map((t) => `<div class="toast toast-${t.kind}">${escapeHtml(t.text)}</div>`)
    .join("");
  return `<div class="toasts">${items}</div>`;
}

export function renderApp(state: DashboardState, nowMs: number): string {
  return (
    renderStatusBar(state, nowMs) +
    `<div class="columns">` +
    `<section class="col"><h2>Alerts</h2>${renderAlertFeed(state)}</section>` +
    `<section class="col"><h2>Stream</h2>${renderStreamPanel(state, nowMs)}` +
    `<h2>Rules</h2>${renderRules(state)}</section>` +
    `</div>` +
    renderToasts(state)
  );
}
