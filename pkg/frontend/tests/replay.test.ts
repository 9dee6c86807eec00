// Replay determinism: folding the recorded action log reproduces identical
// state and identical rendered markup, run after run.

import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { renderApp } from "../src/render.js";
import { Action, initialState, replay } from "../src/state.js";

const LOG_PATH = new URL("./fixtures/replay_log.json", import.meta.url);

function loadLog(): Action[] {
  return JSON.parse(readFileSync(LOG_PATH, "utf-8")) as Action[];
}

describe("recorded log replay", () => {
  it("reproduces identical state on every fold", () => {
    const log = loadLog();
    const first = replay(log, initialState);
    const second = replay(log, initialState);
    expect(second).toEqual(first);
    expect(JSON.stringify(second)).toBe(JSON.stringify(first));
  });

  it("reproduces identical rendered markup", () => {
    const log = loadLog();
    const clock = 1700000200000;
    const a = renderApp(replay(log, initialState), clock);
    const b = renderApp(replay(log, initialState), clock);
    expect(b).toBe(a);
  });

  it("replayed state reflects the recorded session faithfully", () => {
    const state = replay(loadLog(), initialState);
    // three alerts, newest first
    expect(state.alerts.map((a) => a.alert_id)).toEqual([
      "alert-000003", "alert-000002", "alert-000001",
    ]);
    // the acknowledged transition stuck; the illegal resolve rolled back
    expect(state.alerts.find((a) => a.alert_id === "alert-000003")?.status)
      .toBe("acknowledged");
    expect(state.alerts.find((a) => a.alert_id === "alert-000002")?.status)
      .toBe("open");
    expect(state.toasts.at(-1)?.text).toContain("cannot resolve");
    // rules: snapshot rule plus the added vehicle rule
    expect(state.rules.map((r) => r.rule_id)).toEqual(["r-person", "r-vehicle"]);
    // the stream saw 4 frames then ended
    const stream = state.streams["drone-1-stream-0001"];
    expect(stream?.lastSeq).toBe(4);
    expect(stream?.active).toBe(false);
    expect(stream?.patternSeed).toBe("skywatch:drone-1-stream-0001/4");
    // analysis attached to the detection from the snapshot-era alert
    expect(state.analyses["det-000003"]).toContain("perimeter fence");
    expect(state.metrics["drone-1"]?.["cpu_fraction"]).toBe(0.99);
    expect(state.connection).toBe("closed");
    expect(state.pendingAcks).toHaveLength(0);
  });

  it("prefix replays compose: fold(log) == fold(fold(prefix), rest)", () => {
    const log = loadLog();
    const mid = Math.floor(log.length / 2);
    const direct = replay(log, initialState);
    const staged = replay(log.slice(mid), replay(log.slice(0, mid), initialState));
    expect(staged).toEqual(direct);
  });
});
