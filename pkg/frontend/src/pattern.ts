// Test-pattern rendering for synthetic stream frames: the payload is not
// real video, so liveness and ordering are shown as deterministic color
// bars derived from the frame header and sequence number.

export interface PatternContext {
  fillStyle: unknown;
  font: string;
  fillRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
}

export interface PatternCanvas {
  width: number;
  height: number;
  getContext(kind: "2d"): PatternContext | null;
}

function hashString(text: string): number {
  let h = 2166136261;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 16777619);
  }
  return h >>> 0;
}

export function drawTestPattern(canvas: PatternCanvas, seed: string, frameSeq: number): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const bars = 8;
  const barWidth = canvas.width / bars;
  const base = hashString(seed);
  for (let i = 0; i < bars; i++) {
    const hue = (base + i * 47 + frameSeq * 31) % 360;
    ctx.fillStyle = `hsl(${hue}, 70%, 50%)`;
    ctx.fillRect(i * barWidth, 0, Math.ceil(barWidth), canvas.height);
  }
  ctx.fillStyle = "#ffffff";
  ctx.font = "16px monospace";
  ctx.fillText(`#${frameSeq}`, 8, 22);
  ctx.fillText(seed, 8, canvas.height - 10);
}
