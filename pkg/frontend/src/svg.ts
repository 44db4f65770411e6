/** Minimal deterministic SVG chart primitives.
 *
 *  No timestamps, random ids, or float noise: coordinates are formatted
 *  with fixed precision so identical inputs give byte-identical files.
 */

export interface Extent {
  min: number;
  max: number;
}

export function extent(values: number[], pad = 0.05): Extent {
  let min = Infinity;
  let max = -Infinity;
  for (const v of values) {
    if (!Number.isFinite(v)) continue;
    if (v < min) min = v;
    if (v > max) max = v;
  }
  if (!Number.isFinite(min)) {
    min = 0;
    max = 1;
  }
  if (min === max) {
    min -= 0.5;
    max += 0.5;
  }
  const span = max - min;
  return { min: min - pad * span, max: max + pad * span };
}

export const PALETTE = [
  "#4063d8",
  "#cb3c33",
  "#389826",
  "#9558b2",
  "#b8860b",
  "#17828c",
];

const W = 640;
const H = 420;
const MARGIN = { left: 64, right: 20, top: 36, bottom: 48 };

export function fmt(v: number): string {
  return Number(v.toFixed(2)).toString();
}

/** Human-oriented tick label: fixed for mid-range numbers, exponent otherwise. */
export function tickLabel(v: number): string {
  const a = Math.abs(v);
  if (v === 0) return "0";
  if (a >= 0.001 && a < 10000) return Number(v.toPrecision(4)).toString();
  return v.toExponential(1);
}

function ticks(e: Extent, n = 5): number[] {
  const out: number[] = [];
  for (let i = 0; i <= n; i++) out.push(e.min + ((e.max - e.min) * i) / n);
  return out;
}

export class Chart {
  private body: string[] = [];
  private legendEntries: { label: string; color: string }[] = [];
  readonly xExtent: Extent;
  readonly yExtent: Extent;
  private readonly xLog: boolean;
  private readonly yLog: boolean;

  constructor(
    private title: string,
    private xLabel: string,
    private yLabel: string,
    xExtent: Extent,
    yExtent: Extent,
    opts: { xLog?: boolean; yLog?: boolean } = {},
  ) {
    this.xLog = opts.xLog ?? false;
    this.yLog = opts.yLog ?? false;
    this.xExtent = this.xLog ? { min: Math.log10(xExtent.min), max: Math.log10(xExtent.max) } : xExtent;
    this.yExtent = this.yLog ? { min: Math.log10(yExtent.min), max: Math.log10(yExtent.max) } : yExtent;
  }

  x(v: number): number {
    const t = this.xLog ? Math.log10(v) : v;
    const f = (t - this.xExtent.min) / (this.xExtent.max - this.xExtent.min);
    return MARGIN.left + f * (W - MARGIN.left - MARGIN.right);
  }

  y(v: number): number {
    const t = this.yLog ? Math.log10(v) : v;
    const f = (t - this.yExtent.min) / (this.yExtent.max - this.yExtent.min);
    return H - MARGIN.bottom - f * (H - MARGIN.top - MARGIN.bottom);
  }

  line(xs: number[], ys: number[], color: string, opts: { dash?: string; width?: number } = {}): void {
    const pts = xs.map((x, i) => `${fmt(this.x(x))},${fmt(this.y(ys[i]!))}`).join(" ");
    const dash = opts.dash ? ` stroke-dasharray="${opts.dash}"` : "";
    this.body.push(
      `<polyline points="${pts}" fill="none" stroke="${color}" stroke-width="${opts.width ?? 1.5}"${dash}/>`,
    );
  }

  points(xs: number[], ys: number[], color: string, r = 3): void {
    for (let i = 0; i < xs.length; i++) {
      this.body.push(
        `<circle cx="${fmt(this.x(xs[i]!))}" cy="${fmt(this.y(ys[i]!))}" r="${r}" fill="${color}"/>`,
      );
    }
  }

  /** Filled band between two curves sharing the x grid. */
  band(xs: number[], lo: number[], hi: number[], color: string, opacity = 0.25): void {
    const fwd = xs.map((x, i) => `${fmt(this.x(x))},${fmt(this.y(hi[i]!))}`);
    const back = [...xs.keys()].reverse().map((i) => `${fmt(this.x(xs[i]!))},${fmt(this.y(lo[i]!))}`);
    this.body.push(
      `<polygon points="${[...fwd, ...back].join(" ")}" fill="${color}" fill-opacity="${opacity}" stroke="none"/>`,
    );
  }

  vline(x: number, color = "#999999", dash = "4 3"): void {
    const px = fmt(this.x(x));
    this.body.push(
      `<line x1="${px}" y1="${MARGIN.top}" x2="${px}" y2="${H - MARGIN.bottom}" stroke="${color}" stroke-dasharray="${dash}"/>`,
    );
  }

  /** Shade an x interval (used for the old/new data regions). */
  xspan(x0: number, x1: number, color: string, opacity = 0.08): void {
    const a = this.x(x0);
    const b = this.x(x1);
    this.body.push(
      `<rect x="${fmt(a)}" y="${MARGIN.top}" width="${fmt(b - a)}" height="${H - MARGIN.top - MARGIN.bottom}" fill="${color}" fill-opacity="${opacity}"/>`,
    );
  }

  bar(x: number, value: number, width: number, color: string): void {
    const y0 = this.y(Math.max(0, this.yExtent.min));
    const y1 = this.y(value);
    const top = Math.min(y0, y1);
    const h = Math.abs(y0 - y1);
    this.body.push(
      `<rect x="${fmt(this.x(x) - width / 2)}" y="${fmt(top)}" width="${width}" height="${fmt(h)}" fill="${color}"/>`,
    );
  }

  text(x: number, y: number, s: string, anchor = "middle", size = 11): void {
    this.body.push(
      `<text x="${fmt(this.x(x))}" y="${fmt(this.y(y))}" text-anchor="${anchor}" font-size="${size}">${escapeXml(s)}</text>`,
    );
  }

  legend(label: string, color: string): void {
    this.legendEntries.push({ label, color });
  }

  render(): string {
    const parts: string[] = [];
    parts.push(
      `<svg xmlns="http://www.w3.org/2000/svg" width="${W}" height="${H}" viewBox="0 0 ${W} ${H}" font-family="sans-serif">`,
    );
    parts.push(`<rect width="${W}" height="${H}" fill="white"/>`);
    parts.push(
      `<text x="${W / 2}" y="20" text-anchor="middle" font-size="14">${escapeXml(this.title)}</text>`,
    );
    // axes
    parts.push(
      `<line x1="${MARGIN.left}" y1="${H - MARGIN.bottom}" x2="${W - MARGIN.right}" y2="${H - MARGIN.bottom}" stroke="black"/>`,
      `<line x1="${MARGIN.left}" y1="${MARGIN.top}" x2="${MARGIN.left}" y2="${H - MARGIN.bottom}" stroke="black"/>`,
    );
    for (const t of ticks(this.xExtent)) {
      const raw = this.xLog ? Math.pow(10, t) : t;
      const fx = MARGIN.left + ((t - this.xExtent.min) / (this.xExtent.max - this.xExtent.min)) * (W - MARGIN.left - MARGIN.right);
      parts.push(
        `<line x1="${fmt(fx)}" y1="${H - MARGIN.bottom}" x2="${fmt(fx)}" y2="${H - MARGIN.bottom + 4}" stroke="black"/>`,
        `<text x="${fmt(fx)}" y="${H - MARGIN.bottom + 16}" text-anchor="middle" font-size="10">${escapeXml(tickLabel(raw))}</text>`,
      );
    }
    for (const t of ticks(this.yExtent)) {
      const raw = this.yLog ? Math.pow(10, t) : t;
      const fy = H - MARGIN.bottom - ((t - this.yExtent.min) / (this.yExtent.max - this.yExtent.min)) * (H - MARGIN.top - MARGIN.bottom);
      parts.push(
        `<line x1="${MARGIN.left - 4}" y1="${fmt(fy)}" x2="${MARGIN.left}" y2="${fmt(fy)}" stroke="black"/>`,
        `<text x="${MARGIN.left - 7}" y="${fmt(fy + 3)}" text-anchor="end" font-size="10">${escapeXml(tickLabel(raw))}</text>`,
      );
    }
    parts.push(
      `<text x="${(MARGIN.left + W - MARGIN.right) / 2}" y="${H - 10}" text-anchor="middle" font-size="12">${escapeXml(this.xLabel)}</text>`,
      `<text x="16" y="${(MARGIN.top + H - MARGIN.bottom) / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 ${(MARGIN.top + H - MARGIN.bottom) / 2})">${escapeXml(this.yLabel)}</text>`,
    );
    parts.push(...this.body);
    // legend in the top-right corner, entries in insertion order
    this.legendEntries.forEach((e, i) => {
      const ly = MARGIN.top + 14 + i * 16;
      const lx = W - MARGIN.right - 150;
      parts.push(
        `<line x1="${lx}" y1="${ly - 4}" x2="${lx + 18}" y2="${ly - 4}" stroke="${e.color}" stroke-width="2"/>`,
        `<text x="${lx + 24}" y="${ly}" font-size="11">${escapeXml(e.label)}</text>`,
      );
    });
    parts.push("</svg>");
    return parts.join("\n") + "\n";
  }
}

export function escapeXml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}
