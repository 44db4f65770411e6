/** The five figure kinds, each a pure function from parsed logs to an SVG
 *  string, plus render() which does the file I/O around them.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import {
  MissingMetricError,
  RunDir,
  lastValue,
  readManifest,
  readMlpBand,
  readRunDir,
  series,
  stepsToTarget,
  streamNames,
} from "./logs.js";
import { Chart, PALETTE, extent } from "./svg.js";

export type FigureKind =
  | "curriculum"
  | "frontier"
  | "lr_flow"
  | "mlp_band"
  | "method_comparison";

export interface FigureSpec {
  kind: FigureKind;
  /** Run directory, sweep directory, or mlp_band.json path, by kind. */
  inputs: string[];
  output: string;
}

function requireInputs(spec: FigureSpec, n: number, what: string): void {
  if (spec.inputs.length !== n) {
    throw new Error(`figure '${spec.kind}' needs ${n} input(s) (${what}), got ${spec.inputs.length}`);
  }
}

/** Per-task exact-match traces over a sequential curriculum, with phase
 *  boundaries marked. Input: one curriculum run directory. */
export function curriculumFigure(run: RunDir): string {
  const tasks: string[] = run.meta.config?.tasks ?? [];
  if (tasks.length === 0) {
    throw new MissingMetricError(
      `run ${run.dir} has no tasks in meta.config; available streams: ` +
        streamNames(run.records).join(", "),
    );
  }
  const all = tasks.map((t) => series(run, "eval", `exact_match/${t}`));
  const xs = all.flatMap((s) => s.steps);
  const chart = new Chart(
    "Curriculum exact match by task",
    "training step",
    "exact match (accuracy)",
    extent(xs, 0.02),
    { min: -0.02, max: 1.05 },
  );
  const phase = series(run, "meta", "phase_start");
  for (const boundary of phase.steps.slice(1)) chart.vline(boundary);
  tasks.forEach((task, i) => {
    const color = PALETTE[i % PALETTE.length]!;
    chart.line(all[i]!.steps, all[i]!.values, color);
    chart.points(all[i]!.steps, all[i]!.values, color, 2);
    chart.legend(task, color);
  });
  return chart.render();
}

interface SweepRun {
  runId: string;
  run: RunDir;
}

function readSweep(sweepDir: string): SweepRun[] {
  return readManifest(sweepDir).map((entry) => ({
    runId: entry.run_id,
    // manifest 'dir' fields may be absolute paths from another machine;
    // resolve against the sweep directory we were handed
    run: readRunDir(path.join(sweepDir, entry.run_id)),
  }));
}

function lam(run: RunDir): number {
  return run.meta.config?.replay?.lam ?? 0;
}

function forgettingMetric(run: RunDir): string {
  const streams = streamNames(run.records);
  const m = streams.find((s) => s.startsWith("eval/forgetting/"));
  if (!m) {
    throw new MissingMetricError(
      `run ${run.dir} has no eval/forgetting/* stream; available: ` + streams.join(", "),
    );
  }
  return m.slice("eval/".length);
}

/** Learning/forgetting frontier across replay weights. Input: a sweep
 *  directory whose runs vary lambda. One point per run, legend ordered by
 *  lambda. */
export function frontierFigure(sweepDir: string): string {
  const runs = readSweep(sweepDir)
    .filter((r) => r.runId.startsWith("lam_") || r.run.meta.config?.replay !== undefined || lam(r.run) === 0)
    .sort((a, b) => lam(a.run) - lam(b.run));
  if (runs.length === 0) throw new MissingMetricError(`sweep ${sweepDir} has no runs`);
  const pts = runs.map(({ run }) => ({
    lam: lam(run),
    forgetting: lastValue(run, "eval", forgettingMetric(run)),
    downstream: lastValue(run, "eval", "loss/downstream"),
  }));
  const chart = new Chart(
    "Learning/forgetting frontier over replay weight",
    "forgetting on pretraining corpus (nats)",
    "downstream loss at stop (nats)",
    extent(pts.map((p) => p.forgetting)),
    extent(pts.map((p) => p.downstream)),
  );
  chart.line(pts.map((p) => p.forgetting), pts.map((p) => p.downstream), "#888888", { dash: "3 3", width: 1 });
  pts.forEach((p, i) => {
    const color = PALETTE[i % PALETTE.length]!;
    chart.points([p.forgetting], [p.downstream], color, 4);
    chart.legend(`lambda = ${p.lam}`, color);
  });
  return chart.render();
}

/** Steps-to-target against learning rate (log-log). Input: a sweep
 *  directory of constant-lr finetunes sharing a target loss. */
export function lrFlowFigure(sweepDir: string): string {
  const runs = readSweep(sweepDir).filter((r) => lam(r.run) === 0);
  const pts: { lr: number; steps: number }[] = [];
  for (const { run, runId } of runs) {
    const target = run.meta.config?.stopping?.target;
    if (typeof target !== "number") continue;
    const steps = stepsToTarget(run, target);
    if (steps === null) {
      throw new MissingMetricError(`run ${runId} never reached its target loss ${target}`);
    }
    pts.push({ lr: run.meta.config.optimizer.peak_lr, steps });
  }
  if (pts.length === 0) {
    throw new MissingMetricError(`sweep ${sweepDir} has no constant-lr runs with a target loss`);
  }
  pts.sort((a, b) => a.lr - b.lr);
  const chart = new Chart(
    "Steps to target loss vs learning rate",
    "learning rate",
    "steps to target",
    { min: pts[0]!.lr / 1.3, max: pts[pts.length - 1]!.lr * 1.3 },
    extent(pts.map((p) => p.steps), 0.15),
    { xLog: true, yLog: true },
  );
  chart.line(pts.map((p) => p.lr), pts.map((p) => p.steps), PALETTE[0]!);
  chart.points(pts.map((p) => p.lr), pts.map((p) => p.steps), PALETTE[0]!);
  pts.forEach((p) => {
    chart.text(p.lr, p.steps * 1.12, `lr x steps = ${(p.lr * p.steps).toFixed(3)}`);
  });
  return chart.render();
}

/** Median prediction and interquartile band of the 1-D regression demo.
 *  Input: mlp_band.json. */
export function mlpBandFigure(bandPath: string): string {
  const band = readMlpBand(bandPath);
  const chart = new Chart(
    `1-D regression predictions, lambda = ${band.lam} (${band.n_seeds} seeds)`,
    "x",
    "prediction",
    extent(band.x, 0.02),
    extent([...band.p25, ...band.p75]),
  );
  chart.xspan(band.old_region[0], band.old_region[1], PALETTE[1]!);
  chart.xspan(band.new_region[0], band.new_region[1], PALETTE[2]!);
  chart.band(band.x, band.p25, band.p75, PALETTE[0]!);
  chart.line(band.x, band.p50, PALETTE[0]!, { width: 2 });
  chart.legend("median", PALETTE[0]!);
  chart.legend("p25-p75 band", PALETTE[0]!);
  chart.legend("old region", PALETTE[1]!);
  chart.legend("new region", PALETTE[2]!);
  return chart.render();
}

/** Final forgetting per run, one bar each — compares replay methods or
 *  settings side by side. Input: a sweep directory. */
export function methodComparisonFigure(sweepDir: string): string {
  const runs = readSweep(sweepDir);
  if (runs.length === 0) throw new MissingMetricError(`sweep ${sweepDir} has no runs`);
  const bars = runs.map(({ runId, run }) => ({
    label: runId,
    value: lastValue(run, "eval", forgettingMetric(run)),
  }));
  const chart = new Chart(
    "Forgetting by run",
    "run",
    "forgetting on pretraining corpus (nats)",
    { min: -0.5, max: bars.length - 0.5 },
    extent([0, ...bars.map((b) => b.value)], 0.1),
  );
  bars.forEach((b, i) => {
    chart.bar(i, b.value, 28, PALETTE[i % PALETTE.length]!);
    chart.text(i, chart.yExtent.min + 0.02 * (chart.yExtent.max - chart.yExtent.min), b.label);
  });
  return chart.render();
}

export function renderFigure(spec: FigureSpec): string {
  switch (spec.kind) {
    case "curriculum":
      requireInputs(spec, 1, "curriculum run directory");
      return curriculumFigure(readRunDir(spec.inputs[0]!));
    case "frontier":
      requireInputs(spec, 1, "sweep directory");
      return frontierFigure(spec.inputs[0]!);
    case "lr_flow":
      requireInputs(spec, 1, "sweep directory");
      return lrFlowFigure(spec.inputs[0]!);
    case "mlp_band":
      requireInputs(spec, 1, "mlp_band.json path");
      return mlpBandFigure(spec.inputs[0]!);
    case "method_comparison":
      requireInputs(spec, 1, "sweep directory");
      return methodComparisonFigure(spec.inputs[0]!);
    default:
      throw new Error(`unknown figure kind '${(spec as FigureSpec).kind}'`);
  }
}

/** Render and write; nothing is written if rendering throws. */
export function render(spec: FigureSpec): void {
  const svg = renderFigure(spec);
  fs.mkdirSync(path.dirname(path.resolve(spec.output)), { recursive: true });
  fs.writeFileSync(spec.output, svg);
}
