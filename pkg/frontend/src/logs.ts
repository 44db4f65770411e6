/** Readers for the run-log formats the training package writes:
 *  metrics.jsonl, meta.json, sweep manifest.json, and mlp_band.json.
 *  Everything fails loudly: a truncated or malformed file raises
 *  LogParseError, a missing metric stream raises MissingMetricError
 *  listing what is actually present.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export class LogParseError extends Error {
  override name = "LogParseError";
}

export class MissingMetricError extends Error {
  override name = "MissingMetricError";
}

export interface MetricRecord {
  step: number;
  split: string;
  metric: string;
  value: number;
  wall_ms: number;
}

export interface RunMeta {
  config_hash: string;
  version: string;
  outcome: string | null;
  config: Record<string, any>;
}

export interface RunDir {
  dir: string;
  meta: RunMeta;
  records: MetricRecord[];
}

const RECORD_FIELDS = ["step", "split", "metric", "value"] as const;

export function parseMetricsJsonl(filePath: string): MetricRecord[] {
  let text: string;
  try {
    text = fs.readFileSync(filePath, "utf8");
  } catch (e) {
    throw new LogParseError(`cannot read ${filePath}: ${(e as Error).message}`);
  }
  const records: MetricRecord[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i]!.trim();
    if (line === "") continue;
    let rec: any;
    try {
      rec = JSON.parse(line);
    } catch {
      throw new LogParseError(
        `${filePath}:${i + 1}: not valid JSON (truncated log?): ${line.slice(0, 80)}`,
      );
    }
    for (const field of RECORD_FIELDS) {
      if (!(field in rec)) {
        throw new LogParseError(`${filePath}:${i + 1}: record missing '${field}'`);
      }
    }
    records.push(rec as MetricRecord);
  }
  if (records.length === 0) {
    throw new LogParseError(`${filePath}: no metric records`);
  }
  return records;
}

export function readRunDir(dir: string): RunDir {
  const metaPath = path.join(dir, "meta.json");
  let meta: RunMeta;
  try {
    meta = JSON.parse(fs.readFileSync(metaPath, "utf8"));
  } catch (e) {
    throw new LogParseError(`cannot read ${metaPath}: ${(e as Error).message}`);
  }
  const records = parseMetricsJsonl(path.join(dir, "metrics.jsonl"));
  return { dir, meta, records };
}

export function streamNames(records: MetricRecord[]): string[] {
  const names = new Set<string>();
  for (const r of records) names.add(`${r.split}/${r.metric}`);
  return [...names].sort();
}

/** All (step, value) pairs of one metric stream, in log order. */
export function series(
  run: RunDir,
  split: string,
  metric: string,
): { steps: number[]; values: number[] } {
  const steps: number[] = [];
  const values: number[] = [];
  for (const r of run.records) {
    if (r.split === split && r.metric === metric) {
      steps.push(r.step);
      values.push(r.value);
    }
  }
  if (steps.length === 0) {
    throw new MissingMetricError(
      `run ${run.dir} has no stream '${split}/${metric}'; available: ` +
        streamNames(run.records).join(", "),
    );
  }
  return { steps, values };
}

export function lastValue(run: RunDir, split: string, metric: string): number {
  const { values } = series(run, split, metric);
  return values[values.length - 1]!;
}

/** First eval step at-or-below the target loss, or null if never reached. */
export function stepsToTarget(
  run: RunDir,
  target: number,
  metric = "loss/downstream",
): number | null {
  const { steps, values } = series(run, "eval", metric);
  for (let i = 0; i < steps.length; i++) {
    if (values[i]! <= target) return steps[i]!;
  }
  return null;
}

export interface ManifestEntry {
  run_id: string;
  dir: string;
  outcome: string;
  [k: string]: any;
}

export function readManifest(sweepDir: string): ManifestEntry[] {
  const p = path.join(sweepDir, "manifest.json");
  let manifest: any;
  try {
    manifest = JSON.parse(fs.readFileSync(p, "utf8"));
  } catch (e) {
    throw new LogParseError(`cannot read ${p}: ${(e as Error).message}`);
  }
  if (!Array.isArray(manifest.runs)) {
    throw new LogParseError(`${p}: expected top-level 'runs' array`);
  }
  return manifest.runs;
}

export interface MlpBand {
  kind: string;
  lam: number;
  n_seeds: number;
  old_region: [number, number];
  new_region: [number, number];
  x: number[];
  per_seed: number[][];
  p25: number[];
  p50: number[];
  p75: number[];
}

export function readMlpBand(filePath: string): MlpBand {
  let band: any;
  try {
    band = JSON.parse(fs.readFileSync(filePath, "utf8"));
  } catch (e) {
    throw new LogParseError(`cannot read ${filePath}: ${(e as Error).message}`);
  }
  for (const field of ["x", "p25", "p50", "p75", "old_region", "new_region"]) {
    if (!(field in band)) {
      throw new LogParseError(
        `${filePath}: missing '${field}'; present: ${Object.keys(band).sort().join(", ")}`,
      );
    }
  }
  const n = band.x.length;
  for (const field of ["p25", "p50", "p75"]) {
    if (band[field].length !== n) {
      throw new LogParseError(`${filePath}: '${field}' length ${band[field].length} != x length ${n}`);
    }
  }
  return band as MlpBand;
}
