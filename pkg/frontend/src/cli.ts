/** Command-line figure rendering.
 *
 *  Either flags:
 *      replaylab-plots --kind curriculum --input runs/curriculum/replay --out fig.svg
 *  or a spec file holding {kind, inputs, output}:
 *      replaylab-plots --spec figure.json
 */

import * as fs from "node:fs";

import { FigureSpec, render } from "./figures.js";

function parseArgs(argv: string[]): FigureSpec {
  const flags = new Map<string, string[]>();
  let key: string | null = null;
  for (const arg of argv) {
    if (arg.startsWith("--")) {
      key = arg.slice(2);
      if (!flags.has(key)) flags.set(key, []);
    } else if (key !== null) {
      flags.get(key)!.push(arg);
    } else {
      throw new Error(`unexpected positional argument '${arg}'`);
    }
  }
  const specPath = flags.get("spec")?.[0];
  if (specPath !== undefined) {
    return JSON.parse(fs.readFileSync(specPath, "utf8")) as FigureSpec;
  }
  const kind = flags.get("kind")?.[0];
  const inputs = flags.get("input") ?? [];
  const output = flags.get("out")?.[0];
  if (!kind || inputs.length === 0 || !output) {
    throw new Error("need --kind, --input, and --out (or --spec spec.json)");
  }
  return { kind: kind as FigureSpec["kind"], inputs, output };
}

export function main(argv: string[]): number {
  let spec: FigureSpec;
  try {
    spec = parseArgs(argv);
    render(spec);
  } catch (e) {
    const err = e as Error;
    console.error(`${err.name}: ${err.message}`);
    return 1;
  }
  console.log(`wrote ${spec.output}`);
  return 0;
}

if (process.argv[1] && import.meta.url === new URL(`file://${process.argv[1]}`).href) {
  process.exit(main(process.argv.slice(2)));
}
