#!/usr/bin/env node
/**
 * Figure regeneration from the solver's CSV files.
 *
 *   rtlod-plot convergence results.csv -o convergence.svg
 *   rtlod-plot decay decay_correctors.csv -o decay.svg
 *   rtlod-plot field field_reference.csv -o field.svg
 *
 * The scripts are read-only consumers of the CSV contract; regenerating
 * from the same file yields an identical image.
 */

import { writeFileSync } from 'fs';
import { readDecay, readField, readResults } from './csv.js';
import { convergenceOption } from './convergence.js';
import { decayOption } from './decay.js';
import { fieldOption } from './field.js';
import { renderSvg } from './render.js';

const KINDS = ['convergence', 'decay', 'field'] as const;
type Kind = (typeof KINDS)[number];

export function buildSvg(kind: Kind, csvPath: string): string {
  switch (kind) {
    case 'convergence':
      return renderSvg(convergenceOption(readResults(csvPath)));
    case 'decay':
      return renderSvg(decayOption(readDecay(csvPath)), { width: 640, height: 440 });
    case 'field': {
      const rows = readField(csvPath);
      const size = { width: 620, height: 640 };
      return renderSvg(fieldOption(rows, size), size);
    }
  }
}

export function main(argv: string[]): number {
  const args = [...argv];
  let out = 'plot.svg';
  const oIdx = args.findIndex((a) => a === '-o' || a === '--out');
  if (oIdx >= 0) {
    out = args[oIdx + 1];
    args.splice(oIdx, 2);
  }
  const [kind, csvPath] = args;
  if (!kind || !csvPath || !KINDS.includes(kind as Kind)) {
    console.error('usage: rtlod-plot <convergence|decay|field> <csv> -o <image.svg>');
    return 2;
  }
  const svg = buildSvg(kind as Kind, csvPath);
  writeFileSync(out, svg);
  console.log(`wrote ${out}`);
  return 0;
}

const isMain = process.argv[1] && import.meta.url.endsWith(process.argv[1].split('/').pop()!);
if (isMain) {
  process.exit(main(process.argv.slice(2)));
}
