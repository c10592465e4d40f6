/**
 * Heatmap of per-cell velocity magnitudes: one colored marker per fine
 * cell centroid, sized from the centroid spacing so the markers tile the
 * domain visually.
 */

import type { EChartsOption } from 'echarts';
import { FieldRow } from './csv.js';
import { PlotDataError } from './convergence.js';

function spacing(values: number[]): number {
  const uniq = [...new Set(values)].sort((a, b) => a - b);
  if (uniq.length < 2) return 1;
  let gap = Infinity;
  for (let i = 1; i < uniq.length; i++) gap = Math.min(gap, uniq[i] - uniq[i - 1]);
  return gap;
}

export function fieldOption(rows: FieldRow[], size = { width: 600, height: 600 }): EChartsOption {
  if (rows.length === 0) {
    throw new PlotDataError('field CSV holds no rows');
  }
  const xs = rows.map((r) => r.x);
  const ys = rows.map((r) => r.y);
  const mags = rows.map((r) => r.magnitude);
  const xmin = Math.min(...xs);
  const xmax = Math.max(...xs);
  const ymin = Math.min(...ys);
  const ymax = Math.max(...ys);
  const cells = Math.round((xmax - xmin) / spacing(xs)) + 2;
  const symbolPx = Math.max(2, Math.ceil((size.width - 140) / cells));
  return {
    grid: { left: 60, right: 80, top: 30, bottom: 50 },
    xAxis: { type: 'value', min: xmin, max: xmax },
    yAxis: { type: 'value', min: ymin, max: ymax },
    visualMap: {
      min: 0,
      max: Math.max(...mags),
      calculable: false,
      orient: 'vertical',
      right: 5,
      top: 'center',
      inRange: { color: ['#0c0d8c', '#2a9df4', '#f9ea3b', '#d7191c'] },
    },
    series: [
      {
        type: 'scatter',
        symbol: 'rect',
        symbolSize: symbolPx,
        data: rows.map((r) => [r.x, r.y, r.magnitude]),
        emphasis: { disabled: true },
      },
    ],
  };
}
