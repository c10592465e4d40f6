/**
 * Semilog-y decay figure: corrector tail norms and localization errors
 * against the patch layer count, one line per (element, quantity).
 */

import type { EChartsOption, SeriesOption } from 'echarts';
import { DecayRow } from './csv.js';
import { PlotDataError } from './convergence.js';

export function decayOption(rows: DecayRow[]): EChartsOption {
  if (rows.length === 0) {
    throw new PlotDataError('decay CSV holds no rows');
  }
  const groups = new Map<string, [number, number][]>();
  for (const r of rows) {
    const key = `element ${r.element} ${r.quantity}`;
    if (!groups.has(key)) groups.set(key, []);
    if (r.value > 0) groups.get(key)!.push([r.m, r.value]);
  }
  const series: SeriesOption[] = [...groups.entries()].map(([name, data]) => ({
    name,
    type: 'line',
    data: data.sort((a, b) => a[0] - b[0]),
    symbol: name.includes('tail') ? 'circle' : 'diamond',
    symbolSize: 7,
    lineStyle: { type: name.includes('tail') ? 'solid' : 'dashed' },
  }));
  return {
    grid: { left: 70, right: 30, top: 40, bottom: 60 },
    xAxis: { type: 'value', name: 'patch layers m', nameLocation: 'middle', nameGap: 28 },
    yAxis: { type: 'log', name: 'energy norm' },
    legend: { bottom: 0 },
    series,
  };
}
