/**
 * Two-panel log-log convergence figure: relative velocity energy error and
 * relative pressure L2 error against the coarse mesh size, with slope-1
 * and slope-2 guide lines anchored at the first data point.
 */

import type { EChartsOption, SeriesOption } from 'echarts';
import { ResultRow } from './csv.js';

export class PlotDataError extends Error {}

export function guideLine(
  Hs: number[],
  anchor: number,
  slope: number
): [number, number][] {
  const H0 = Hs[0];
  return Hs.map((H) => [H, anchor * Math.pow(H / H0, slope)]);
}

function panel(
  rows: ResultRow[],
  column: 'err_u_energy' | 'err_p_l2',
  title: string,
  gridIndex: number
): SeriesOption[] {
  const pts: [number, number][] = rows.map((r) => [r.H, r[column]]);
  const Hs = pts.map((p) => p[0]);
  const series: SeriesOption[] = [
    {
      name: title,
      type: 'line',
      xAxisIndex: gridIndex,
      yAxisIndex: gridIndex,
      data: pts,
      symbol: 'circle',
      symbolSize: 7,
      lineStyle: { width: 2 },
    },
  ];
  for (const slope of [1, 2]) {
    series.push({
      name: `slope ${slope}`,
      type: 'line',
      xAxisIndex: gridIndex,
      yAxisIndex: gridIndex,
      data: guideLine(Hs, pts[0][1], slope),
      symbol: 'none',
      lineStyle: { type: 'dashed', width: 1 },
      color: slope === 1 ? '#999999' : '#444444',
    });
  }
  return series;
}

export function convergenceOption(rows: ResultRow[]): EChartsOption {
  if (rows.length < 2) {
    throw new PlotDataError(
      `need at least 2 result rows to draw convergence, got ${rows.length}`
    );
  }
  const sorted = [...rows].sort((a, b) => b.H - a.H);
  const logAxis = { type: 'log' as const, name: 'H', nameLocation: 'middle' as const };
  return {
    title: [
      { text: 'velocity energy error', left: '18%', textStyle: { fontSize: 13 } },
      { text: 'pressure L2 error', left: '68%', textStyle: { fontSize: 13 } },
    ],
    grid: [
      { left: '7%', right: '55%', top: 50, bottom: 45 },
      { left: '57%', right: '5%', top: 50, bottom: 45 },
    ],
    xAxis: [
      { ...logAxis, gridIndex: 0 },
      { ...logAxis, gridIndex: 1 },
    ],
    yAxis: [
      { type: 'log', gridIndex: 0 },
      { type: 'log', gridIndex: 1 },
    ],
    legend: { bottom: 0 },
    series: [
      ...panel(sorted, 'err_u_energy', 'velocity', 0),
      ...panel(sorted, 'err_p_l2', 'pressure', 1),
    ],
  };
}
