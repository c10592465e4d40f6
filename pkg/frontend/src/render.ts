/** Headless echarts rendering: option object in, SVG string out. */

import * as echarts from 'echarts';

export interface RenderSize {
  width?: number;
  height?: number;
}

export function renderSvg(option: echarts.EChartsOption, size: RenderSize = {}): string {
  const chart = echarts.init(null, null, {
    renderer: 'svg',
    ssr: true,
    width: size.width ?? 900,
    height: size.height ?? 420,
  });
  // fixed animation-free rendering keeps output byte-stable across runs
  chart.setOption({ animation: false, ...option });
  const svg = chart.renderToSVGString();
  chart.dispose();
  // internal ids and style-class numbers carry per-process counters;
  // renumber them by first appearance so regenerating the same CSV
  // gives identical bytes
  let out = svg.replace(/zr\d+-/g, 'zr-');
  const seen = new Map<string, string>();
  out = out.replace(/zr-cls-(\d+)/g, (match) => {
    if (!seen.has(match)) seen.set(match, `zr-cls-${seen.size}`);
    return seen.get(match)!;
  });
  return out;
}
