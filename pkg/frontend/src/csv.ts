/**
 * Typed readers for the solver's CSV outputs.
 *
 * Three schemas are consumed (documented in the solver README):
 *   results.csv          experiment,H,h,m,ell,err_u_energy,err_p_l2,err_div,runtime_s
 *   decay_*.csv          element,quantity,m,value
 *   field_*.csv          x,y,magnitude
 *
 * Parsing is read-only and strict: a missing or malformed column raises
 * a SchemaError naming it.
 */

import { readFileSync } from 'fs';
import Papa from 'papaparse';

export class SchemaError extends Error {}

export interface ResultRow {
  experiment: string;
  H: number;
  h: number;
  m: string;
  ell: string;
  err_u_energy: number;
  err_p_l2: number;
  err_div: number;
}

export interface DecayRow {
  element: number;
  quantity: 'tail' | 'localization';
  m: number;
  value: number;
}

export interface FieldRow {
  x: number;
  y: number;
  magnitude: number;
}

function parseRows(path: string): Record<string, string>[] {
  const text = readFileSync(path, 'utf8');
  const parsed = Papa.parse<Record<string, string>>(text.trim(), {
    header: true,
    skipEmptyLines: true,
  });
  if (parsed.errors.length > 0) {
    throw new SchemaError(`${path}: ${parsed.errors[0].message}`);
  }
  return parsed.data;
}

function num(row: Record<string, string>, column: string, path: string): number {
  const raw = row[column];
  if (raw === undefined) {
    throw new SchemaError(`${path}: missing column '${column}'`);
  }
  const value = Number(raw);
  if (!Number.isFinite(value)) {
    throw new SchemaError(`${path}: column '${column}' has non-numeric entry '${raw}'`);
  }
  return value;
}

export function readResults(path: string): ResultRow[] {
  return parseRows(path).map((row) => ({
    experiment: row.experiment ?? '',
    H: num(row, 'H', path),
    h: num(row, 'h', path),
    m: row.m ?? '',
    ell: row.ell ?? '',
    err_u_energy: num(row, 'err_u_energy', path),
    err_p_l2: num(row, 'err_p_l2', path),
    err_div: num(row, 'err_div', path),
  }));
}

export function readDecay(path: string): DecayRow[] {
  return parseRows(path).map((row) => {
    const quantity = row.quantity;
    if (quantity !== 'tail' && quantity !== 'localization') {
      throw new SchemaError(`${path}: column 'quantity' has unknown entry '${quantity}'`);
    }
    return {
      element: num(row, 'element', path),
      quantity,
      m: num(row, 'm', path),
      value: num(row, 'value', path),
    };
  });
}

export function readField(path: string): FieldRow[] {
  return parseRows(path).map((row) => ({
    x: num(row, 'x', path),
    y: num(row, 'y', path),
    magnitude: num(row, 'magnitude', path),
  }));
}
