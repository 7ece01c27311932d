import { LinearModel, scoreRow } from "./model.js";

export const PROTOCOL_VERSION = "1";

export interface RequestRow {
  row_index: number;
  values: (number | null)[];
  test_ids: string[];
}

export interface SidecarRequest {
  protocol_version: string;
  classifier_id: string;
  features: string[];
  rows: RequestRow[];
}

export type Prediction =
  | { row_index: number; prediction: string }
  | { row_index: number; error: string };

export interface SidecarResponse {
  protocol_version: string;
  predictions: Prediction[];
}

/** Raised for anything that should end in an HTTP 400. */
export class ProtocolError extends Error {}

function fail(message: string): never {
  throw new ProtocolError(message);
}

export function parseRequest(body: string): SidecarRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(body);
  } catch {
    fail("body is not valid JSON");
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    fail("body must be a JSON object");
  }
  const obj = raw as Record<string, unknown>;
  if (obj.protocol_version !== PROTOCOL_VERSION) {
    fail("unsupported protocol version");
  }
  if (typeof obj.classifier_id !== "string" || obj.classifier_id.length === 0) {
    fail("classifier_id must be a non-empty string");
  }
  const features = obj.features;
  if (!Array.isArray(features) || !features.every((f) => typeof f === "string")) {
    fail("features must be a list of strings");
  }
  const rows = obj.rows;
  if (!Array.isArray(rows)) {
    fail("rows must be a list");
  }
  const parsedRows = rows.map((row, i) => parseRow(row, i, features.length));
  return {
    protocol_version: PROTOCOL_VERSION,
    classifier_id: obj.classifier_id,
    features: features as string[],
    rows: parsedRows,
  };
}

function parseRow(raw: unknown, position: number, featureCount: number): RequestRow {
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    fail(`rows[${position}] must be an object`);
  }
  const row = raw as Record<string, unknown>;
  if (typeof row.row_index !== "number" || !Number.isInteger(row.row_index)) {
    fail(`rows[${position}].row_index must be an integer`);
  }
  const values = row.values;
  if (
    !Array.isArray(values) ||
    !values.every((v) => v === null || (typeof v === "number" && Number.isFinite(v)))
  ) {
    fail(`rows[${position}].values must be numbers or nulls`);
  }
  if (values.length !== featureCount) {
    fail(`rows[${position}].values has ${values.length} entries for ${featureCount} features`);
  }
  const testIds = row.test_ids;
  if (!Array.isArray(testIds) || !testIds.every((t) => typeof t === "string")) {
    fail(`rows[${position}].test_ids must be a list of strings`);
  }
  return {
    row_index: row.row_index,
    values: values as (number | null)[],
    test_ids: testIds as string[],
  };
}

export function predict(request: SidecarRequest, model: LinearModel): SidecarResponse {
  if (request.features.length !== model.weights.length) {
    fail(
      `model scores ${model.weights.length} features, request carries ${request.features.length}`
    );
  }
  const predictions: Prediction[] = request.rows.map((row) => {
    const scored = scoreRow(model, row.values);
    if (scored === null) {
      return { row_index: row.row_index, error: "null value in weighted feature" };
    }
    return { row_index: row.row_index, prediction: scored.label };
  });
  return { protocol_version: PROTOCOL_VERSION, predictions };
}
