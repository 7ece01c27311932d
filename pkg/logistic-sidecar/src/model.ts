import { readFileSync } from "node:fs";

/**
 * A binary logistic model. Weights align positionally with the feature list
 * of each incoming request, so every request must carry exactly
 * weights.length features.
 */
export interface LinearModel {
  modelId: string;
  weights: number[];
  bias: number;
  threshold: number;
  labels: [string, string]; // [negative, positive]
}

function isFiniteNumber(value: unknown): value is number {
  return typeof value === "number" && Number.isFinite(value);
}

export function parseModel(raw: unknown): LinearModel {
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new Error("model: top level must be an object");
  }
  const obj = raw as Record<string, unknown>;
  const weights = obj.weights;
  if (!Array.isArray(weights) || weights.length === 0 || !weights.every(isFiniteNumber)) {
    throw new Error("model: weights must be a non-empty array of finite numbers");
  }
  if (!isFiniteNumber(obj.bias)) {
    throw new Error("model: bias must be a finite number");
  }
  const threshold = obj.threshold === undefined ? 0.5 : obj.threshold;
  if (!isFiniteNumber(threshold)) {
    throw new Error("model: threshold must be a finite number");
  }
  const labels = obj.labels;
  if (
    !Array.isArray(labels) ||
    labels.length !== 2 ||
    !labels.every((l) => typeof l === "string" && l.length > 0) ||
    labels[0] === labels[1]
  ) {
    throw new Error("model: labels must be two distinct non-empty strings");
  }
  const modelId = obj.model_id === undefined ? "linear" : obj.model_id;
  if (typeof modelId !== "string" || modelId.length === 0) {
    throw new Error("model: model_id must be a non-empty string");
  }
  return {
    modelId,
    weights: weights.slice(),
    bias: obj.bias,
    threshold,
    labels: [labels[0] as string, labels[1] as string],
  };
}

export function loadModel(path: string): LinearModel {
  let raw: unknown;
  try {
    raw = JSON.parse(readFileSync(path, "utf-8"));
  } catch (err) {
    throw new Error(`model: cannot read ${path}: ${(err as Error).message}`);
  }
  return parseModel(raw);
}

export interface RowScore {
  label: string;
  probability: number;
}

/**
 * logistic(bias + sum of weight*value). A null where the weight is nonzero
 * cannot be scored; a null at a zero weight contributes nothing, mirroring
 * how the rule-based sidecar ignores nulls in unreferenced features.
 */
export function scoreRow(model: LinearModel, values: (number | null)[]): RowScore | null {
  let z = model.bias;
  for (let i = 0; i < model.weights.length; i++) {
    const weight = model.weights[i] as number;
    const value = values[i];
    if (value === null || value === undefined) {
      if (weight !== 0) {
        return null;
      }
      continue;
    }
    z += weight * value;
  }
  const probability = 1.0 / (1.0 + Math.exp(-z));
  const label = probability >= model.threshold ? model.labels[1] : model.labels[0];
  return { label, probability };
}
