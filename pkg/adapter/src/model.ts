/**
 * Tiny character-level cache language model.
 *
 * The model is a trainable bigram logit table plus a fixed "cache" feature
 * that boosts characters already seen earlier in the text.  Logits are
 * linear in the trainable table, so full-batch gradient descent with a
 * small learning rate cannot increase the training loss — which keeps the
 * trainer hook's behavior easy to verify.  Scoring is teacher-forced and
 * fully deterministic: a model reference alone reproduces the weights.
 */

import { mkdirSync, readFileSync, renameSync, statSync, writeFileSync } from "node:fs";
import { join } from "node:path";

// ---- Vocabulary ----

// Printable ASCII plus newline, one out-of-vocabulary bucket, and a
// beginning-of-sequence marker used as the first scoring position.
const PRINTABLE_LOW = 32;
const PRINTABLE_HIGH = 126;
const NEWLINE_ID = PRINTABLE_HIGH - PRINTABLE_LOW + 1;
const OOV_ID = NEWLINE_ID + 1;
export const BOS_ID = OOV_ID + 1;
export const VOCAB_SIZE = BOS_ID + 1;

export function encode(text: string): number[] {
  const ids: number[] = [];
  for (const ch of text) {
    const code = ch.codePointAt(0) ?? 0;
    if (code >= PRINTABLE_LOW && code <= PRINTABLE_HIGH) {
      ids.push(code - PRINTABLE_LOW);
    } else if (ch === "\n") {
      ids.push(NEWLINE_ID);
    } else {
      ids.push(OOV_ID);
    }
  }
  return ids;
}

// ---- Seeded initialization ----

function mulberry32(seed: number): () => number {
  let s = seed | 0;
  return () => {
    s = (s + 0x6d2b79f5) | 0;
    let t = Math.imul(s ^ (s >>> 15), 1 | s);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

// ---- Model ----

export const CACHE_WEIGHT = 8.0;
const INIT_SCALE = 0.02;
const WEIGHTS_FORMAT = "char-cache-lm-v1";

export interface CharLm {
  baseRef: string;
  weights: Float64Array;
}

/** Derive a model purely from its reference string; same ref, same weights. */
export function deriveModel(ref: string): CharLm {
  const rng = mulberry32(fnv1a(ref));
  const weights = new Float64Array(VOCAB_SIZE * VOCAB_SIZE);
  for (let i = 0; i < weights.length; i++) {
    const u1 = rng();
    const u2 = rng();
    weights[i] = INIT_SCALE * Math.sqrt(-2 * Math.log(1 - u1)) * Math.cos(2 * Math.PI * u2);
  }
  return { baseRef: ref, weights };
}

function logSoftmaxAt(logits: Float64Array, target: number): number {
  let max = -Infinity;
  for (let i = 0; i < logits.length; i++) {
    if (logits[i] > max) max = logits[i];
  }
  let sum = 0;
  for (let i = 0; i < logits.length; i++) {
    sum += Math.exp(logits[i] - max);
  }
  return logits[target] - max - Math.log(sum);
}

function positionLogits(
  model: CharLm,
  prev: number,
  counts: Float64Array,
  seen: number,
): Float64Array {
  const logits = new Float64Array(VOCAB_SIZE);
  const row = prev * VOCAB_SIZE;
  const scale = seen > 0 ? CACHE_WEIGHT / seen : 0;
  for (let k = 0; k < VOCAB_SIZE; k++) {
    logits[k] = model.weights[row + k] + scale * counts[k];
  }
  return logits;
}

/**
 * Per-character log-probabilities of the continuation given the context,
 * teacher-forced left to right.  The cache covers everything before each
 * position, context and already-scored continuation alike.
 */
export function scoreContinuation(
  model: CharLm,
  context: string,
  continuation: string,
): number[] {
  const ids = [BOS_ID, ...encode(context), ...encode(continuation)];
  const contextEnd = 1 + encode(context).length;
  const counts = new Float64Array(VOCAB_SIZE);
  const logprobs: number[] = [];
  for (let pos = 1; pos < ids.length; pos++) {
    const logits = positionLogits(model, ids[pos - 1], counts, pos - 1);
    if (pos >= contextEnd) {
      logprobs.push(logSoftmaxAt(logits, ids[pos]));
    }
    counts[ids[pos]] += 1;
  }
  return logprobs;
}

// ---- Training ----

export interface TrainSettings {
  trainSteps: number;
  learningRate: number;
  batchSize: number;
}

export const DEFAULT_LEARNING_RATE = 1e-5;
export const DEFAULT_BATCH_SIZE = 4;

export interface SupervisedExample {
  context: string;
  target: string;
}

/** Mean negative log-likelihood per target character over the examples. */
export function exampleLoss(model: CharLm, examples: SupervisedExample[]): number {
  let total = 0;
  let count = 0;
  for (const example of examples) {
    for (const lp of scoreContinuation(model, example.context, example.target)) {
      total -= lp;
      count += 1;
    }
  }
  if (count === 0) throw new Error("no target characters to measure loss on");
  return total / count;
}

/**
 * Plain gradient descent on the bigram table; the cache feature is data,
 * not parameters.  Each step takes one batch, cycling through the examples
 * in order so equal inputs train identically.
 */
export function train(
  model: CharLm,
  examples: SupervisedExample[],
  settings: TrainSettings,
): void {
  if (examples.length === 0) throw new Error("no training examples");
  const grad = new Float64Array(VOCAB_SIZE * VOCAB_SIZE);
  for (let step = 0; step < settings.trainSteps; step++) {
    grad.fill(0);
    let targetChars = 0;
    const batch: SupervisedExample[] = [];
    for (let j = 0; j < settings.batchSize; j++) {
      const example = examples[(step * settings.batchSize + j) % examples.length];
      batch.push(example);
      targetChars += encode(example.target).length;
    }
    if (targetChars === 0) continue;
    for (const example of batch) {
      const ids = [BOS_ID, ...encode(example.context), ...encode(example.target)];
      const contextEnd = 1 + encode(example.context).length;
      const counts = new Float64Array(VOCAB_SIZE);
      for (let pos = 1; pos < ids.length; pos++) {
        const prev = ids[pos - 1];
        if (pos >= contextEnd) {
          const logits = positionLogits(model, prev, counts, pos - 1);
          const max = Math.max(...logits);
          let sum = 0;
          for (let k = 0; k < VOCAB_SIZE; k++) sum += Math.exp(logits[k] - max);
          const row = prev * VOCAB_SIZE;
          for (let k = 0; k < VOCAB_SIZE; k++) {
            const prob = Math.exp(logits[k] - max) / sum;
            grad[row + k] += (prob - (k === ids[pos] ? 1 : 0)) / targetChars;
          }
        }
        counts[ids[pos]] += 1;
      }
    }
    for (let i = 0; i < grad.length; i++) {
      model.weights[i] -= settings.learningRate * grad[i];
    }
  }
}

// ---- Persistence ----

/** Write the model under `dir` and return the weights file path. */
export function saveModel(model: CharLm, dir: string): string {
  mkdirSync(dir, { recursive: true });
  const path = join(dir, "weights.json");
  const body = JSON.stringify({
    format: WEIGHTS_FORMAT,
    vocabSize: VOCAB_SIZE,
    cacheWeight: CACHE_WEIGHT,
    baseRef: model.baseRef,
    weights: Array.from(model.weights),
  });
  const tmp = join(dir, ".weights.json.tmp");
  writeFileSync(tmp, body + "\n", "utf-8");
  renameSync(tmp, path);
  return path;
}

export function loadModel(path: string): CharLm {
  const record = JSON.parse(readFileSync(path, "utf-8"));
  if (record.format !== WEIGHTS_FORMAT) {
    throw new Error(`unsupported weights format ${JSON.stringify(record.format)}`);
  }
  if (record.vocabSize !== VOCAB_SIZE || !Array.isArray(record.weights)) {
    throw new Error("weights file does not match this vocabulary");
  }
  if (record.weights.length !== VOCAB_SIZE * VOCAB_SIZE) {
    throw new Error(`expected ${VOCAB_SIZE * VOCAB_SIZE} weights, found ${record.weights.length}`);
  }
  return { baseRef: String(record.baseRef ?? ""), weights: Float64Array.from(record.weights) };
}

/**
 * A reference is either a path to a saved model (directory or weights file)
 * or an arbitrary string naming a derived base model.
 */
export function resolveModel(ref: string): CharLm {
  let stats;
  try {
    stats = statSync(ref);
  } catch {
    return deriveModel(ref);
  }
  return loadModel(stats.isDirectory() ? join(ref, "weights.json") : ref);
}
