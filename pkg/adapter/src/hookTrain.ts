#!/usr/bin/env node
/**
 * Trainer hook: `node hookTrain.js <staging-manifest.json>`.
 *
 * Reads the staging manifest, fine-tunes a fresh copy of the manifest's
 * base model on the merged corpus (never a previously trained output), and
 * prints the resulting model reference as the last stdout line — the
 * contract the orchestrator consumes.  Exit code 0 means the printed
 * reference is usable; any failure exits nonzero with a diagnostic on
 * stderr and leaves no model directory behind.
 *
 * Settings come from the environment:
 *   ADAPTER_TRAIN_STEPS    gradient steps; 0 (default) echoes the base ref
 *   ADAPTER_LEARNING_RATE  default 1e-5
 *   ADAPTER_BATCH_SIZE     default 4
 *   ADAPTER_MODEL_DIR      default: models/ beside the staging manifest
 */

import { existsSync } from "node:fs";
import { dirname, join, resolve } from "node:path";

import { readStagingManifest, readTrainingCorpus, sha256Hex, toExample } from "./corpus.js";
import {
  DEFAULT_BATCH_SIZE,
  DEFAULT_LEARNING_RATE,
  resolveModel,
  saveModel,
  train,
} from "./model.js";

function intSetting(name: string, fallback: number): number {
  const raw = process.env[name];
  if (raw === undefined || raw === "") return fallback;
  const value = Number(raw);
  if (!Number.isInteger(value) || value < 0) {
    throw new Error(`${name} must be a non-negative integer, got ${JSON.stringify(raw)}`);
  }
  return value;
}

function rateSetting(name: string, fallback: number): number {
  const raw = process.env[name];
  if (raw === undefined || raw === "") return fallback;
  const value = Number(raw);
  if (!Number.isFinite(value) || value <= 0) {
    throw new Error(`${name} must be a positive number, got ${JSON.stringify(raw)}`);
  }
  return value;
}

function main(): void {
  const manifestPath = process.argv[2];
  if (!manifestPath) {
    throw new Error("usage: hookTrain <staging-manifest.json>");
  }
  const trainSteps = intSetting("ADAPTER_TRAIN_STEPS", 0);
  const learningRate = rateSetting("ADAPTER_LEARNING_RATE", DEFAULT_LEARNING_RATE);
  const batchSize = Math.max(1, intSetting("ADAPTER_BATCH_SIZE", DEFAULT_BATCH_SIZE));

  const manifest = readStagingManifest(manifestPath);
  const records = readTrainingCorpus(manifest);

  if (trainSteps === 0) {
    console.log(manifest.baseModelRef);
    return;
  }

  const model = resolveModel(manifest.baseModelRef);
  train(model, records.map(toExample), { trainSteps, learningRate, batchSize });

  // Content address: same base, corpus, and settings always name the same
  // directory, which makes reruns after a crash naturally idempotent.
  const digest = sha256Hex(
    JSON.stringify({
      base: manifest.baseModelRef,
      corpus: manifest.corpusDigest,
      steps: trainSteps,
      lr: learningRate,
      batch: batchSize,
    }),
  );
  const modelsRoot = process.env.ADAPTER_MODEL_DIR || join(dirname(resolve(manifestPath)), "models");
  const modelDir = join(modelsRoot, `clm-${digest.slice(0, 16)}`);
  if (!existsSync(join(modelDir, "weights.json"))) {
    saveModel(model, modelDir);
  }
  console.log(modelDir);
}

try {
  main();
} catch (error) {
  console.error(`hook-train: ${(error as Error).message}`);
  process.exit(1);
}
