/**
 * Readers for the two files the trainer hook receives: the staging manifest
 * and the merged training corpus it points at.  Every field the hook relies
 * on is validated up front so a malformed handoff fails before any model
 * directory is created.
 */

import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { dirname, isAbsolute, resolve } from "node:path";

import type { SupervisedExample } from "./model.js";

export class CorpusError extends Error {}

export function sha256Hex(text: string): string {
  return createHash("sha256").update(text, "utf-8").digest("hex");
}

// ---- Staging manifest ----

export interface StagingManifest {
  iteration: number;
  baseModelRef: string;
  corpusPath: string;
  corpusDigest: string;
}

function requireString(record: Record<string, unknown>, field: string): string {
  const value = record[field];
  if (typeof value !== "string" || value === "") {
    throw new CorpusError(`staging manifest field ${field} must be a nonempty string`);
  }
  return value;
}

export function readStagingManifest(path: string): StagingManifest {
  let record: unknown;
  try {
    record = JSON.parse(readFileSync(path, "utf-8"));
  } catch (error) {
    throw new CorpusError(`cannot read staging manifest ${path}: ${(error as Error).message}`);
  }
  if (typeof record !== "object" || record === null || Array.isArray(record)) {
    throw new CorpusError("staging manifest must be a JSON object");
  }
  const fields = record as Record<string, unknown>;
  const iteration = fields["iteration"];
  if (typeof iteration !== "number" || !Number.isInteger(iteration) || iteration < 0) {
    throw new CorpusError("staging manifest field iteration must be a non-negative integer");
  }
  const corpusDigest = requireString(fields, "corpus_digest");
  if (!/^[0-9a-f]{64}$/.test(corpusDigest)) {
    throw new CorpusError("staging manifest field corpus_digest must be 64 hex characters");
  }
  const rawPath = requireString(fields, "corpus_path");
  return {
    iteration,
    baseModelRef: requireString(fields, "base_model_ref"),
    corpusPath: isAbsolute(rawPath) ? rawPath : resolve(dirname(path), rawPath),
    corpusDigest,
  };
}

// ---- Training corpus ----

export interface TrainingRecord {
  system: string;
  prompt: string;
  response: string;
  source: string;
  sourceId: string;
}

const RECORD_FIELDS = ["system", "prompt", "response", "source", "source_id"] as const;

/** Read the corpus named by a manifest, verifying its digest first. */
export function readTrainingCorpus(manifest: StagingManifest): TrainingRecord[] {
  let text: string;
  try {
    text = readFileSync(manifest.corpusPath, "utf-8");
  } catch (error) {
    throw new CorpusError(`cannot read corpus ${manifest.corpusPath}: ${(error as Error).message}`);
  }
  const digest = sha256Hex(text);
  if (digest !== manifest.corpusDigest) {
    throw new CorpusError(
      `corpus digest mismatch: manifest says ${manifest.corpusDigest}, file is ${digest}`,
    );
  }
  const records: TrainingRecord[] = [];
  const lines = text.split("\n");
  for (let lineno = 1; lineno <= lines.length; lineno++) {
    const line = lines[lineno - 1];
    if (line === "") continue;
    let parsed: unknown;
    try {
      parsed = JSON.parse(line);
    } catch {
      throw new CorpusError(`corpus line ${lineno} is not valid JSON`);
    }
    if (typeof parsed === "object" && parsed !== null && !Array.isArray(parsed)) {
      const fields = parsed as Record<string, unknown>;
      for (const field of RECORD_FIELDS) {
        if (typeof fields[field] !== "string") {
          throw new CorpusError(`corpus line ${lineno} field ${field} must be a string`);
        }
      }
      if (fields["response"] === "") {
        throw new CorpusError(`corpus line ${lineno} has an empty response`);
      }
      records.push({
        system: fields["system"] as string,
        prompt: fields["prompt"] as string,
        response: fields["response"] as string,
        source: fields["source"] as string,
        sourceId: fields["source_id"] as string,
      });
    } else {
      throw new CorpusError(`corpus line ${lineno} must be a JSON object`);
    }
  }
  if (records.length === 0) {
    throw new CorpusError("corpus holds no records");
  }
  return records;
}

/** Map a corpus record onto the scoring shape: context in, response out. */
export function toExample(record: TrainingRecord): SupervisedExample {
  const context = record.system === "" ? `${record.prompt}\n` : `${record.system}\n${record.prompt}\n`;
  return { context, target: record.response };
}
