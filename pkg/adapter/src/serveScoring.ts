#!/usr/bin/env node
/**
 * Continuation-scoring service: `node serveScoring.js --model <ref> [--port N]`.
 *
 * Speaks the pipeline's scoring wire protocol: POST /v1/score with
 * {"model", "context", "continuation"} answers {"token_logprobs": [...]},
 * one value per continuation character, teacher-forced under the served
 * model.  Requests are handled synchronously, so identical requests always
 * produce identical bytes.  Every other route is a 404, which clients read
 * as "this backend cannot score".
 *
 * Port 0 (the default) picks a free port; the chosen address is announced
 * on stdout as `listening on http://127.0.0.1:<port>`.
 */

import { createServer, type IncomingMessage, type ServerResponse } from "node:http";

import { resolveModel, scoreContinuation } from "./model.js";

function parseArgs(argv: string[]): { modelRef: string; port: number } {
  let modelRef = "";
  let port = 0;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--model") {
      modelRef = argv[++i] ?? "";
    } else if (argv[i] === "--port") {
      port = Number(argv[++i]);
    } else {
      throw new Error(`unknown argument ${argv[i]}`);
    }
  }
  if (modelRef === "") {
    throw new Error("usage: serveScoring --model <ref> [--port N]");
  }
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error("--port must be an integer in [0, 65535]");
  }
  return { modelRef, port };
}

function sendJson(response: ServerResponse, status: number, body: unknown): void {
  const text = JSON.stringify(body);
  response.writeHead(status, {
    "Content-Type": "application/json",
    "Content-Length": Buffer.byteLength(text),
  });
  response.end(text);
}

function readBody(request: IncomingMessage): Promise<string> {
  return new Promise((resolvePromise, rejectPromise) => {
    const chunks: Buffer[] = [];
    request.on("data", (chunk: Buffer) => chunks.push(chunk));
    request.on("end", () => resolvePromise(Buffer.concat(chunks).toString("utf-8")));
    request.on("error", rejectPromise);
  });
}

function main(): void {
  const { modelRef, port } = parseArgs(process.argv.slice(2));
  const model = resolveModel(modelRef);

  const server = createServer(async (request, response) => {
    if (request.method !== "POST" || request.url !== "/v1/score") {
      sendJson(response, 404, { error: "not found" });
      return;
    }
    let body: unknown;
    try {
      body = JSON.parse(await readBody(request));
    } catch {
      sendJson(response, 400, { error: "request body is not valid JSON" });
      return;
    }
    if (typeof body !== "object" || body === null) {
      sendJson(response, 400, { error: "request body must be a JSON object" });
      return;
    }
    const fields = body as Record<string, unknown>;
    for (const field of ["model", "context", "continuation"]) {
      if (typeof fields[field] !== "string") {
        sendJson(response, 400, { error: `field ${field} must be a string` });
        return;
      }
    }
    if (fields["model"] !== modelRef) {
      sendJson(response, 400, {
        error: `this server scores ${JSON.stringify(modelRef)}, not ${JSON.stringify(fields["model"])}`,
      });
      return;
    }
    const logprobs = scoreContinuation(
      model,
      fields["context"] as string,
      fields["continuation"] as string,
    );
    sendJson(response, 200, { token_logprobs: logprobs });
  });

  server.listen(port, "127.0.0.1", () => {
    const address = server.address();
    const chosen = typeof address === "object" && address !== null ? address.port : port;
    console.log(`listening on http://127.0.0.1:${chosen}`);
  });
}

try {
  main();
} catch (error) {
  console.error(`serve-scoring: ${(error as Error).message}`);
  process.exit(1);
}
