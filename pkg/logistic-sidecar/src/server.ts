import { createServer, type IncomingMessage, type Server, type ServerResponse } from "node:http";

import { LinearModel } from "./model.js";
import { ProtocolError, parseRequest, predict } from "./protocol.js";

export interface RunningServer {
  server: Server;
  port: number;
  close(): Promise<void>;
}

function respondJson(res: ServerResponse, status: number, payload: unknown): void {
  const body = JSON.stringify(payload);
  res.writeHead(status, {
    "Content-Type": "application/json",
    "Content-Length": Buffer.byteLength(body),
  });
  res.end(body);
}

function readBody(req: IncomingMessage): Promise<string> {
  return new Promise((resolve, reject) => {
    const chunks: Buffer[] = [];
    req.on("data", (chunk: Buffer) => chunks.push(chunk));
    req.on("end", () => resolve(Buffer.concat(chunks).toString("utf-8")));
    req.on("error", reject);
  });
}

export function startServer(
  model: LinearModel,
  port = 0,
  path = "/predict"
): Promise<RunningServer> {
  const server = createServer(async (req, res) => {
    if (req.method !== "POST" || req.url !== path) {
      respondJson(res, 404, { error: "not found" });
      return;
    }
    let body: string;
    try {
      body = await readBody(req);
    } catch {
      respondJson(res, 400, { error: "could not read request body" });
      return;
    }
    try {
      respondJson(res, 200, predict(parseRequest(body), model));
    } catch (err) {
      if (err instanceof ProtocolError) {
        respondJson(res, 400, { error: err.message });
      } else {
        respondJson(res, 500, { error: "internal error" });
      }
    }
  });
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    // loopback only, same stance as the gateway's other sidecars
    server.listen(port, "127.0.0.1", () => {
      const address = server.address();
      if (address === null || typeof address === "string") {
        reject(new Error("server did not bind a TCP port"));
        return;
      }
      resolve({
        server,
        port: address.port,
        close: () =>
          new Promise<void>((done, fail) =>
            server.close((err) => (err ? fail(err) : done()))
          ),
      });
    });
  });
}
