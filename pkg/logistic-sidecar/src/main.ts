import { loadModel } from "./model.js";
import { startServer } from "./server.js";

interface Args {
  model: string;
  port: number;
  path: string;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { model: "", port: 8090, path: "/predict" };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--model" && argv[i + 1]) {
      args.model = argv[++i] as string;
    } else if (arg === "--port" && argv[i + 1]) {
      args.port = parseInt(argv[++i] as string, 10);
    } else if (arg === "--path" && argv[i + 1]) {
      args.path = argv[++i] as string;
    } else {
      console.error(`unknown argument: ${arg}`);
      process.exit(2);
    }
  }
  if (!args.model) {
    console.error("usage: main.js --model <model.json> [--port <n>] [--path </predict>]");
    process.exit(2);
  }
  if (!Number.isInteger(args.port) || args.port < 0 || args.port > 65535) {
    console.error("--port must be an integer in 0..65535");
    process.exit(2);
  }
  return args;
}

async function main(): Promise<void> {
  const args = parseArgs(process.argv.slice(2));
  const model = loadModel(args.model);
  const running = await startServer(model, args.port, args.path);
  console.log(`classifier '${model.modelId}' listening on 127.0.0.1:${running.port}`);
  const shutdown = () => {
    running.close().then(() => process.exit(0));
  };
  process.on("SIGINT", shutdown);
  process.on("SIGTERM", shutdown);
}

main().catch((err) => {
  console.error((err as Error).message);
  process.exit(1);
});
