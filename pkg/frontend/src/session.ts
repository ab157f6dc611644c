// Headless scripted session: walks the queue through the same API client the
// browser uses and prints its choices as JSON. Useful for deterministic
// end-to-end checks of the annotation loop.
//
//   node dist/session.js --base-url http://127.0.0.1:8731 \
//     --evaluator e1 [--strategy left|right|alternate]

import { DuplicateAnnotationError, ReviewApi } from "./api.js";
import { validItems } from "./queue.js";
import type { PanelChoice } from "./types.js";

function argValue(flag: string, fallback?: string): string {
  const index = process.argv.indexOf(flag);
  if (index >= 0 && index + 1 < process.argv.length) {
    return process.argv[index + 1];
  }
  if (fallback !== undefined) {
    return fallback;
  }
  throw new Error(`missing required flag ${flag}`);
}

function pick(strategy: string, position: number): PanelChoice {
  switch (strategy) {
    case "left":
      return "left";
    case "right":
      return "right";
    case "alternate":
      return position % 2 === 0 ? "left" : "right";
    default:
      throw new Error(`unknown strategy ${strategy}`);
  }
}

async function run(): Promise<void> {
  const api = new ReviewApi(argValue("--base-url"));
  const evaluatorId = argValue("--evaluator");
  const strategy = argValue("--strategy", "alternate");
  const items = validItems(await api.listItems());
  const choices: Record<string, PanelChoice> = {};
  let position = 0;
  for (const item of items) {
    const choice = pick(strategy, position);
    try {
      await api.submitAnnotation({
        item_id: item.item_id,
        evaluator_id: evaluatorId,
        choice,
      });
    } catch (error) {
      if (!(error instanceof DuplicateAnnotationError)) {
        throw error;
      }
    }
    choices[item.item_id] = choice;
    position += 1;
  }
  const progress = await api.progress();
  process.stdout.write(JSON.stringify({ choices, progress }) + "\n");
}

run().catch((error) => {
  process.stderr.write(`session failed: ${String(error)}\n`);
  process.exit(1);
});
