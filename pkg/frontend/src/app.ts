import { DuplicateAnnotationError, ReviewApi } from "./api.js";
import { invalidItems, nextPending, progressLabel, validItems } from "./queue.js";
import type { PanelChoice, ReviewItemView } from "./types.js";

// Single-evaluator session state. The server stays the source of truth:
// duplicates come back as 409 and simply advance the queue.
const api = new ReviewApi("");
let queue: ReviewItemView[] = [];
let skipped = 0;
const completed = new Set<string>();
let current: ReviewItemView | null = null;
let evaluatorId = "";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function setBanner(message: string, kind: "error" | "info" | "hidden"): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = message;
  banner.className = kind === "hidden" ? "banner hidden" : `banner ${kind}`;
}

function renderProgress(): void {
  el<HTMLSpanElement>("progress").textContent = progressLabel(
    completed.size,
    queue.length,
  );
}

function renderItem(): void {
  const panel = el<HTMLDivElement>("item");
  if (!current) {
    panel.classList.add("hidden");
    setBanner(
      skipped > 0
        ? `All ${queue.length} items reviewed (${skipped} invalid items skipped). Thank you.`
        : `All ${queue.length} items reviewed. Thank you.`,
      "info",
    );
    return;
  }
  panel.classList.remove("hidden");
  el<HTMLSpanElement>("task-label").textContent = current.task;
  el<HTMLPreElement>("context").textContent = current.context;
  el<HTMLSpanElement>("gold-answer").textContent = current.gold_answer;
  const summaryBlock = el<HTMLDivElement>("summary-block");
  if (current.summary) {
    summaryBlock.classList.remove("hidden");
    el<HTMLPreElement>("summary").textContent = current.summary;
  } else {
    summaryBlock.classList.add("hidden");
  }
  el<HTMLPreElement>("left-response").textContent = current.left_response;
  el<HTMLPreElement>("right-response").textContent = current.right_response;
  renderProgress();
}

function advance(): void {
  current = nextPending(queue, completed);
  renderItem();
}

async function submit(choice: PanelChoice): Promise<void> {
  if (!current) {
    return;
  }
  const item = current;
  try {
    await api.submitAnnotation({
      item_id: item.item_id,
      evaluator_id: evaluatorId,
      choice,
    });
    setBanner("", "hidden");
  } catch (error) {
    if (error instanceof DuplicateAnnotationError) {
      setBanner("Already recorded for this item; moving on.", "info");
    } else {
      // selection is preserved: the item stays current so retry is one click
      setBanner(`Submission failed: ${String(error)}. Your view is unchanged; retry.`, "error");
      return;
    }
  }
  completed.add(item.item_id);
  advance();
}

async function loadQueue(): Promise<void> {
  evaluatorId = el<HTMLInputElement>("evaluator-id").value.trim();
  if (!evaluatorId) {
    setBanner("Enter an evaluator id first.", "error");
    return;
  }
  try {
    const items = await api.listItems();
    queue = validItems(items);
    skipped = invalidItems(items).length;
    if (skipped > 0) {
      setBanner(`${skipped} item(s) lacked responses and were skipped.`, "info");
    } else {
      setBanner("", "hidden");
    }
    const progress = await api.progress();
    el<HTMLSpanElement>("total-annotations").textContent = String(
      progress.total_annotations,
    );
    el<HTMLDivElement>("session").classList.remove("hidden");
    advance();
  } catch (error) {
    setBanner(`Could not reach the review server: ${String(error)}. Retry.`, "error");
  }
}

export function wire(): void {
  el<HTMLButtonElement>("load").addEventListener("click", () => void loadQueue());
  el<HTMLButtonElement>("choose-left").addEventListener("click", () => void submit("left"));
  el<HTMLButtonElement>("choose-right").addEventListener("click", () => void submit("right"));
}

if (typeof document !== "undefined" && document.getElementById("load")) {
  wire();
}
