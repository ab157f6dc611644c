import type { ReviewItemView } from "./types.js";

/** Items missing either response cannot be judged and are skipped. */
export function validItems(items: ReviewItemView[]): ReviewItemView[] {
  return items.filter(
    (item) => item.left_response.trim() !== "" && item.right_response.trim() !== "",
  );
}

export function invalidItems(items: ReviewItemView[]): ReviewItemView[] {
  return items.filter(
    (item) => item.left_response.trim() === "" || item.right_response.trim() === "",
  );
}

/** First queue item the evaluator has not completed yet, in server order. */
export function nextPending(
  items: ReviewItemView[],
  completed: ReadonlySet<string>,
): ReviewItemView | null {
  for (const item of items) {
    if (!completed.has(item.item_id)) {
      return item;
    }
  }
  return null;
}

export function progressLabel(completedCount: number, total: number): string {
  return `${completedCount}/${total}`;
}
