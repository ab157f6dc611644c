import type { AnnotationSubmission, Progress, ReviewItemView } from "./types.js";

export class DuplicateAnnotationError extends Error {
  constructor(itemId: string) {
    super(`annotation already recorded for item ${itemId}`);
    this.name = "DuplicateAnnotationError";
  }
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { error?: string };
    return body.error ?? `HTTP ${response.status}`;
  } catch {
    return `HTTP ${response.status}`;
  }
}

/** Typed client for the review server; the server is the source of truth for
 * item order and completed annotations. */
export class ReviewApi {
  constructor(private readonly baseUrl: string = "") {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async listItems(): Promise<ReviewItemView[]> {
    const response = await fetch(this.url("/items"));
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    const body = (await response.json()) as { items: ReviewItemView[] };
    return body.items;
  }

  async getItem(itemId: string): Promise<ReviewItemView> {
    const response = await fetch(this.url(`/items/${encodeURIComponent(itemId)}`));
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    return (await response.json()) as ReviewItemView;
  }

  async submitAnnotation(submission: AnnotationSubmission): Promise<void> {
    const response = await fetch(this.url("/annotations"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(submission),
    });
    if (response.status === 409) {
      throw new DuplicateAnnotationError(submission.item_id);
    }
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
  }

  async progress(): Promise<Progress> {
    const response = await fetch(this.url("/progress"));
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    return (await response.json()) as Progress;
  }
}
