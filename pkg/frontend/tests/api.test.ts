import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, DuplicateAnnotationError, ReviewApi } from "../src/api.js";

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("ReviewApi", () => {
  it("lists items from the server", async () => {
    const items = [{ item_id: "a" }];
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse(200, { items }));
    vi.stubGlobal("fetch", fetchMock);
    const api = new ReviewApi("http://server");
    expect(await api.listItems()).toEqual(items);
    expect(fetchMock).toHaveBeenCalledWith("http://server/items");
  });

  it("posts annotations as JSON", async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse(201, { status: "ok" }));
    vi.stubGlobal("fetch", fetchMock);
    const api = new ReviewApi("");
    await api.submitAnnotation({ item_id: "a", evaluator_id: "e", choice: "left" });
    const [url, options] = fetchMock.mock.calls[0];
    expect(url).toBe("/annotations");
    expect(options.method).toBe("POST");
    expect(JSON.parse(options.body)).toEqual({
      item_id: "a",
      evaluator_id: "e",
      choice: "left",
    });
  });

  it("turns 409 into DuplicateAnnotationError", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockResolvedValue(jsonResponse(409, { error: "duplicate" })),
    );
    const api = new ReviewApi("");
    await expect(
      api.submitAnnotation({ item_id: "a", evaluator_id: "e", choice: "right" }),
    ).rejects.toBeInstanceOf(DuplicateAnnotationError);
  });

  it("surfaces server validation errors with their message", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockImplementation(() =>
        Promise.resolve(jsonResponse(400, { error: "bad choice" })),
      ),
    );
    const api = new ReviewApi("");
    const failure = api.submitAnnotation({
      item_id: "a",
      evaluator_id: "e",
      choice: "left",
    });
    await expect(failure).rejects.toBeInstanceOf(ApiError);
    await expect(
      api.submitAnnotation({ item_id: "a", evaluator_id: "e", choice: "left" }),
    ).rejects.toThrow("bad choice");
  });

  it("reads progress", async () => {
    const progress = { total_items: 20, total_annotations: 5, by_evaluator: { e: 5 } };
    vi.stubGlobal("fetch", vi.fn().mockResolvedValue(jsonResponse(200, progress)));
    expect(await new ReviewApi("").progress()).toEqual(progress);
  });

  it("propagates item fetch failures", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockResolvedValue(jsonResponse(404, { error: "unknown item 'x'" })),
    );
    await expect(new ReviewApi("").getItem("x")).rejects.toBeInstanceOf(ApiError);
  });
});
