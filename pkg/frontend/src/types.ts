// Wire types for the review server API. These deliberately carry no model
// identity: blinding is enforced by the shape of the payloads themselves.

export interface ReviewItemView {
  item_id: string;
  task: string;
  context: string;
  gold_answer: string;
  left_response: string;
  right_response: string;
  summary: string | null;
}

export type PanelChoice = "left" | "right";

export interface AnnotationSubmission {
  item_id: string;
  evaluator_id: string;
  choice: PanelChoice;
}

export interface Progress {
  total_items: number;
  total_annotations: number;
  by_evaluator: Record<string, number>;
}
