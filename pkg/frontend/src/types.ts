/** Wire shapes served by the training service; the UI computes no metrics. */

export type RunStatus =
  | "idle"
  | "lrfind"
  | "training"
  | "awaiting_lr"
  | "done"
  | "failed";

export interface EpochRecord {
  stage: number;
  step: number;
  epoch: number;
  train_loss: number;
  test_accuracy: number;
  lrs: number[];
}

export interface Progress {
  status: RunStatus;
  stage: number;
  step: number;
  epochs_completed: number;
  total_epochs: number;
  history: EpochRecord[];
  error: string | null;
}

export interface LrSample {
  lr: number;
  loss: number;
  smoothed: number;
}

export interface LrCurve {
  samples: LrSample[];
  suggested_lr: number;
  stop_reason: "diverged" | "exhausted";
}

export type PerClassMetrics = Record<
  string,
  { recall: number | null; ppv: number | null; f1: number | null }
>;

export interface EvalReport {
  classes: string[];
  confusion: number[][];
  per_class: PerClassMetrics;
  accuracy: number;
  n: number;
}

export interface ApiRun {
  run_id: string | null;
  state: {
    status: RunStatus;
    lr_choices: { stage: number; lr: number; source: string }[];
  } & Omit<Progress, "status" | "error"> & { error: string | null };
  lr_curve: LrCurve | null;
  eval_report: EvalReport | null;
  config: unknown;
}
