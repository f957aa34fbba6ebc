/** Client-side round history mirroring the server's undo semantics. */

import type { Stroke } from "./api.js";

export interface Round {
  strokes: Stroke[];
  /** base64 PNG of the mask returned for this round */
  mask: string;
  dice?: number;
}

export class RoundHistory {
  private rounds: Round[] = [];

  get length(): number {
    return this.rounds.length;
  }

  get current(): Round | undefined {
    return this.rounds[this.rounds.length - 1];
  }

  push(round: Round): void {
    this.rounds.push(round);
  }

  /** Drop the latest round; returns the restored one (undefined at round 0). */
  pop(): Round | undefined {
    if (this.rounds.length === 0) throw new Error("nothing to undo");
    this.rounds.pop();
    return this.current;
  }

  clear(): void {
    this.rounds = [];
  }

  /** All strokes over all rounds, flattened in submission order. */
  allStrokes(): Stroke[] {
    return this.rounds.flatMap((r) => r.strokes);
  }
}
