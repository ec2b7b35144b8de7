// Editing session state: the current edit stack (a mirror of the service
// wire form), an undo/redo history of exact stack snapshots, and up to four
// pinned comparison renders. Pure state machine; no DOM, no fetch.

import type { EditDeltaStats, EditWire, SceneResponse } from "./api.js";

export const MAX_COMPARISON_SLOTS = 4;

export interface PinnedRender {
  imagePng: string;
  stack: EditWire[];
  label: string;
}

function cloneStack(stack: EditWire[]): EditWire[] {
  return stack.map((e) => ({
    ...e,
    vector: e.vector ? [...e.vector] : undefined,
    blocks: e.blocks ? [e.blocks[0], e.blocks[1]] : undefined,
  }));
}

function rangeKey(blocks?: [number, number]): string {
  return blocks ? `${blocks[0]}-${blocks[1]}` : "all";
}

export class UiEditSession {
  private stack: EditWire[] = [];
  private history: EditWire[][] = [];
  private future: EditWire[][] = [];
  private pins: PinnedRender[] = [];
  scene: SceneResponse | null = null;
  lastDeltaStats: EditDeltaStats[] = [];

  setScene(scene: SceneResponse): void {
    this.scene = scene;
    this.stack = [];
    this.history = [];
    this.future = [];
    this.lastDeltaStats = [];
  }

  currentStack(): EditWire[] {
    return cloneStack(this.stack);
  }

  /** Wire body for POST /edit; always serializable against the schema. */
  wireBody(): { sceneId: string; edits: EditWire[] } {
    if (!this.scene) throw new Error("no scene selected");
    return { sceneId: this.scene.sceneId, edits: this.currentStack() };
  }

  private commit(next: EditWire[]): void {
    this.history.push(cloneStack(this.stack));
    this.future = [];
    this.stack = next;
  }

  /** Insert or replace the spec for (classId, block range). */
  upsertEdit(edit: EditWire): void {
    const next = cloneStack(this.stack);
    const key = rangeKey(edit.blocks);
    const index = next.findIndex(
      (e) => e.classId === edit.classId && rangeKey(e.blocks) === key,
    );
    if (index >= 0) next[index] = { ...edit };
    else next.push({ ...edit });
    this.commit(next);
  }

  removeEdit(classId: number, blocks?: [number, number]): void {
    const key = rangeKey(blocks);
    const next = this.stack.filter(
      (e) => !(e.classId === classId && rangeKey(e.blocks) === key),
    );
    if (next.length !== this.stack.length) this.commit(cloneStack(next));
  }

  setAlpha(classId: number, alpha: number, blocks?: [number, number]): void {
    const key = rangeKey(blocks);
    const found = this.stack.find(
      (e) => e.classId === classId && rangeKey(e.blocks) === key,
    );
    if (!found) return;
    this.upsertEdit({ ...found, alpha });
  }

  editFor(classId: number, blocks?: [number, number]): EditWire | undefined {
    const key = rangeKey(blocks);
    const found = this.stack.find(
      (e) => e.classId === classId && rangeKey(e.blocks) === key,
    );
    return found ? { ...found } : undefined;
  }

  clearStack(): void {
    if (this.stack.length) this.commit([]);
  }

  canUndo(): boolean {
    return this.history.length > 0;
  }

  canRedo(): boolean {
    return this.future.length > 0;
  }

  undo(): void {
    const prior = this.history.pop();
    if (prior === undefined) return;
    this.future.push(cloneStack(this.stack));
    this.stack = prior;
  }

  redo(): void {
    const next = this.future.pop();
    if (next === undefined) return;
    this.history.push(cloneStack(this.stack));
    this.stack = next;
  }

  /** Freeze the given render; slots cap at four, oldest never mutates. */
  pin(imagePng: string, label: string): boolean {
    if (this.pins.length >= MAX_COMPARISON_SLOTS) return false;
    this.pins.push({ imagePng, stack: this.currentStack(), label });
    return true;
  }

  unpin(index: number): void {
    this.pins.splice(index, 1);
  }

  pinned(): readonly PinnedRender[] {
    return this.pins.map((p) => ({
      imagePng: p.imagePng,
      stack: cloneStack(p.stack),
      label: p.label,
    }));
  }
}
