// DOM wiring. All pixels come from the service; this layer only places
// PNGs into <img> tags and forwards interactions to the session + client.

import {
  ApiClient,
  Catalog,
  ConnectionError,
  EditResponse,
  EditWire,
  ServiceError,
} from "./api.js";
import { RequestScheduler } from "./scheduler.js";
import { MAX_COMPARISON_SLOTS, UiEditSession } from "./session.js";

const SLIDER_STEPS = 200;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function pngSrc(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

export class EditStudio {
  private session = new UiEditSession();
  private catalog: Catalog | null = null;
  private renderScheduler: RequestScheduler<EditWire[], EditResponse>;
  private currentRender: string | null = null;

  private root: HTMLElement;
  private status!: HTMLElement;
  private warning!: HTMLElement;
  private sceneRow!: HTMLElement;
  private classPanel!: HTMLElement;
  private renderImg!: HTMLImageElement;
  private deltaReadout!: HTMLElement;
  private compareStrip!: HTMLElement;
  private undoButton!: HTMLButtonElement;
  private redoButton!: HTMLButtonElement;

  constructor(
    root: HTMLElement,
    private readonly client: ApiClient,
  ) {
    this.root = root;
    this.renderScheduler = new RequestScheduler(
      (edits) => {
        const body = this.session.wireBody();
        return this.client.edit(body.sceneId, edits);
      },
      (value) => this.showRender(value),
      (err) => this.surfaceError(err),
      100,
    );
    this.build();
  }

  private build(): void {
    this.root.innerHTML = "";
    const header = el("div", "header");
    const title = el("h1", undefined, "edit studio");
    const seedInput = el("input") as HTMLInputElement;
    seedInput.type = "number";
    seedInput.value = "7";
    const loadButton = el("button", undefined, "load scene");
    loadButton.onclick = () => void this.loadScene(Number(seedInput.value));
    this.status = el("span", "status");
    header.append(title, seedInput, loadButton, this.status);

    this.warning = el("div", "warning hidden");
    this.sceneRow = el("div", "scene-row");
    this.classPanel = el("div", "class-panel");

    const renderBox = el("div", "render-box");
    this.renderImg = el("img", "render") as HTMLImageElement;
    this.deltaReadout = el("div", "delta-readout");
    const controls = el("div", "controls");
    this.undoButton = el("button", undefined, "undo") as HTMLButtonElement;
    this.redoButton = el("button", undefined, "redo") as HTMLButtonElement;
    const pinButton = el("button", undefined, "pin for comparison");
    const clearButton = el("button", undefined, "clear edits");
    this.undoButton.onclick = () => {
      this.session.undo();
      this.refreshControls();
      this.requestRender(true);
    };
    this.redoButton.onclick = () => {
      this.session.redo();
      this.refreshControls();
      this.requestRender(true);
    };
    pinButton.onclick = () => this.pinCurrent();
    clearButton.onclick = () => {
      this.session.clearStack();
      this.refreshControls();
      this.requestRender(true);
    };
    controls.append(this.undoButton, this.redoButton, pinButton, clearButton);
    renderBox.append(this.renderImg, this.deltaReadout, controls);

    this.compareStrip = el("div", "compare-strip");
    this.root.append(
      header,
      this.warning,
      this.sceneRow,
      el("div", "columns"),
    );
    const columns = this.root.querySelector(".columns")!;
    columns.append(this.classPanel, renderBox, this.compareStrip);
    void this.loadCatalog();
  }

  private async loadCatalog(): Promise<void> {
    try {
      this.catalog = await this.client.catalog();
      this.status.textContent = `ready (${this.catalog.methods.join(", ")})`;
    } catch (err) {
      this.surfaceError(err);
    }
  }

  private async loadScene(seed: number): Promise<void> {
    try {
      const scene = await this.client.scene(seed);
      this.session.setScene(scene);
      this.currentRender = scene.baseImagePng;
      this.sceneRow.innerHTML = "";
      const labelImg = el("img", "tile") as HTMLImageElement;
      labelImg.src = pngSrc(scene.labelMapPng);
      labelImg.title = "label map";
      const baseImg = el("img", "tile") as HTMLImageElement;
      baseImg.src = pngSrc(scene.baseImagePng);
      baseImg.title = "base image";
      const legend = el("div", "legend");
      if (this.catalog) {
        for (const c of this.catalog.classes) {
          if (scene.classes.includes(c.classId)) {
            legend.append(el("span", "legend-item", `${c.classId}: ${c.name}`));
          }
        }
      }
      this.sceneRow.append(labelImg, baseImg, legend);
      this.renderImg.src = pngSrc(scene.baseImagePng);
      this.buildClassPanel();
      this.clearWarning();
    } catch (err) {
      this.surfaceError(err);
    }
  }

  private buildClassPanel(): void {
    this.classPanel.innerHTML = "";
    const scene = this.session.scene;
    if (!scene || !this.catalog) return;
    for (const entry of this.catalog.classes) {
      if (!scene.classes.includes(entry.classId)) continue;
      const box = el("div", "class-box");
      box.append(el("h3", undefined, `${entry.name} (class ${entry.classId})`));
      const gallery = el("div", "gallery");
      const galleryButton = el("button", undefined, "browse directions");
      galleryButton.onclick = () => void this.loadGallery(entry.classId, gallery);
      const slider = el("input", "alpha-slider") as HTMLInputElement;
      slider.type = "range";
      slider.min = String(-this.catalog.alphaCap);
      slider.max = String(this.catalog.alphaCap);
      slider.step = String((2 * this.catalog.alphaCap) / SLIDER_STEPS);
      slider.value = "0";
      slider.disabled = true;
      slider.dataset.classId = String(entry.classId);
      slider.oninput = () => {
        this.session.setAlpha(entry.classId, Number(slider.value));
        this.requestRender(false);
      };
      const blockSelect = el("select") as HTMLSelectElement;
      blockSelect.append(new Option("all blocks", "all"));
      const removeButton = el("button", undefined, "remove edit");
      removeButton.onclick = () => {
        this.session.removeEdit(entry.classId);
        slider.disabled = true;
        slider.value = "0";
        this.requestRender(true);
      };
      box.append(galleryButton, gallery, slider, blockSelect, removeButton);
      this.classPanel.append(box);
    }
  }

  private async loadGallery(classId: number, container: HTMLElement): Promise<void> {
    try {
      const scene = this.session.scene;
      if (!scene || !this.catalog) return;
      const thumbs = await this.client.thumbnails(scene.sceneId, classId);
      container.innerHTML = "";
      for (const preview of thumbs.previews) {
        const img = el("img", "thumb") as HTMLImageElement;
        img.src = pngSrc(preview.imagePng);
        img.title = `direction k=${preview.k}`;
        img.onclick = () => {
          const defaultAlpha = this.catalog!.alphaBound / 2;
          this.session.upsertEdit({ classId, k: preview.k, alpha: defaultAlpha });
          const slider = this.classPanel.querySelector<HTMLInputElement>(
            `input[data-class-id="${classId}"]`,
          );
          if (slider) {
            slider.disabled = false;
            slider.value = String(defaultAlpha);
          }
          this.requestRender(true);
        };
        container.append(img);
      }
    } catch (err) {
      this.surfaceError(err);
    }
  }

  private requestRender(immediate: boolean): void {
    if (!this.session.scene) return;
    this.refreshControls();
    const edits = this.session.currentStack();
    if (immediate) this.renderScheduler.flush(edits);
    else this.renderScheduler.submit(edits);
  }

  private showRender(response: EditResponse): void {
    this.currentRender = response.imagePng;
    this.renderImg.src = pngSrc(response.imagePng);
    this.session.lastDeltaStats = response.perEditDeltaStats;
    this.deltaReadout.innerHTML = "";
    for (const stat of response.perEditDeltaStats) {
      this.deltaReadout.append(
        el(
          "div",
          "delta-line",
          `class ${stat.classId}: inside ${stat.insideMeanDelta.toFixed(4)}, ` +
            `outside ${stat.outsideMeanDelta.toFixed(4)}`,
        ),
      );
    }
    this.clearWarning();
  }

  private pinCurrent(): void {
    if (this.currentRender === null) return;
    const ok = this.session.pin(this.currentRender, `pin ${this.session.pinned().length + 1}`);
    if (!ok) {
      this.showWarning(`comparison is full (${MAX_COMPARISON_SLOTS} slots)`);
      return;
    }
    this.renderPins();
  }

  private renderPins(): void {
    this.compareStrip.innerHTML = "";
    this.session.pinned().forEach((pin, index) => {
      const box = el("div", "pin-box");
      const img = el("img", "tile") as HTMLImageElement;
      img.src = pngSrc(pin.imagePng);
      const drop = el("button", undefined, "x");
      drop.onclick = () => {
        this.session.unpin(index);
        this.renderPins();
      };
      box.append(img, el("div", undefined, pin.label), drop);
      this.compareStrip.append(box);
    });
  }

  private refreshControls(): void {
    this.undoButton.disabled = !this.session.canUndo();
    this.redoButton.disabled = !this.session.canRedo();
  }

  private surfaceError(err: unknown): void {
    if (err instanceof ServiceError) {
      this.showWarning(`edit rejected (${err.status}): ${err.detail}`);
    } else if (err instanceof ConnectionError) {
      this.showWarning("service unreachable; check that the server is running");
    } else {
      this.showWarning(String(err));
    }
  }

  private showWarning(text: string): void {
    this.warning.textContent = text;
    this.warning.classList.remove("hidden");
  }

  private clearWarning(): void {
    this.warning.classList.add("hidden");
  }
}
