// Typed client for the edit service. Every pixel shown in the UI comes from
// these endpoints; the client never synthesizes or blends image data locally.

export interface CatalogClass {
  classId: number;
  name: string;
  directions: Record<string, number>;
}

export interface Catalog {
  classes: CatalogClass[];
  methods: string[];
  alphaBound: number;
  alphaCap: number;
  alphaQuantStep: number;
  canvas: { height: number; width: number };
  checkpointHash: string;
}

export interface SceneResponse {
  sceneId: string;
  labelMapPng: string;
  baseImagePng: string;
  classes: number[];
}

export interface EditWire {
  classId: number;
  alpha: number;
  k?: number;
  vector?: number[];
  blocks?: [number, number];
}

export interface EditDeltaStats {
  classId: number;
  insideMeanDelta: number;
  outsideMeanDelta: number;
}

export interface EditResponse {
  imagePng: string;
  perEditDeltaStats: EditDeltaStats[];
}

export interface ThumbnailResponse {
  classId: number;
  method: string;
  alpha: number;
  previews: { k: number; imagePng: string }[];
}

export class ServiceError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`service ${status}: ${detail}`);
  }
}

export class ConnectionError extends Error {}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let response: Response;
  try {
    response = await fetch(url, init);
  } catch (err) {
    throw new ConnectionError(String(err));
  }
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail);
    } catch {
      // keep the status text
    }
    throw new ServiceError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  catalog(): Promise<Catalog> {
    return request<Catalog>(`${this.base}/catalog`);
  }

  scene(seed: number): Promise<SceneResponse> {
    return request<SceneResponse>(`${this.base}/scene`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ seed }),
    });
  }

  edit(sceneId: string, edits: EditWire[]): Promise<EditResponse> {
    return request<EditResponse>(`${this.base}/edit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ sceneId, edits }),
    });
  }

  thumbnails(sceneId: string, classId: number, method?: string): Promise<ThumbnailResponse> {
    const params = new URLSearchParams({ sceneId, classId: String(classId) });
    if (method) params.set("method", method);
    return request<ThumbnailResponse>(`${this.base}/thumbnails?${params}`);
  }
}
