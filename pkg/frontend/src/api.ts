/** Typed client for the recommendation service HTTP API.
 *
 * Field names mirror the wire format exactly; the UI holds no model logic
 * and never reinterprets scores or ranks.
 */

export interface RecommendationCard {
  item_id: number;
  name: string;
  score: number;
  rank: number;
}

export interface EntityChip {
  entity_id: number;
  name: string;
  is_item: boolean;
}

export interface RecommendResponse {
  recommendations: RecommendationCard[];
  linked_entities: EntityChip[];
}

export interface HealthResponse {
  status: string;
  checkpoint_hash: string;
  num_entities: number;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Non-2xx response, carrying the server's error body when it has one. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly retriable: boolean,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let message = `HTTP ${response.status}`;
  let retriable = false;
  try {
    const body = await response.json();
    if (typeof body?.error === "string") message = body.error;
    if (typeof body?.retriable === "boolean") retriable = body.retriable;
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(response.status, message, retriable);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => globalThis.fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  async createSession(): Promise<string> {
    const body = await this.request<{ session_id: string }>("/api/session", {
      method: "POST",
    });
    return body.session_id;
  }

  recommend(sessionId: string, utterance: string, k: number): Promise<RecommendResponse> {
    return this.request<RecommendResponse>("/api/recommend", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ session_id: sessionId, utterance, k }),
    });
  }

  async searchEntities(prefix: string, limit: number): Promise<EntityChip[]> {
    const query = `q=${encodeURIComponent(prefix)}&limit=${limit}`;
    const body = await this.request<{ matches: EntityChip[] }>(`/api/entities?${query}`);
    return body.matches;
  }

  health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("/api/health");
  }
}
