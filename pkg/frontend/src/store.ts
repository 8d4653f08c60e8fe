import { ApiClient, ApiError, EntityChip, RecommendationCard } from "./api.js";

export type Role = "user" | "system";

export interface ChatTurn {
  role: Role;
  text: string;
  /* server order preserved verbatim on system turns */
  recommendations: RecommendationCard[];
  linkedEntities: EntityChip[];
}

export interface Banner {
  text: string;
  retriable: boolean;
}

export const K_CHOICES = [1, 10, 50] as const;
export type KChoice = (typeof K_CHOICES)[number];

export interface ChatState {
  turns: ChatTurn[];
  sessionId: string | null;
  pending: boolean;
  k: KChoice;
  banner: Banner | null;
  notice: string | null;
  suggestions: EntityChip[];
}

export type Listener = (state: ChatState) => void;

/** All chat state and the session flow; rendering is someone else's job. */
export class ChatStore {
  private state: ChatState = {
    turns: [],
    sessionId: null,
    pending: false,
    k: 10,
    banner: null,
    notice: null,
    suggestions: [],
  };
  private listeners: Listener[] = [];
  private suggestSeq = 0;

  constructor(private readonly client: ApiClient) {}

  getState(): ChatState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  setK(k: KChoice): void {
    if (!K_CHOICES.includes(k)) return;
    this.state.k = k;
    this.notify();
  }

  /** New conversation: drop the log and the session; the next send re-creates it. */
  reset(): void {
    this.state.turns = [];
    this.state.sessionId = null;
    this.state.banner = null;
    this.state.notice = null;
    this.state.suggestions = [];
    this.notify();
  }

  /** One user message: create a session if needed, then one recommend call.
   *
   * A stale session (404) is re-created once and the recommend retried, with
   * a notice so the user knows context was lost. Other failures surface as a
   * banner; the log is left intact so the user can try again.
   */
  async send(text: string): Promise<void> {
    const utterance = text.trim();
    if (utterance.length === 0 || this.state.pending) return;

    const userTurn: ChatTurn = {
      role: "user",
      text: utterance,
      recommendations: [],
      linkedEntities: [],
    };
    this.state.turns.push(userTurn);
    this.state.pending = true;
    this.state.banner = null;
    this.state.notice = null;
    this.state.suggestions = [];
    this.notify();

    try {
      if (this.state.sessionId === null) {
        this.state.sessionId = await this.client.createSession();
      }
      let response;
      try {
        response = await this.client.recommend(this.state.sessionId, utterance, this.state.k);
      } catch (error) {
        if (!(error instanceof ApiError) || error.status !== 404) throw error;
        // session evicted server-side; start a fresh one and retry once
        this.state.sessionId = await this.client.createSession();
        this.state.notice = "Previous session expired; started a new one.";
        response = await this.client.recommend(this.state.sessionId, utterance, this.state.k);
      }
      userTurn.linkedEntities = response.linked_entities;
      this.state.turns.push({
        role: "system",
        text:
          response.recommendations.length > 0
            ? "Recommendations"
            : "No recommendations left for this session.",
        recommendations: response.recommendations,
        linkedEntities: [],
      });
    } catch (error) {
      this.state.banner = toBanner(error);
    } finally {
      this.state.pending = false;
      this.notify();
    }
  }

  /** Entity-name autocomplete; late responses for stale prefixes are dropped. */
  async suggest(prefix: string, limit = 8): Promise<void> {
    const seq = ++this.suggestSeq;
    if (prefix.trim().length === 0) {
      this.state.suggestions = [];
      this.notify();
      return;
    }
    try {
      const matches = await this.client.searchEntities(prefix, limit);
      if (seq !== this.suggestSeq) return;
      this.state.suggestions = matches;
    } catch {
      if (seq !== this.suggestSeq) return;
      this.state.suggestions = [];
    }
    this.notify();
  }

  clearSuggestions(): void {
    if (this.state.suggestions.length === 0) return;
    this.state.suggestions = [];
    this.notify();
  }
}

function toBanner(error: unknown): Banner {
  if (error instanceof ApiError) {
    return { text: error.message, retriable: error.retriable };
  }
  const text = error instanceof Error ? error.message : String(error);
  return { text: `Cannot reach the service: ${text}`, retriable: true };
}
