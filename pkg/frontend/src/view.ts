import { ChatState, ChatStore, ChatTurn, K_CHOICES, KChoice } from "./store.js";

const SKELETON = `
  <header class="top-bar">
    <h1>DACRS</h1>
    <label class="k-label">Top-k
      <select class="k-select">${K_CHOICES.map((k) => `<option value="${k}">${k}</option>`).join("")}</select>
    </label>
    <button type="button" class="reset-button">New conversation</button>
  </header>
  <div class="banner" hidden></div>
  <div class="notice" hidden></div>
  <ol class="chat-log"></ol>
  <div class="composer">
    <input class="composer-input" type="text" autocomplete="off"
           placeholder="Tell me what you are in the mood for" />
    <button type="button" class="send-button">Send</button>
    <ul class="suggestions" hidden></ul>
  </div>
`;

/** Split the input so autocomplete works on the clause being typed. */
export function splitForCompletion(value: string): { head: string; query: string } {
  const match = /^(.*[,;:]\s*)(.*)$/s.exec(value);
  if (match) return { head: match[1] ?? "", query: match[2] ?? "" };
  return { head: "", query: value };
}

export class ChatView {
  readonly input: HTMLInputElement;
  private readonly log: HTMLOListElement;
  private readonly banner: HTMLElement;
  private readonly notice: HTMLElement;
  private readonly sendButton: HTMLButtonElement;
  private readonly kSelect: HTMLSelectElement;
  private readonly suggestionList: HTMLElement;

  constructor(
    root: HTMLElement,
    private readonly store: ChatStore,
  ) {
    root.innerHTML = SKELETON;
    this.log = root.querySelector(".chat-log") as HTMLOListElement;
    this.banner = root.querySelector(".banner") as HTMLElement;
    this.notice = root.querySelector(".notice") as HTMLElement;
    this.input = root.querySelector(".composer-input") as HTMLInputElement;
    this.sendButton = root.querySelector(".send-button") as HTMLButtonElement;
    this.kSelect = root.querySelector(".k-select") as HTMLSelectElement;
    this.suggestionList = root.querySelector(".suggestions") as HTMLElement;

    this.sendButton.addEventListener("click", () => this.submit());
    this.input.addEventListener("keydown", (event) => {
      if (event.key === "Enter") this.submit();
    });
    this.input.addEventListener("input", () => {
      const { query } = splitForCompletion(this.input.value);
      if (query.trim().length >= 2) void this.store.suggest(query.trim());
      else this.store.clearSuggestions();
    });
    this.kSelect.addEventListener("change", () => {
      this.store.setK(Number(this.kSelect.value) as KChoice);
    });
    (root.querySelector(".reset-button") as HTMLButtonElement).addEventListener("click", () => {
      this.store.reset();
      this.input.value = "";
    });

    store.subscribe((state) => this.render(state));
    this.render(store.getState());
  }

  private submit(): void {
    const value = this.input.value;
    if (this.store.getState().pending || value.trim().length === 0) return;
    this.input.value = "";
    void this.store.send(value);
  }

  /** Append a name to the draft message, as from a card or suggestion click. */
  insertName(name: string): void {
    const current = this.input.value.trimEnd();
    this.input.value = current.length > 0 ? `${current} ${name}` : name;
    this.store.clearSuggestions();
    this.input.focus();
  }

  private completeWith(name: string): void {
    const { head } = splitForCompletion(this.input.value);
    this.input.value = head + name;
    this.store.clearSuggestions();
    this.input.focus();
  }

  private render(state: ChatState): void {
    this.input.disabled = state.pending;
    this.sendButton.disabled = state.pending;
    this.kSelect.value = String(state.k);

    this.banner.hidden = state.banner === null;
    this.banner.textContent = state.banner
      ? state.banner.text + (state.banner.retriable ? " (you can retry)" : "")
      : "";
    this.banner.classList.toggle("banner-retriable", state.banner?.retriable === true);

    this.notice.hidden = state.notice === null;
    this.notice.textContent = state.notice ?? "";

    this.log.replaceChildren(...state.turns.map((turn) => this.renderTurn(turn)));

    this.suggestionList.hidden = state.suggestions.length === 0;
    this.suggestionList.replaceChildren(
      ...state.suggestions.map((entity) => {
        const item = document.createElement("li");
        item.className = "suggestion";
        item.textContent = entity.name;
        item.addEventListener("click", () => this.completeWith(entity.name));
        return item;
      }),
    );
  }

  private renderTurn(turn: ChatTurn): HTMLElement {
    const element = document.createElement("li");
    element.className = `turn turn-${turn.role}`;

    const text = document.createElement("p");
    text.className = "turn-text";
    text.textContent = turn.text;
    element.appendChild(text);

    if (turn.linkedEntities.length > 0) {
      const chips = document.createElement("div");
      chips.className = "chips";
      for (const entity of turn.linkedEntities) {
        const chip = document.createElement("span");
        chip.className = entity.is_item ? "chip chip-item" : "chip";
        chip.textContent = entity.name;
        chips.appendChild(chip);
      }
      element.appendChild(chips);
    }

    if (turn.recommendations.length > 0) {
      const cards = document.createElement("ol");
      cards.className = "cards";
      for (const card of turn.recommendations) {
        const entry = document.createElement("li");
        entry.className = "card";
        entry.innerHTML =
          `<span class="card-rank">${card.rank}</span>` +
          `<span class="card-name"></span>` +
          `<span class="card-score">${card.score.toFixed(3)}</span>`;
        (entry.querySelector(".card-name") as HTMLElement).textContent = card.name;
        entry.addEventListener("click", () => this.insertName(card.name));
        cards.appendChild(entry);
      }
      element.appendChild(cards);
    }
    return element;
  }
}
