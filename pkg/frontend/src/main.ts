import { ApiClient } from "./api.js";
import { ChatStore } from "./store.js";
import { ChatView } from "./view.js";

function apiBase(): string {
  const fromWindow = (window as { DACRS_API_BASE?: unknown }).DACRS_API_BASE;
  if (typeof fromWindow === "string") return fromWindow;
  const meta = document.querySelector('meta[name="dacrs-api-base"]');
  return meta?.getAttribute("content") ?? "";
}

const root = document.getElementById("app");
if (root === null) throw new Error("missing #app mount point");
new ChatView(root, new ChatStore(new ApiClient(apiBase())));
