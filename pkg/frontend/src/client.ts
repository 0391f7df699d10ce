import {
  SaturnApiError,
  TimeoutError,
  TransportError,
  ValidationError,
} from "./errors.js";
import * as schemas from "./schemas.js";

export interface SaturnClientOptions {
  /** Base URL of the API server, e.g. "http://127.0.0.1:8360". */
  url: string;
  /** Bearer token, sent as the Authorization header when set. */
  token?: string;
  /** Per-attempt deadline in milliseconds. */
  timeoutMs?: number;
  /** Extra attempts after a failed GET. Writes are never retried. */
  retries?: number;
  /** Injection point for tests. */
  fetchFn?: typeof fetch;
}

/**
 * One HTTP exchange, exactly as the server sent it. `bytes` is the
 * untouched body; `text` is its UTF-8 decoding.
 */
export interface RawResponse {
  status: number;
  bytes: Uint8Array;
  text: string;
}

export interface RankingRecord {
  prompt_id: string;
  candidates: unknown[];
  /** Permutation of candidate indices, best first. */
  ranking: number[];
  labeler_id: string;
}

export interface InferPayload {
  tokens?: string[];
  features?: number[];
}

const DEFAULT_TIMEOUT_MS = 10_000;
const DEFAULT_RETRIES = 2;

/**
 * Protocol client for the platform API. It performs no computation on
 * what the server returns: vectors, scores, and predictions pass through
 * exactly as serialized on the wire. Safe for sequential use; create one
 * client per worker if you need parallelism.
 */
export class SaturnClient {
  readonly url: string;
  readonly timeoutMs: number;
  readonly retries: number;
  private readonly token: string | undefined;
  private readonly fetchFn: typeof fetch;

  constructor(options: SaturnClientOptions) {
    requireName("url", options.url);
    this.url = options.url.replace(/\/+$/, "");
    this.token = options.token;
    this.timeoutMs = options.timeoutMs ?? DEFAULT_TIMEOUT_MS;
    this.retries = options.retries ?? DEFAULT_RETRIES;
    this.fetchFn = options.fetchFn ?? fetch;
  }

  /** Connection summary safe to log: never contains the token. */
  describe(): string {
    const token = this.token === undefined ? "none" : "[redacted]";
    return (
      `SaturnClient(url=${this.redact(this.url)}, token=${token}, ` +
      `timeoutMs=${this.timeoutMs}, retries=${this.retries})`
    );
  }

  // -- typed operations ---------------------------------------------------

  /** Fetch a stored vector and its tags, exactly as the server holds them. */
  async getEmbedding(collection: string, key: string): Promise<schemas.EmbeddingDoc> {
    requireName("collection", collection);
    requireName("key", key);
    const raw = await this.request(
      "GET",
      `/v1/collections/${encodeURIComponent(collection)}/embeddings/${encodeURIComponent(key)}`,
    );
    return this.parse(raw, schemas.embeddingDoc, "get_embedding");
  }

  async search(
    collection: string,
    vector: number[],
    k: number,
    mode: "exact" | "ann" = "exact",
    tags?: string[],
  ): Promise<schemas.SearchResponse> {
    requireName("collection", collection);
    requireVector(vector);
    if (!Number.isInteger(k) || k < 1) {
      throw new ValidationError("k must be a positive integer");
    }
    const body: Record<string, unknown> = { vector, k, mode };
    if (tags !== undefined) {
      body.tags = tags;
    }
    const raw = await this.request(
      "POST",
      `/v1/collections/${encodeURIComponent(collection)}/search`,
      body,
    );
    return this.parse(raw, schemas.searchResponse, "search");
  }

  /** Fetch a model version's metadata by version id. */
  async getModel(versionId: string): Promise<schemas.VersionDoc> {
    requireName("version id", versionId);
    const raw = await this.request(
      "GET",
      `/v1/versions/${encodeURIComponent(versionId)}`,
    );
    return this.parse(raw, schemas.versionDoc, "get_model");
  }

  /** Run one prediction through a serving route. */
  async infer(route: string, payload: InferPayload): Promise<schemas.InferResponse> {
    requireName("route", route);
    const hasTokens = payload.tokens !== undefined;
    const hasFeatures = payload.features !== undefined;
    if (hasTokens === hasFeatures) {
      throw new ValidationError("payload needs exactly one of tokens or features");
    }
    if (payload.features !== undefined) {
      requireVector(payload.features);
    }
    const raw = await this.request(
      "POST",
      `/v1/infer/${encodeURIComponent(route)}`,
      payload,
    );
    return this.parse(raw, schemas.inferResponse, "infer");
  }

  /**
   * Submit a human preference ranking. The ranking must be a permutation
   * of the candidate indices; that is checked here, before any network
   * traffic, with the same rule the server enforces.
   */
  async submitRanking(record: RankingRecord): Promise<schemas.RankingReceipt> {
    requireName("prompt_id", record.prompt_id);
    requireName("labeler_id", record.labeler_id);
    if (!Array.isArray(record.candidates) || record.candidates.length === 0) {
      throw new ValidationError("candidates must be a non-empty array");
    }
    assertPermutation(record.ranking, record.candidates.length);
    const raw = await this.request("POST", "/v1/feedback/rankings", record);
    return this.parse(raw, schemas.rankingReceipt, "submit_ranking");
  }

  // -- transport ----------------------------------------------------------

  /**
   * One HTTP exchange against the API. The server's answer comes back
   * whatever its status; only transport-level failures throw. GETs are
   * retried up to the configured budget, anything else gets one attempt.
   */
  async request(method: string, path: string, body?: unknown): Promise<RawResponse> {
    const attempts = method === "GET" ? this.retries + 1 : 1;
    let lastFailure: TransportError | undefined;
    for (let i = 0; i < attempts; i++) {
      try {
        return await this.attempt(method, path, body);
      } catch (err) {
        if (!(err instanceof TransportError)) {
          throw err;
        }
        lastFailure = err;
      }
    }
    throw lastFailure;
  }

  private async attempt(method: string, path: string, body?: unknown): Promise<RawResponse> {
    const headers: Record<string, string> = {};
    if (this.token !== undefined) {
      headers.authorization = `Bearer ${this.token}`;
    }
    let payload: string | Uint8Array | undefined;
    if (body instanceof Uint8Array) {
      headers["content-type"] = "application/octet-stream";
      payload = body;
    } else if (body !== undefined) {
      headers["content-type"] = "application/json";
      payload = JSON.stringify(body);
    }
    const controller = new AbortController();
    const timer = setTimeout(() => controller.abort(), this.timeoutMs);
    try {
      const response = await this.fetchFn(this.url + path, {
        method,
        headers,
        body: payload,
        signal: controller.signal,
      });
      const bytes = new Uint8Array(await response.arrayBuffer());
      return { status: response.status, bytes, text: new TextDecoder().decode(bytes) };
    } catch (err) {
      if (controller.signal.aborted) {
        throw new TimeoutError(
          this.redact(`${method} ${path} took longer than ${this.timeoutMs}ms`),
        );
      }
      throw new TransportError(
        this.redact(`${method} ${path} failed: ${describeCause(err)}`),
      );
    } finally {
      clearTimeout(timer);
    }
  }

  private parse<T>(
    raw: RawResponse,
    schema: { safeParse(value: unknown): { success: boolean; data?: T; error?: { message: string } } },
    label: string,
  ): T {
    if (raw.status >= 400) {
      throw this.apiError(raw);
    }
    let decoded: unknown;
    try {
      decoded = JSON.parse(raw.text);
    } catch {
      throw new ValidationError(this.redact(`${label}: server sent a non-JSON body`));
    }
    const result = schema.safeParse(decoded);
    if (!result.success) {
      throw new ValidationError(
        this.redact(`${label}: response shape mismatch: ${result.error?.message}`),
      );
    }
    return result.data as T;
  }

  private apiError(raw: RawResponse): SaturnApiError {
    let code = "unknown";
    let message = raw.text.slice(0, 200);
    try {
      const doc = JSON.parse(raw.text) as { error?: { code?: unknown; message?: unknown } };
      if (doc !== null && typeof doc === "object" && doc.error !== undefined) {
        code = String(doc.error.code ?? code);
        message = String(doc.error.message ?? message);
      }
    } catch {
      // non-JSON error body, keep the raw text
    }
    return new SaturnApiError(raw.status, code, this.redact(message));
  }

  private redact(text: string): string {
    if (this.token === undefined || this.token === "") {
      return text;
    }
    return text.split(this.token).join("[redacted]");
  }
}

function requireName(what: string, value: string): void {
  if (typeof value !== "string" || value.length === 0) {
    throw new ValidationError(`${what} must be a non-empty string`);
  }
}

function requireVector(vector: number[]): void {
  const ok =
    Array.isArray(vector) &&
    vector.length > 0 &&
    vector.every((v) => typeof v === "number" && Number.isFinite(v));
  if (!ok) {
    throw new ValidationError("vector must be a non-empty array of finite numbers");
  }
}

function assertPermutation(ranking: number[], n: number): void {
  const bad = new ValidationError(
    `ranking must list each of the ${n} candidate indices exactly once`,
  );
  if (!Array.isArray(ranking) || ranking.length !== n) {
    throw bad;
  }
  const seen = new Set<number>();
  for (const r of ranking) {
    if (!Number.isInteger(r) || r < 0 || r >= n || seen.has(r)) {
      throw bad;
    }
    seen.add(r);
  }
}

function describeCause(err: unknown): string {
  if (err instanceof Error) {
    const parts = [err.message];
    if (err.cause instanceof Error && err.cause.message !== "") {
      parts.push(err.cause.message);
    }
    return parts.join(": ");
  }
  return String(err);
}
