export { SaturnClient } from "./client.js";
export type {
  SaturnClientOptions,
  RawResponse,
  RankingRecord,
  InferPayload,
} from "./client.js";
export {
  SaturnClientError,
  SaturnApiError,
  TransportError,
  TimeoutError,
  ValidationError,
} from "./errors.js";
export type {
  EmbeddingDoc,
  SearchHit,
  SearchResponse,
  VersionDoc,
  InferResponse,
  RankingReceipt,
} from "./schemas.js";
