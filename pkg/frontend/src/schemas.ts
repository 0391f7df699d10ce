import { z } from "zod";

// Response shapes for the typed operations. Loose objects: the server may
// add fields without breaking older clients.

export const embeddingDoc = z.looseObject({
  key: z.string(),
  vector: z.array(z.number()),
  tags: z.array(z.string()),
  updated_at: z.number(),
});

export const searchHit = z.looseObject({
  key: z.string(),
  score: z.number(),
  rank: z.int(),
});

export const searchResponse = z.looseObject({
  results: z.array(searchHit),
});

export const versionDoc = z.looseObject({
  version_id: z.string(),
  model_id: z.string(),
  stage: z.string(),
  parent_version: z.string().nullable(),
});

export const inferResponse = z.looseObject({
  prediction: z.number(),
  model_version: z.string(),
  latency_ms: z.number(),
});

export const rankingReceipt = z.looseObject({
  record_id: z.string(),
  prompt_id: z.string(),
  ranking: z.array(z.int()),
  labeler_id: z.string(),
  submitted_at: z.number(),
});

export type EmbeddingDoc = z.infer<typeof embeddingDoc>;
export type SearchHit = z.infer<typeof searchHit>;
export type SearchResponse = z.infer<typeof searchResponse>;
export type VersionDoc = z.infer<typeof versionDoc>;
export type InferResponse = z.infer<typeof inferResponse>;
export type RankingReceipt = z.infer<typeof rankingReceipt>;
