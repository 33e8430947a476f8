// Mirrors of the moelab v1 JSON schemas the tuner consumes.

export interface AttentionSpec {
  kind: string;
  num_heads: number;
  head_dim?: number;
  num_kv_heads?: number;
  q_lora_rank?: number;
  kv_lora_rank?: number;
  qk_nope_head_dim?: number;
  qk_rope_head_dim?: number;
  v_head_dim?: number;
}

export interface ModelSpec {
  name: string;
  num_layers: number;
  num_dense_prefix_layers: number;
  num_experts: number;
  top_k: number;
  hidden_dim: number;
  ffn_hidden_dim: number;
  dense_ffn_hidden_dim?: number;
  shared_expert_ffn_dim?: number;
  num_shared_experts: number;
  latent_dim?: number | null;
  has_mtp: boolean;
  vocab_size: number;
  gated_mlp?: boolean;
  attention: AttentionSpec;
  params_total?: number | null;
  params_active?: number | null;
}

export interface ClusterSpec {
  num_gpus: number;
  gpu_memory: number;
  nvlink_domain_size: number;
  intra_domain_bw: number;
  inter_node_bw: number;
  per_message_latency: number;
  host_link_bw: number;
  gpu_peak_flops?: number;
}

export interface ParallelConfig {
  tp: number;
  cp: number;
  dp: number;
  pp: number;
  etp: number;
  ep: number;
  edp: number;
  vpp: number;
  microbatch_size: number;
  global_batch_size: number;
  seq_len: number;
  precision_recipe: string;
  pipeline_layout?: string | null;
}

export interface TrainingJobSpec {
  model: ModelSpec;
  cluster: ClusterSpec;
  parallel: ParallelConfig;
  recompute_modules: string[];
  offload_modules: string[];
  mem_efficient_permutation: boolean;
  overlap_moe_comm: boolean;
  wd_split: boolean;
  capacity_factor?: number | null;
  pad_to_capacity: boolean;
  imbalance_factor: number;
  optimizer_moment_bytes: number;
}

export interface ApiEnvelope<T> {
  schema_version: number;
  request_digest: string | null;
  diagnostics: unknown[];
  result: T | null;
}

export interface MemoryReport {
  weights_and_grads: number;
  master_weights_and_optimizer: number;
  activations: number;
  total: number;
  deltas: Record<string, number>;
  inventory: Record<string, number>;
  assumptions: Record<string, unknown>;
  per_rank: unknown[];
}

export interface CostReport {
  tokens_per_microbatch: number;
  a2a_send_volume_bytes: number;
  a2a_tier: string;
  dispatch_time_s: number;
  dispatch_combine_ops_forward: number;
  comm_time_forward_s: number;
  exposed_comm_fraction: number;
  flops_share: Record<string, number>;
  advisor: AdvisorHit[];
}

export interface AdvisorHit {
  guideline: string;
  severity: string;
  message: string;
}

export interface ScheduleEvent {
  rank: number;
  microbatch: number;
  chunk: number;
  kind: string;
  start: number;
  end: number;
}

export interface ScheduleResult {
  makespan: number;
  bubble_ratio: number;
  peak_inflight: number[];
  events?: ScheduleEvent[];
  layout_canonical?: string;
}

export type EndpointName = "estimate" | "cost" | "advise" | "simulate";
