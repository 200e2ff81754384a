/* tslint:disable */
/* eslint-disable */

/**
 * Success probability against the number of probes `k`, for `m` open ports.
 */
export function birthday_curve(m: number, k_max: number, steps: number, port_space: number): string;

/**
 * Small campaign over the default population. `filter` is one of
 * `none`, `random`, `tcp`, `quic`.
 */
export function mini_campaign(trials: number, seed: bigint, edm_share: number, filter: string, refined_wait: boolean, role_alternation: boolean): string;

/**
 * Single TCP punch between two port-restricted NATs on a jitter-free
 * topology, with the initiator's wait off by `factor` times the NAT-to-NAT
 * latency for each factor in `[-max_factor, max_factor]`.
 */
export function sync_margin_sweep(access_ms: number, nat_offset_ms: number, max_factor: number, steps: number, rst: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly birthday_curve: (a: number, b: number, c: number, d: number) => [number, number];
    readonly mini_campaign: (a: number, b: bigint, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly sync_margin_sweep: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
