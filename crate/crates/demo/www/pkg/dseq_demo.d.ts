/* tslint:disable */
/* eslint-disable */

export function image_size(): number;

export function sample_mask_rgba(seed: bigint, label: number, size: number): Uint8Array;

export function sample_rgba(seed: bigint, label: number, size: number): Uint8Array;

export function schedules(epochs: number, steps_per_epoch: number, warmup_epochs: number): string;

export function select_regions(seed: bigint, label: number, n: number, alpha: number, lambda: number, region_seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly image_size: () => number;
    readonly sample_mask_rgba: (a: bigint, b: number, c: number) => [number, number, number, number];
    readonly sample_rgba: (a: bigint, b: number, c: number) => [number, number, number, number];
    readonly schedules: (a: number, b: number, c: number) => [number, number, number, number];
    readonly select_regions: (a: bigint, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
