/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const image_size: () => number;
export const sample_mask_rgba: (a: bigint, b: number, c: number) => [number, number, number, number];
export const sample_rgba: (a: bigint, b: number, c: number) => [number, number, number, number];
export const schedules: (a: number, b: number, c: number) => [number, number, number, number];
export const select_regions: (a: bigint, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
