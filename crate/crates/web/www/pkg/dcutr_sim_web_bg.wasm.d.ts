/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const birthday_curve: (a: number, b: number, c: number, d: number) => [number, number];
export const mini_campaign: (a: number, b: bigint, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const sync_margin_sweep: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
