/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_fusion_json: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const demo_metrics_json: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const demo_modalities: (a: number) => [number, number];
export const demo_new: (a: number, b: bigint) => [number, number, number];
export const demo_size: (a: number) => number;
export const demo_slice_rgba: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
