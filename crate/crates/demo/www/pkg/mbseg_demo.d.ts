/* tslint:disable */
/* eslint-disable */

/**
 * A phantom case plus the derived views the page shows.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Fusion of `n` raters sharing one sensitivity/specificity, as JSON.
     */
    fusion_json(n: number, sensitivity: number, specificity: number, seed: bigint): string;
    /**
     * Case metrics of a perturbed truth, as JSON.
     */
    metrics_json(dx: number, dy: number, dz: number, grow: number, connectivity: number): string;
    modalities(): string[];
    constructor(size: number, seed: bigint);
    size(): number;
    /**
     * RGBA pixels of a square slice (`size * size * 4` bytes).
     */
    slice_rgba(modality: string, plane: string, index: number, overlay: boolean): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_fusion_json: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly demo_metrics_json: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_modalities: (a: number) => [number, number];
    readonly demo_new: (a: number, b: bigint) => [number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_slice_rgba: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
