/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    argmax_rgba(image: number): Uint8Array;
    /**
     * Coverage, set size and mask statistics over a fixed alpha grid, as JSON.
     */
    coverage_curve(variant: string, class_conditional: boolean): string;
    height(): number;
    images(): number;
    /**
     * RGBA pseudo-label mask of one unlabeled image. Ignored pixels are light grey.
     */
    mask_rgba(variant: string, alpha: number, image: number, class_conditional: boolean): Uint8Array;
    constructor(seed: number);
    /**
     * RGBA heat map of the per-pixel thresholds.
     */
    quantile_rgba(variant: string, alpha: number): Uint8Array;
    truth_rgba(image: number): Uint8Array;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_argmax_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_coverage_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_images: (a: number) => number;
    readonly demo_mask_rgba: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_quantile_rgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_truth_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
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
