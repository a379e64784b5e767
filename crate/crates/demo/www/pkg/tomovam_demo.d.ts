/* tslint:disable */
/* eslint-disable */

/**
 * Row-major image plus a few scalar readouts.
 */
export class Image {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    pixels(): Float64Array;
    readonly height: number;
    readonly note: string;
    readonly width: number;
}

/**
 * Renders darkfield frames of a scattering disk pair through the refracting vial,
 * then reconstructs the mid-plane slice.
 */
export function ost_roundtrip(radius_mm: number, offset_mm: number, n_red: number, angle_step_deg: number): Image;

/**
 * Simulated single-slice dose of a test shape at a projection stage.
 *
 * `shape`: `disk`, `boat` or `annulus`; `stage`: 0 raw, 1 background, 2 normalized.
 */
export function projection_demo(shape: string, stage: number, background: number, pixels: number): Image;

/**
 * Columns `[x, x_v closed form, delta closed form, x_v traced, delta traced]`
 * for `samples` detector coordinates across 0.95 of the vial radius, flattened row by row.
 */
export function remap_curves(camera: boolean, n_blue: number, n_red: number, throw_ratio: number, camera_distance_mm: number, samples: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_image_free: (a: number, b: number) => void;
    readonly image_height: (a: number) => number;
    readonly image_note: (a: number) => [number, number];
    readonly image_pixels: (a: number) => [number, number];
    readonly image_width: (a: number) => number;
    readonly ost_roundtrip: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly projection_demo: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly remap_curves: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
