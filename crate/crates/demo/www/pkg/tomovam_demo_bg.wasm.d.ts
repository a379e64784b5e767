/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_image_free: (a: number, b: number) => void;
export const image_height: (a: number) => number;
export const image_note: (a: number) => [number, number];
export const image_pixels: (a: number) => [number, number];
export const image_width: (a: number) => number;
export const ost_roundtrip: (a: number, b: number, c: number, d: number) => [number, number, number];
export const projection_demo: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const remap_curves: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
