/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const anchor_program: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number];
export const decode_sentence: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number];
export const default_grammar: () => [number, number];
export const default_sentence: () => [number, number];
export const default_weights: () => [number, number];
export const partition_bound: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
