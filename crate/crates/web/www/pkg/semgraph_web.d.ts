/* tslint:disable */
/* eslint-disable */

/**
 * Latent anchoring of a given program on the sentence.
 */
export function anchor_program(grammar: string, sentence: string, weights: string, program: string, iters: number, beta0: number): string;

/**
 * MAP decoding with its Frank-Wolfe trace and the relaxed arc masses.
 */
export function decode_sentence(grammar: string, sentence: string, weights: string, iters: number, beta0: number): string;

export function default_grammar(): string;

export function default_sentence(): string;

export function default_weights(): string;

/**
 * Surrogate log-partition next to the exact one and the exact MAP value
 * (sentences of at most four words).
 */
export function partition_bound(grammar: string, sentence: string, weights: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly anchor_program: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number];
    readonly decode_sentence: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number];
    readonly default_grammar: () => [number, number];
    readonly default_sentence: () => [number, number];
    readonly default_weights: () => [number, number];
    readonly partition_bound: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
