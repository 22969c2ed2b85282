/* tslint:disable */
/* eslint-disable */

/**
 * Band energies of the same field and the gates of a single-weight router
 * whose weight is the reciprocal of the mean expert-band feature, so that
 * logits are band magnitudes relative to the average, divided by
 * `temperature`. The `top_k` highest gates are marked active.
 */
export function band_map(size: number, seed: bigint, viscosity: number, time: number, chunk: number, grid: number, top_k: number, temperature: number): string;

/**
 * Dense versus FreqMoE cost rows for the given mode counts.
 */
export function flop_curves(modes: Uint32Array, width: number, layers: number, chunk: number, rank: number, top_k: number, grid_size: number): string;

/**
 * Random turbulent vorticity evolved for `time` units with the unforced
 * pseudo-spectral solver, plus its radial energy spectrum.
 */
export function turbulent_field(size: number, seed: bigint, viscosity: number, time: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly band_map: (a: number, b: bigint, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly flop_curves: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly turbulent_field: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
