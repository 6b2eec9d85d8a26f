import type { ModelInfo, RenderRequest } from "./api.js";

export interface OrbitState {
	azimuth: number;
	elevation: number;
	distance?: number;
}

export interface ExplorerState {
	lifestageWeights: number[]; // always a convex combination
	expression: number[];
	shape: number[];
	orbit: OrbitState;
	imageSize: number;
	lastLatencyMs: number | null;
	requestInFlight: boolean;
}

export function initialState(info: ModelInfo, imageSize = 256): ExplorerState {
	const n = info.lifestages.length;
	return {
		lifestageWeights: new Array(n).fill(1 / n),
		expression: new Array(info.expression_coefficients).fill(0),
		shape: new Array(info.shape_coefficients).fill(0),
		orbit: { azimuth: 0, elevation: 0 },
		imageSize: Math.min(imageSize, info.max_image_size),
		lastLatencyMs: null,
		requestInFlight: false,
	};
}

/** Normalize non-negative values to sum to 1 (uniform when all zero). */
export function toConvex(values: number[]): number[] {
	const clipped = values.map((v) => (v > 0 ? v : 0));
	const total = clipped.reduce((a, b) => a + b, 0);
	if (total <= 0) {
		return values.map(() => 1 / values.length);
	}
	return clipped.map((v) => v / total);
}

/**
 * Move one lifestage slider and renormalize the rest so the displayed
 * weights stay a convex combination: the moved slider takes `value` and
 * the others share the remainder proportionally.
 */
export function setLifestageWeight(
	weights: number[],
	index: number,
	value: number,
): number[] {
	const v = Math.min(Math.max(value, 0), 1);
	const others = weights.reduce((a, b, i) => (i === index ? a : a + b), 0);
	const out = weights.map((w, i) => {
		if (i === index) return v;
		if (others <= 0) return (1 - v) / (weights.length - 1);
		return (w / others) * (1 - v);
	});
	return toConvex(out);
}

export function buildRenderRequest(state: ExplorerState): RenderRequest {
	const weights: Record<string, number> = {};
	toConvex(state.lifestageWeights).forEach((w, i) => {
		weights[String(i)] = w;
	});
	return {
		lifestage_weights: weights,
		shape_coeffs: [...state.shape],
		expression_coeffs: [...state.expression],
		camera: {
			azimuth: state.orbit.azimuth,
			elevation: state.orbit.elevation,
			...(state.orbit.distance !== undefined
				? { distance: state.orbit.distance }
				: {}),
			width: state.imageSize,
			height: state.imageSize,
		},
	};
}
