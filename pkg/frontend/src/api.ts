export interface LifestageInfo {
	id: number;
	name: string;
}

export interface ModelInfo {
	lifestages: LifestageInfo[];
	active_basis_count: number;
	num_bases: number;
	shape_coefficients: number;
	expression_coefficients: number;
	checkpoint_iteration: number;
	sh_degree: number;
	max_image_size: number;
}

export interface CameraRequest {
	azimuth: number;
	elevation: number;
	distance?: number;
	width: number;
	height: number;
}

export interface RenderRequest {
	lifestage_weights: Record<string, number>;
	shape_coeffs: number[];
	expression_coeffs: number[];
	camera: CameraRequest;
}

/** Minimal fetch-shaped dependency so tests can mock the service. */
export type FetchLike = (
	url: string,
	init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{
	ok: boolean;
	status: number;
	json(): Promise<unknown>;
	blob(): Promise<Blob>;
	headers: { get(name: string): string | null };
}>;

export async function fetchModelInfo(
	baseUrl: string,
	fetchFn: FetchLike,
): Promise<ModelInfo> {
	const res = await fetchFn(`${baseUrl}/model/info`);
	if (!res.ok) {
		throw new Error(`model info failed with status ${res.status}`);
	}
	return (await res.json()) as ModelInfo;
}
