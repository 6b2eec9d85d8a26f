import { fetchModelInfo, type FetchLike, type ModelInfo } from "./api.js";
import { RenderClient } from "./render_client.js";
import {
	buildRenderRequest,
	initialState,
	setLifestageWeight,
	type ExplorerState,
} from "./state.js";
import { attachOrbit, banner, slider, type SliderHandle } from "./ui.js";

const params = new URLSearchParams(window.location.search);
const SERVICE_URL =
	params.get("service") ?? `${window.location.protocol}//127.0.0.1:8080`;

const app = document.getElementById("app") as HTMLElement;
const showBanner = banner(app);
const viewport = document.getElementById("viewport") as HTMLElement;
const img = document.getElementById("render") as HTMLImageElement;
const latencyEl = document.getElementById("latency") as HTMLElement;
const iterEl = document.getElementById("iteration") as HTMLElement;
const controls = document.getElementById("controls") as HTMLElement;
const refreshBtn = document.getElementById("refresh") as HTMLButtonElement;

let state: ExplorerState | null = null;
let lifestageSliders: SliderHandle[] = [];
let objectUrl: string | null = null;

const client = new RenderClient({
	baseUrl: SERVICE_URL,
	fetchFn: fetch.bind(window) as FetchLike,
	onResult: (r) => {
		if (objectUrl) URL.revokeObjectURL(objectUrl);
		objectUrl = URL.createObjectURL(r.blob);
		img.src = objectUrl;
		latencyEl.textContent = `${r.latencyMs.toFixed(0)} ms`;
	},
	onError: (msg) => showBanner(`render failed: ${msg}`),
	onInFlight: (b) => viewport.classList.toggle("busy", b),
});

function requestRender(immediate = false): void {
	if (!state) return;
	showBanner(null);
	const body = buildRenderRequest(state);
	if (immediate) client.fireNow(body);
	else client.request(body);
}

function buildControls(info: ModelInfo): void {
	controls.innerHTML = "";
	state = initialState(info);
	iterEl.textContent = `checkpoint iteration ${info.checkpoint_iteration}, ` +
		`${info.active_basis_count}/${info.num_bases} bases active`;

	const lsGroup = document.createElement("fieldset");
	lsGroup.innerHTML = "<legend>lifestage blend</legend>";
	lifestageSliders = info.lifestages.map((ls, i) => {
		const h = slider({
			label: ls.name,
			min: 0,
			max: 1,
			value: state!.lifestageWeights[i],
			onInput: (v) => {
				state!.lifestageWeights = setLifestageWeight(
					state!.lifestageWeights,
					i,
					v,
				);
				lifestageSliders.forEach((s, j) =>
					s.set(state!.lifestageWeights[j]),
				);
				requestRender();
			},
		});
		lsGroup.append(h.root);
		return h;
	});
	controls.append(lsGroup);

	const exprGroup = document.createElement("fieldset");
	exprGroup.innerHTML = "<legend>expression</legend>";
	for (let i = 0; i < info.expression_coefficients; i++) {
		exprGroup.append(
			slider({
				label: `expr ${i}`,
				min: -1,
				max: 1,
				value: 0,
				onInput: (v) => {
					state!.expression[i] = v;
					requestRender();
				},
			}).root,
		);
	}
	controls.append(exprGroup);

	const shapeGroup = document.createElement("fieldset");
	shapeGroup.innerHTML = "<legend>shape</legend>";
	for (let i = 0; i < info.shape_coefficients; i++) {
		shapeGroup.append(
			slider({
				label: `shape ${i}`,
				min: -1,
				max: 1,
				value: 0,
				onInput: (v) => {
					state!.shape[i] = v;
					requestRender();
				},
			}).root,
		);
	}
	controls.append(shapeGroup);
	controls.classList.remove("disabled");
}

attachOrbit(viewport, {
	onDrag: (dAz, dEl) => {
		if (!state) return;
		state.orbit.azimuth = (state.orbit.azimuth + dAz) % 360;
		state.orbit.elevation = Math.min(
			85,
			Math.max(-85, state.orbit.elevation + dEl),
		);
		latencyEl.textContent =
			`az ${state.orbit.azimuth.toFixed(0)}°, ` +
			`el ${state.orbit.elevation.toFixed(0)}°`;
	},
	onRelease: () => requestRender(),
});

async function sync(): Promise<void> {
	try {
		const info = await fetchModelInfo(
			SERVICE_URL,
			fetch.bind(window) as FetchLike,
		);
		showBanner(null);
		buildControls(info);
		requestRender(true);
	} catch (err) {
		controls.classList.add("disabled");
		showBanner(
			`service unreachable at ${SERVICE_URL} — ` +
				`start it with: headspan serve --checkpoint <ckpt> (${err})`,
		);
	}
}

refreshBtn.addEventListener("click", () => void sync());
void sync();
