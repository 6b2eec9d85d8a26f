export interface SliderProps {
	label: string;
	min: number;
	max: number;
	value: number;
	step?: number;
	onInput?: (value: number) => void;
}

export interface SliderHandle {
	root: HTMLElement;
	input: HTMLInputElement;
	set(value: number): void;
}

export function slider(props: SliderProps): SliderHandle {
	const wrap = document.createElement("label");
	wrap.className = "slider-row";

	const title = document.createElement("span");
	title.textContent = props.label;

	const value = document.createElement("span");
	value.className = "mono";
	value.textContent = props.value.toFixed(2);

	const input = document.createElement("input");
	input.type = "range";
	input.min = String(props.min);
	input.max = String(props.max);
	input.step = String(props.step ?? 0.01);
	input.value = String(props.value);

	input.addEventListener("input", () => {
		const next = Number(input.value);
		value.textContent = next.toFixed(2);
		props.onInput?.(next);
	});

	wrap.append(title, value, input);
	return {
		root: wrap,
		input,
		set(v: number) {
			input.value = String(v);
			value.textContent = v.toFixed(2);
		},
	};
}

export function banner(parent: HTMLElement): (msg: string | null) => void {
	const el = document.createElement("div");
	el.className = "banner hidden";
	parent.prepend(el);
	return (msg) => {
		if (msg === null) {
			el.classList.add("hidden");
		} else {
			el.textContent = msg;
			el.classList.remove("hidden");
		}
	};
}

export interface OrbitDragCallbacks {
	onDrag(dAzimuth: number, dElevation: number): void;
	onRelease(): void;
}

/** Click-drag orbit control on the render viewport. */
export function attachOrbit(el: HTMLElement, cb: OrbitDragCallbacks): void {
	let dragging = false;
	let lastX = 0;
	let lastY = 0;
	el.addEventListener("mousedown", (e) => {
		dragging = true;
		lastX = e.clientX;
		lastY = e.clientY;
		e.preventDefault();
	});
	window.addEventListener("mousemove", (e) => {
		if (!dragging) return;
		cb.onDrag((e.clientX - lastX) * 0.5, (e.clientY - lastY) * 0.5);
		lastX = e.clientX;
		lastY = e.clientY;
	});
	window.addEventListener("mouseup", () => {
		if (!dragging) return;
		dragging = false;
		cb.onRelease();
	});
}
