import init, { kernel_branches, equivariance_map, synth_warp } from "./pkg/rkf_demo.js";

const $ = (id) => document.getElementById(id);
const SIZE = 96;

// Grey plane; `signed` maps [-m, m] around mid-grey, negative values in `shade` mark invalid pixels.
function drawPlane(values, w, h, { scale = 4, signed = false, shade = false } = {}) {
  const canvas = document.createElement("canvas");
  canvas.width = w;
  canvas.height = h;
  canvas.style.width = `${w * scale}px`;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(w, h);
  let lo = Infinity, hi = -Infinity;
  for (const v of values) if (!(shade && v < 0)) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const m = Math.max(Math.abs(lo), Math.abs(hi)) || 1;
  for (let i = 0; i < w * h; i++) {
    const v = values[i];
    let r, g, b;
    if (shade && v < 0) {
      [r, g, b] = [70, 40, 90];
    } else if (signed) {
      const t = v / m;
      [r, g, b] = t >= 0 ? [255, 255 * (1 - t), 255 * (1 - t)] : [255 * (1 + t), 255 * (1 + t), 255];
    } else {
      const t = hi > lo ? (v - lo) / (hi - lo) : 0;
      r = g = b = 255 * t;
    }
    img.data.set([r, g, b, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
  return canvas;
}

function labelled(canvas, text) {
  const div = document.createElement("div");
  div.className = "cell";
  div.append(canvas, document.createElement("br"), text);
  return div;
}

function guard(f) {
  return () => {
    try {
      $("error").textContent = "";
      f();
    } catch (e) {
      $("error").textContent = String(e);
    }
  };
}

function buildWeights(values) {
  const k = Number($("k").value);
  const box = $("weights");
  box.style.gridTemplateColumns = `repeat(${k}, auto)`;
  box.replaceChildren();
  for (let i = 0; i < k * k; i++) {
    const input = document.createElement("input");
    input.type = "number";
    input.step = "0.1";
    input.value = (values ? values[i] : i === 1 ? 1 : 0).toFixed(2);
    input.addEventListener("input", guard(renderKernels));
    box.append(input);
  }
}

function renderKernels() {
  const k = Number($("k").value);
  const n = Number($("n").value);
  const weights = Float32Array.from($("weights").querySelectorAll("input"), (el) => Number(el.value));
  const out = kernel_branches(weights, k, n);
  const row = $("branches");
  row.replaceChildren();
  for (let b = 0; b <= n; b++) {
    const plane = out.subarray(b * k * k, (b + 1) * k * k);
    const name = b < n ? `${Math.round((360 * b) / n)}°` : "fused";
    row.append(labelled(drawPlane(plane, k, k, { scale: 64 / k * 1.2, signed: true }), name));
  }
}

function renderEquivariance() {
  const q = Number($("eq-q").value);
  const out = equivariance_map($("eq-style").value, Number($("eq-seed").value), SIZE, q, $("eq-rkf").checked);
  const n = SIZE * SIZE;
  const names = ["f(rotate x)", "rotate f(x)", "|difference|"];
  $("eq").replaceChildren(...names.map((name, i) => labelled(drawPlane(out.subarray(i * n, (i + 1) * n), SIZE, SIZE, { scale: 2.5 }), name)));
  let max = 0;
  for (const v of out.subarray(2 * n)) max = Math.max(max, v);
  $("eq-max").textContent = `max |difference| = ${max.toExponential(2)}`;
}

function renderWarp() {
  const out = synth_warp("multi_freq_noise", 7, SIZE, Number($("w-angle").value), Number($("w-scale").value),
    Number($("w-shear").value), Number($("w-persp").value));
  const n = SIZE * SIZE;
  $("warp").replaceChildren(
    labelled(drawPlane(out.subarray(0, n), SIZE, SIZE, { scale: 3 }), "image"),
    labelled(drawPlane(out.subarray(n), SIZE, SIZE, { scale: 3, shade: true }), "warped"),
  );
}

await init();
buildWeights();
$("k").addEventListener("change", guard(() => { buildWeights(); renderKernels(); }));
$("n").addEventListener("input", guard(renderKernels));
$("random-kernel").addEventListener("click", guard(() => {
  const k = Number($("k").value);
  buildWeights(Array.from({ length: k * k }, () => Math.random() * 2 - 1));
  renderKernels();
}));
for (const id of ["eq-style", "eq-seed", "eq-q", "eq-rkf"]) $(id).addEventListener("input", guard(renderEquivariance));
for (const id of ["w-angle", "w-scale", "w-shear", "w-persp"]) $(id).addEventListener("input", guard(renderWarp));
guard(renderKernels)();
guard(renderEquivariance)();
guard(renderWarp)();
