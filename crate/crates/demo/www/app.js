import init, { Moons, overlap_curve } from "./pkg/np_robust_demo.js";

const $ = (id) => document.getElementById(id);
const RES = 96;
let moons;

function colour(v) {
  // blue (0) to orange (1)
  const r = Math.round(40 + 215 * v), g = Math.round(110 + 60 * v), b = Math.round(220 - 190 * v);
  return [r, g, b];
}

function drawPoints(ctx, w, h) {
  const pts = moons.points(), labels = moons.labels();
  for (let i = 0; i < labels.length; i++) {
    ctx.fillStyle = labels[i] ? "#a33" : "#236";
    ctx.beginPath();
    ctx.arc(pts[2 * i] * w, (1 - pts[2 * i + 1]) * h, 2.5, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function drawField() {
  const k = +$("k").value;
  $("k-out").value = k;
  const f = moons.field(k, RES, $("by-class").checked);
  const c = $("field"), ctx = c.getContext("2d");
  const img = ctx.createImageData(RES, RES);
  f.forEach((v, i) => {
    const [r, g, b] = colour(Math.min(1, Math.max(0, v)));
    img.data.set([r, g, b, 255], 4 * i);
  });
  const tmp = new OffscreenCanvas(RES, RES);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, c.width, c.height);
  drawPoints(ctx, c.width, c.height);
}

function drawGraph() {
  const k = +$("gk").value;
  $("gk-out").value = k;
  const e = moons.edges(k), pts = moons.points();
  const c = $("graph"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  for (let t = 0; t < e.length; t += 3) {
    const i = e[t], j = e[t + 1];
    ctx.strokeStyle = `rgba(30, 30, 30, ${e[t + 2]})`;
    ctx.beginPath();
    ctx.moveTo(pts[2 * i] * c.width, (1 - pts[2 * i + 1]) * c.height);
    ctx.lineTo(pts[2 * j] * c.width, (1 - pts[2 * j + 1]) * c.height);
    ctx.stroke();
  }
  drawPoints(ctx, c.width, c.height);
  $("edge-count").value = `${e.length / 3} edges`;
}

function drawCurve() {
  const p = +$("p").value;
  $("p-out").value = p;
  const c = $("curve"), ctx = c.getContext("2d");
  const pad = 36, w = c.width - 2 * pad, h = c.height - 2 * pad;
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#444";
  ctx.fillText("0", pad - 4, c.height - pad + 14);
  ctx.fillText("eps = 2r", pad + w - 30, c.height - pad + 14);
  ctx.fillText("2", pad - 14, pad + 4);
  const drawOne = (dim, style) => {
    const xy = overlap_curve(dim, 1.0, 200);
    ctx.strokeStyle = style;
    ctx.beginPath();
    for (let t = 0; t < xy.length; t += 2) {
      const x = pad + (xy[t] / 2) * w, y = pad + h - (xy[t + 1] / 2) * h;
      t === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    }
    ctx.stroke();
  };
  drawOne(1, "#bbb");
  drawOne(p, "#c50");
}

function rebuild() {
  const noise = +$("noise").value;
  $("noise-out").value = noise;
  moons?.free();
  moons = new Moons(400, noise, 7n);
  drawField();
  drawGraph();
}

await init();
rebuild();
drawCurve();
$("status").textContent = "";
$("k").addEventListener("input", drawField);
$("by-class").addEventListener("change", drawField);
$("noise").addEventListener("change", rebuild);
$("gk").addEventListener("input", drawGraph);
$("p").addEventListener("input", drawCurve);
