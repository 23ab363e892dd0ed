import init, { partition, optimize, select } from "./pkg/paretomerge_web.js";

const $ = (id) => document.getElementById(id);
const PALETTE = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"];

function call(fn, input) {
  try {
    $("error").textContent = "";
    return JSON.parse(fn(JSON.stringify(input)));
  } catch (e) {
    $("error").textContent = String(e.message || e);
    return null;
  }
}

// Small seeded generator so the page is reproducible.
function mulberry32(seed) {
  return () => {
    seed |= 0; seed = (seed + 0x6d2b79f5) | 0;
    let t = Math.imul(seed ^ (seed >>> 15), 1 | seed);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

// ---- partition explorer

let profile = [];

function randomProfile(n, rng = Math.random) {
  const out = [];
  let level = 1 + rng() * 2;
  for (let i = 0; i < n; i++) {
    if (rng() < 0.18) level = 0.3 + rng() * 3;
    out.push(Math.max(0.05, level + (rng() - 0.5) * 0.6));
  }
  return out;
}

function drawPartition() {
  const k = +$("p-k").value;
  const lambda = Math.pow(10, +$("p-lambda").value);
  $("p-k-val").textContent = k;
  $("p-lambda-val").textContent = lambda.toPrecision(2);
  const res = call(partition, { d: profile, K: Math.min(k, profile.length), lambda, normalize: $("p-normalize").checked });
  const c = $("p-canvas"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  if (!res) return;
  const d = res.report.d;
  const max = Math.max(...d, 1e-9);
  const w = c.width / d.length, h = c.height - 20;
  res.report.blocks.forEach(([s, e], b) => {
    g.fillStyle = PALETTE[b % PALETTE.length] + "22";
    g.fillRect(s * w, 0, (e - s + 1) * w, h);
    g.fillStyle = PALETTE[b % PALETTE.length];
    for (let l = s; l <= e; l++) g.fillRect(l * w + 2, h - (d[l] / max) * (h - 10), w - 4, (d[l] / max) * (h - 10));
    const mean = d.slice(s, e + 1).reduce((a, v) => a + v, 0) / (e - s + 1);
    g.strokeStyle = "#222";
    g.beginPath();
    g.moveTo(s * w, h - (mean / max) * (h - 10));
    g.lineTo((e + 1) * w, h - (mean / max) * (h - 10));
    g.stroke();
  });
  g.fillStyle = "#444";
  g.font = "11px system-ui";
  for (let l = 0; l < d.length; l += Math.ceil(d.length / 24)) g.fillText(l, l * w + 2, c.height - 5);
  const sizes = res.report.blocks.map(([s, e]) => e - s + 1).join(", ");
  $("p-summary").textContent = `cost J = ${res.report.cost.toFixed(4)}; block sizes ${sizes}; per-block cost ${res.block_costs.map((v) => v.toFixed(3)).join(", ")}`;
}

function editProfile(ev) {
  if (ev.buttons !== 1 && ev.type !== "mousedown") return;
  const c = $("p-canvas"), r = c.getBoundingClientRect();
  const l = Math.floor(((ev.clientX - r.left) / r.width) * profile.length);
  if (l < 0 || l >= profile.length) return;
  const max = Math.max(...profile);
  const h = c.height - 20;
  const frac = 1 - (ev.clientY - r.top) * (c.height / r.height) / h;
  profile[l] = Math.max(0, frac) * max * 1.1;
  drawPartition();
}

// ---- synthetic search

let lastRun = null;

function axes(g, c, pad, xs, ys, xlabel, ylabel) {
  g.strokeStyle = "#999";
  g.strokeRect(pad, 10, c.width - pad - 10, c.height - pad - 10);
  g.fillStyle = "#444";
  g.font = "11px system-ui";
  g.fillText(xlabel, c.width / 2, c.height - 8);
  g.save();
  g.translate(12, c.height / 2);
  g.rotate(-Math.PI / 2);
  g.fillText(ylabel, 0, 0);
  g.restore();
  g.fillText(xs[0].toFixed(2), pad, c.height - pad + 14);
  g.fillText(xs[1].toFixed(2), c.width - 40, c.height - pad + 14);
  g.fillText(ys[0].toFixed(2), 2, c.height - pad);
  g.fillText(ys[1].toFixed(2), 2, 20);
}

function scaler(c, pad, xs, ys) {
  return ([x, y]) => [
    pad + ((x - xs[0]) / (xs[1] - xs[0] || 1)) * (c.width - pad - 10),
    c.height - pad - ((y - ys[0]) / (ys[1] - ys[0] || 1)) * (c.height - pad - 20),
  ];
}

function drawSearch(selected = []) {
  if (!lastRun) return;
  const c = $("o-scatter"), g = c.getContext("2d"), pad = 40;
  g.clearRect(0, 0, c.width, c.height);
  const all = lastRun.points.map((p) => p.objectives).concat(lastRun.true_front);
  const xs = [Math.min(...all.map((p) => p[0])), Math.max(...all.map((p) => p[0]))];
  const ys = [Math.min(...all.map((p) => p[1])), Math.max(...all.map((p) => p[1]))];
  axes(g, c, pad, xs, ys, "objective 1", "objective 2");
  const at = scaler(c, pad, xs, ys);

  g.strokeStyle = "#aaa";
  g.setLineDash([4, 3]);
  g.beginPath();
  lastRun.true_front.forEach((p, i) => (i ? g.lineTo(...at(p)) : g.moveTo(...at(p))));
  g.stroke();
  g.setLineDash([]);

  const front = new Set(lastRun.pareto_indices);
  const iters = Math.max(...lastRun.points.map((p) => p.iteration), 1);
  lastRun.points.forEach((p, i) => {
    const [x, y] = at(p.objectives);
    g.fillStyle = p.iteration === 0 ? "#bbb" : `hsl(${220 - 200 * (p.iteration / iters)}, 70%, 50%)`;
    g.beginPath();
    g.arc(x, y, front.has(i) ? 5 : 3, 0, 2 * Math.PI);
    g.fill();
    if (front.has(i)) {
      g.strokeStyle = "#000";
      g.stroke();
    }
  });
  selected.forEach((idx, n) => {
    const [x, y] = at(lastRun.points[idx].objectives);
    g.strokeStyle = "#d00";
    g.lineWidth = 2;
    g.strokeRect(x - 7, y - 7, 14, 14);
    g.lineWidth = 1;
    g.fillStyle = "#d00";
    g.fillText(String.fromCharCode(97 + n), x + 9, y - 6);
  });

  const t = $("o-trace"), h = t.getContext("2d");
  h.clearRect(0, 0, t.width, t.height);
  const hv = lastRun.hypervolume;
  const hs = [0, Math.max(...hv, 1e-12)];
  axes(h, t, pad, [0, hv.length - 1], hs, "iteration", "hypervolume");
  const ht = scaler(t, pad, [0, Math.max(hv.length - 1, 1)], hs);
  h.strokeStyle = "#4e79a7";
  h.beginPath();
  hv.forEach((v, i) => (i ? h.lineTo(...ht([i, v])) : h.moveTo(...ht([i, v]))));
  h.stroke();
}

function runSearch() {
  const dim = +$("o-dim").value, seed = +$("o-seed").value;
  const rng = mulberry32(seed + 1);
  const anchor = () => Array.from({ length: dim }, () => 0.1 + 0.8 * rng());
  const input = { a: anchor(), b: anchor(), n0: +$("o-n0").value, t: +$("o-t").value, q: +$("o-q").value, seed };
  $("o-status").textContent = "running…";
  // Let the status paint before the synchronous wasm call blocks the page.
  setTimeout(() => {
    const t0 = performance.now();
    const res = call(optimize, input);
    if (!res) return ($("o-status").textContent = "");
    lastRun = res;
    $("o-status").textContent = `${res.points.length} evaluations, ${res.pareto_indices.length} on the front, ${((performance.now() - t0) / 1000).toFixed(1)} s`;
    runSelect();
  }, 20);
}

// ---- preference selection

function runSelect() {
  $("s-h-val").textContent = $("s-h").value;
  $("s-k-val").textContent = $("s-k").value;
  if (!lastRun) return;
  const res = call(select, { points: lastRun.points.map((p) => p.objectives), divisions: +$("s-h").value, top_k: +$("s-k").value });
  if (!res) return;
  const picks = res.selection.by_preference;
  const rows = picks.map((c, n) => {
    const o = lastRun.points[c.index].objectives;
    return `<tr><td>${String.fromCharCode(97 + n)}</td><td>(${c.preference.map((v) => v.toFixed(2)).join(", ")})</td><td>${c.index}</td><td>${o[0].toFixed(4)}</td><td>${o[1].toFixed(4)}</td><td>${c.cosine.toFixed(3)}</td></tr>`;
  });
  $("s-table").innerHTML = "<tr><th></th><th>preference</th><th>point</th><th>objective 1</th><th>objective 2</th><th>cosine</th></tr>" + rows.join("");
  drawSearch(picks.map((c) => c.index));
}

await init();
profile = randomProfile(+$("p-layers").value, mulberry32(7));
$("p-layers").onchange = () => { profile = randomProfile(Math.max(2, +$("p-layers").value)); drawPartition(); };
$("p-random").onclick = () => { profile = randomProfile(profile.length); drawPartition(); };
for (const id of ["p-k", "p-lambda", "p-normalize"]) $(id).oninput = drawPartition;
$("p-canvas").onmousedown = editProfile;
$("p-canvas").onmousemove = editProfile;
$("o-run").onclick = runSearch;
$("s-h").oninput = runSelect;
$("s-k").oninput = runSelect;
drawPartition();
runSearch();
