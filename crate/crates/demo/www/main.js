import init, { exploreBsgc, theoryTable, TrainingSession } from "./pkg/clusterlab_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function showError(target, e) {
  target.textContent = String(e && e.message ? e.message : e);
  target.classList.add("error");
}

function clearError(target) {
  target.classList.remove("error");
}

// Diverging colors for signed weights, sequential for non-negative ones.
function color(v, scale, signed) {
  const t = Math.min(1, Math.abs(v) / scale);
  if (!signed) {
    const c = Math.round(255 * (1 - t));
    return `rgb(${c},${c},255)`;
  }
  const c = Math.round(255 * (1 - t));
  return v >= 0 ? `rgb(255,${c},${c})` : `rgb(${c},${c},255)`;
}

function drawHeatmap(canvas, map) {
  const ctx = canvas.getContext("2d");
  const cw = canvas.width / map.cols;
  const ch = canvas.height / map.rows;
  const scale = Math.max(1e-12, ...map.values.map(Math.abs));
  const signed = map.values.some((v) => v < 0);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let i = 0; i < map.rows; i++) {
    for (let j = 0; j < map.cols; j++) {
      ctx.fillStyle = color(map.values[i * map.cols + j], scale, signed);
      ctx.fillRect(j * cw, i * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
  ctx.strokeStyle = "#000";
  ctx.lineWidth = 1;
  for (let i = 1; i < map.rows; i++) {
    if (map.row_cluster[i] !== map.row_cluster[i - 1]) {
      ctx.beginPath(); ctx.moveTo(0, i * ch); ctx.lineTo(canvas.width, i * ch); ctx.stroke();
    }
  }
  for (let j = 1; j < map.cols; j++) {
    if (map.col_cluster[j] !== map.col_cluster[j - 1]) {
      ctx.beginPath(); ctx.moveTo(j * cw, 0); ctx.lineTo(j * cw, canvas.height); ctx.stroke();
    }
  }
}

function runBsgc() {
  const stats = $("b-stats");
  clearError(stats);
  try {
    const r = JSON.parse(exploreBsgc(num("b-rows"), num("b-cols"), num("b-k"), num("b-noise"), num("b-seed")));
    drawHeatmap($("b-shuffled"), r.shuffled);
    drawHeatmap($("b-recovered"), r.recovered);
    stats.textContent =
      `clusterability ${r.clusterability.toFixed(4)} (planted ${r.planted_clusterability.toFixed(4)}, random ${r.baseline.toFixed(4)})\n` +
      `pairwise agreement with planted blocks: rows ${r.row_agreement.toFixed(3)}, cols ${r.col_agreement.toFixed(3)}`;
  } catch (e) {
    showError(stats, e);
  }
}

let session = null;
let history = [];
let timer = null;

function drawCurves() {
  const canvas = $("t-curves");
  const ctx = canvas.getContext("2d");
  const pad = 24;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#555";
  ctx.fillText("1", 4, pad + 4);
  ctx.fillText("0", 4, pad + h);
  if (history.length < 2) return;
  const maxStep = history[history.length - 1].step || 1;
  const series = [
    ["test accuracy", "#2a7", (s) => s.test_acc],
    ["C layer 0", "#c33", (s) => s.clusterability[0]],
    ["C layer 1", "#36c", (s) => s.clusterability[1]],
  ];
  series.forEach(([name, stroke, get], n) => {
    ctx.strokeStyle = stroke;
    ctx.beginPath();
    let started = false;
    for (const s of history) {
      const v = get(s);
      if (v === null || v === undefined) { started = false; continue; }
      const x = pad + (w * s.step) / maxStep;
      const y = pad + h * (1 - v);
      if (started) ctx.lineTo(x, y); else ctx.moveTo(x, y);
      started = true;
    }
    ctx.stroke();
    ctx.fillStyle = stroke;
    ctx.fillText(name, pad + 6 + 110 * n, canvas.height - 6);
  });
}

function newSession() {
  stopTraining();
  const stats = $("t-stats");
  clearError(stats);
  try {
    session = new TrainingSession(num("t-lambda"), num("t-k"), num("t-seed"));
    history = [JSON.parse(session.advance(0))];
    showSnapshot(history[0]);
  } catch (e) {
    session = null;
    showError(stats, e);
  }
}

function showSnapshot(s) {
  drawCurves();
  drawHeatmap($("t-heatmap"), s.heatmap);
  const cs = s.clusterability.map((c) => (c === null ? "-" : c.toFixed(4))).join(", ");
  $("t-stats").textContent =
    `step ${s.step}  train acc ${s.train_acc.toFixed(3)}  test acc ${s.test_acc.toFixed(3)}  clusterability [${cs}]`;
}

function tick() {
  try {
    const s = JSON.parse(session.advance(10));
    history.push(s);
    showSnapshot(s);
    if (s.step >= 600) stopTraining();
  } catch (e) {
    stopTraining();
    showError($("t-stats"), e);
  }
}

function stopTraining() {
  if (timer !== null) clearInterval(timer);
  timer = null;
  $("t-run").textContent = "Start";
}

function toggleTraining() {
  if (timer !== null) {
    stopTraining();
    return;
  }
  if (session === null) newSession();
  if (session === null) return;
  timer = setInterval(tick, 30);
  $("t-run").textContent = "Pause";
}

function runTheory() {
  const body = $("c-table").querySelector("tbody");
  body.replaceChildren();
  try {
    const rows = JSON.parse(theoryTable($("c-widths").value, num("c-nprev"), $("c-parts").value, num("c-jln"), num("c-jleps")));
    for (const r of rows) {
      const tr = document.createElement("tr");
      for (const [text, cls] of [[r.calculator], [r.inputs], [r.log2.toFixed(3)], [r.exact ?? "", "exact"]]) {
        const td = document.createElement("td");
        td.textContent = text;
        if (cls) td.className = cls;
        tr.append(td);
      }
      body.append(tr);
    }
  } catch (e) {
    const tr = document.createElement("tr");
    const td = document.createElement("td");
    td.colSpan = 4;
    showError(td, e);
    tr.append(td);
    body.append(tr);
  }
}

await init();
$("status").textContent = "";

$("b-noise").addEventListener("input", () => { $("b-noise-v").textContent = num("b-noise").toFixed(2); });
$("b-run").addEventListener("click", runBsgc);
for (const id of ["b-rows", "b-cols", "b-k", "b-noise", "b-seed"]) $(id).addEventListener("change", runBsgc);

$("t-lambda").addEventListener("input", () => { $("t-lambda-v").textContent = $("t-lambda").value; });
for (const id of ["t-lambda", "t-k", "t-seed"]) $(id).addEventListener("change", newSession);
$("t-run").addEventListener("click", toggleTraining);
$("t-reset").addEventListener("click", newSession);

$("c-run").addEventListener("click", runTheory);

runBsgc();
newSession();
runTheory();
