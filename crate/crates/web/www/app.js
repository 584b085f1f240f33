import init, { generate, solve, sweep } from "./pkg/rackopt_web.js";

const COLORS = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"];
const CELL = 10;

const $ = (id) => document.getElementById(id);
let layout = null;
let bestOrder = null;

function status(text, error = false) {
  $("status").textContent = text;
  $("status").className = error ? "error" : "";
}

// Positions are drawn row by row, with a gap wherever the innermost scope changes.
function cells(leaf, width) {
  const out = [];
  let x = 0, y = 0;
  for (let p = 0; p < leaf.length; p++) {
    if (p > 0 && leaf[p] !== leaf[p - 1]) x += 4;
    if (x + CELL > width) { x = 0; y += CELL + 2; }
    out.push([x, y]);
    x += CELL;
  }
  return out;
}

function draw(canvas, occupants, changed) {
  const pos = cells(layout.leaf_scope, canvas.width);
  canvas.height = pos[pos.length - 1][1] + CELL + 2;
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  occupants.forEach((k, p) => {
    const [x, y] = pos[p];
    ctx.fillStyle = k === null ? "#f4f4f4" : COLORS[k % COLORS.length];
    ctx.fillRect(x, y, CELL - 1, CELL - 1);
    if (changed && changed[p]) {
      ctx.strokeStyle = "#000";
      ctx.strokeRect(x + 0.5, y + 0.5, CELL - 2, CELL - 2);
    }
  });
}

function legend() {
  $("legend").innerHTML = layout.demands
    .map((d, k) => `<span><i style="background:${COLORS[k % COLORS.length]}"></i>type ${k} (demand ${d})</span>`)
    .join("");
}

function showPlacement(result) {
  const changed = result.occupants.map((k, p) => k !== layout.prior[p]);
  draw($("after"), result.occupants, changed);
  const b = result.breakdown;
  const rows = [
    ["order", result.order.join(", ")],
    ["objective", b.augmented.toFixed(3)],
    ["movement", b.movement.toFixed(1)],
    ["spread", b.spread.toFixed(4)],
    ["limit penalty", b.limit_penalty.toFixed(3)],
    ["placement excess", result.placement_excess],
    ["positions changed", result.moved],
  ];
  $("breakdown").innerHTML = rows.map(([k, v]) => `<tr><td>${k}</td><td>${v}</td></tr>`).join("");
  $("order").value = result.order.join(",");
}

function run(fn) {
  try {
    fn();
  } catch (e) {
    status(String(e), true);
  }
}

function solveWith(order) {
  const t = performance.now();
  const result = JSON.parse(solve(layout.instance, JSON.stringify(order)));
  showPlacement(result);
  status(`solved in ${(performance.now() - t).toFixed(0)} ms`);
}

function onGenerate() {
  const params = {
    positions: Number($("positions").value),
    rack_types: Number($("types").value),
    seed: Number($("seed").value),
  };
  layout = JSON.parse(generate(JSON.stringify(params)));
  bestOrder = null;
  $("use-best").disabled = true;
  $("chart").getContext("2d").clearRect(0, 0, $("chart").width, $("chart").height);
  legend();
  draw($("prior"), layout.prior, null);
  solveWith(null);
}

function onSolve() {
  if (!layout) return status("generate a layout first", true);
  const text = $("order").value.trim();
  const order = text === "" ? null : text.split(",").map((s) => Number(s.trim()));
  solveWith(order);
}

function onSweep() {
  if (!layout) return status("generate a layout first", true);
  const t = performance.now();
  const s = JSON.parse(sweep(layout.instance, Number($("samples").value), Number($("seed").value)));
  const canvas = $("chart");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const span = s.max - s.min || 1;
  const w = canvas.width / s.objectives.length;
  s.objectives.forEach((v, i) => {
    const h = 20 + ((v - s.min) / span) * (canvas.height - 30);
    ctx.fillStyle = v === s.min ? "#59a14f" : "#9aa7b4";
    ctx.fillRect(i * w + 1, canvas.height - h, Math.max(w - 2, 1), h);
  });
  bestOrder = s.best_order;
  $("use-best").disabled = false;
  const spread = (100 * (s.max - s.min) / Math.abs(s.mean)).toFixed(2);
  status(`${s.objectives.length} orders in ${(performance.now() - t).toFixed(0)} ms: ` +
         `min ${s.min.toFixed(2)}, mean ${s.mean.toFixed(2)}, max ${s.max.toFixed(2)} (range ${spread}% of mean)`);
}

await init();
$("generate").onclick = () => run(onGenerate);
$("solve").onclick = () => run(onSolve);
$("sweep").onclick = () => run(onSweep);
$("use-best").onclick = () => run(() => solveWith(bestOrder));
run(onGenerate);
