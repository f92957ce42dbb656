import init, { sceneView, scorePlan, correctVelocity, epsilon, horizon } from "./pkg/cfmplan_demo.js";

await init();

const $ = (id) => document.getElementById(id);
const H = horizon();

// scene canvas: x forward (right), y left (up), 8 px per meter
const sc = $("scene").getContext("2d");
const PX = 8;
const toPx = (p) => [40 + p.x * PX, 180 - p.y * PX];
const toM = (u, v) => [(u - 40) / PX, (180 - v) / PX];
let plan = [];
let view = null;

function polyline(ctx, pts, color, width) {
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.beginPath();
  pts.forEach((p, i) => {
    const [u, v] = toPx(p);
    i ? ctx.lineTo(u, v) : ctx.moveTo(u, v);
  });
  ctx.stroke();
}

function drawScene() {
  const c = $("scene");
  sc.clearRect(0, 0, c.width, c.height);
  sc.lineCap = sc.lineJoin = "round";
  for (const lane of view.scene.lanes) polyline(sc, lane.centerline, "#d8d8d8", 2 * lane.half_width * PX);
  for (const lane of view.scene.lanes) polyline(sc, lane.centerline, "#fff", 1);
  for (const o of view.scene.obstacles) {
    const [u, v] = toPx(o.position);
    sc.fillStyle = "#c44";
    sc.beginPath();
    sc.arc(u, v, o.radius * PX, 0, 2 * Math.PI);
    sc.fill();
  }
  const origin = { x: 0, y: 0 };
  for (const e of view.experts) {
    polyline(sc, [origin, ...e.waypoints.map(([x, y]) => ({ x, y }))], "#2a8", 2);
  }
  if (plan.length) polyline(sc, [origin, ...plan.map(([x, y]) => ({ x, y }))], "#25c", 2);
  sc.fillStyle = "#25c";
  for (const [x, y] of plan) {
    const [u, v] = toPx({ x, y });
    sc.fillRect(u - 2, v - 2, 4, 4);
  }
  const [u, v] = toPx(origin);
  sc.fillStyle = "#222";
  sc.fillRect(u - 8, v - 4, 16, 8);
}

function refreshScene() {
  try {
    view = JSON.parse(sceneView($("kind").value, Number($("seed").value) >>> 0));
    $("score").textContent = `ego speed ${view.scene.ego.speed.toFixed(2)} m/s\n${view.experts.length} expert mode(s)`;
  } catch (err) {
    $("score").textContent = String(err);
    return;
  }
  plan = [];
  drawScene();
}

$("scene").addEventListener("click", (ev) => {
  if (plan.length >= H) plan = [];
  const r = ev.target.getBoundingClientRect();
  plan.push(toM(ev.clientX - r.left, ev.clientY - r.top));
  drawScene();
  if (plan.length === H) {
    const s = JSON.parse(scorePlan($("kind").value, Number($("seed").value) >>> 0, new Float64Array(plan.flat())));
    $("score").textContent =
      `collision        ${s.collision}\non road          ${s.on_road}\nprogress         ${s.progress.toFixed(3)}\n` +
      `penalties\n  collision      ${s.constraints.collision.toFixed(4)}\n` +
      `  road departure ${s.constraints.road_departure.toFixed(4)}\n  kinematic      ${s.constraints.kinematic.toFixed(4)}`;
  }
});
$("scene").addEventListener("contextmenu", (ev) => {
  ev.preventDefault();
  plan = [];
  drawScene();
});
$("kind").addEventListener("change", refreshScene);
$("seed").addEventListener("input", refreshScene);

// velocity correction
const cv = $("cvf").getContext("2d");
function arrow(x, y, color) {
  const s = 100;
  cv.strokeStyle = color;
  cv.lineWidth = 3;
  cv.beginPath();
  cv.moveTo(160, 160);
  cv.lineTo(160 + s * x, 160 - s * y);
  cv.stroke();
}
function refreshCvf() {
  const rad = (d) => (d * Math.PI) / 180;
  const va = rad(Number($("va").value));
  const ca = rad(Number($("ca").value));
  const lam = Number($("lam").value);
  $("lamv").textContent = lam.toFixed(2);
  const [vx, vy, cx, cy] = [Math.cos(va), Math.sin(va), Math.cos(ca), Math.sin(ca)];
  const out = correctVelocity(vx, vy, cx, cy, lam);
  cv.clearRect(0, 0, 320, 320);
  arrow(cx, cy, "#999");
  arrow(vx, vy, "#25c");
  if (out.length) {
    arrow(out[0], out[1], "#c33");
    $("cvfout").textContent = `|v|   ${Math.hypot(vx, vy).toFixed(4)}\n|v*|  ${Math.hypot(out[0], out[1]).toFixed(4)}`;
  }
}
for (const id of ["va", "ca", "lam"]) $(id).addEventListener("input", refreshCvf);

// energy weight schedule over t in [0, 1.2]
const ep = $("eps").getContext("2d");
function refreshEps() {
  const tau = Number($("tau").value);
  const emax = Number($("emax").value);
  ep.clearRect(0, 0, 480, 200);
  ep.strokeStyle = "#ccc";
  ep.beginPath();
  ep.moveTo(400, 0);
  ep.lineTo(400, 200);
  ep.stroke();
  ep.strokeStyle = "#25c";
  ep.lineWidth = 2;
  ep.beginPath();
  for (let i = 0; i <= 480; i++) {
    const t = (i / 480) * 1.2;
    const y = 190 - (epsilon(t, tau, emax) / 2) * 180;
    i ? ep.lineTo(i, y) : ep.moveTo(i, y);
  }
  ep.stroke();
}
for (const id of ["tau", "emax"]) $(id).addEventListener("input", refreshEps);

refreshScene();
refreshCvf();
refreshEps();
