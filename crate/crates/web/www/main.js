import init, { mixture, graph_query, covariance_curve } from "./pkg/effcov_web.js";

const $ = (id) => document.getElementById(id);

function show(id, f) {
  const el = $(id);
  try {
    el.className = "";
    el.textContent = f();
  } catch (e) {
    el.className = "err";
    el.textContent = String(e);
  }
}

const fmt = (v) => v.toFixed(4);

function table(t) {
  return `      Y=0     Y=1\nX=0 ${fmt(t[0][0])}  ${fmt(t[0][1])}\nX=1 ${fmt(t[1][0])}  ${fmt(t[1][1])}`;
}

function runMixture() {
  show("mixture-out", () => {
    const r = JSON.parse(mixture($("alphas").value, +$("bx").value, +$("by").value, +$("pz").value, $("rounded").checked));
    return [
      "P(X,Y | Z=0)\n" + table(r.tables[0]),
      "P(X,Y | Z=1)\n" + table(r.tables[1]),
      `odds ratio Z=0 ${fmt(r.stratum_or[0])}, Z=1 ${fmt(r.stratum_or[1])}`,
      `average ${fmt(r.average_or)}, marginal ${fmt(r.marginal_or)}, causal ${fmt(r.causal_or)}`,
    ].join("\n\n");
  });
}

function runGraph() {
  show("graph-out", () => {
    const r = JSON.parse(graph_query($("graph").value, $("gx").value, $("gy").value, $("given").value));
    const lines = r.paths.map((p) => `${p.blocked ? "blocked" : "open   "} ${p.backdoor ? "backdoor" : "        "} ${p.text}`);
    lines.push("", `backdoor paths blocked: ${r.backdoor_blocked}`, `d-separated: ${r.d_separated}`);
    return lines.join("\n");
  });
}

function draw(points) {
  const c = $("curve");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const ys = points.flatMap((p) => [p.lower, p.upper, p.model_cov, p.reduced_cov]);
  const [lo, hi] = [Math.min(...ys), Math.max(...ys)];
  const [z0, z1] = [points[0].z, points[points.length - 1].z];
  const px = (z) => 40 + ((z - z0) / (z1 - z0)) * (c.width - 60);
  const py = (v) => c.height - 20 - ((v - lo) / (hi - lo || 1)) * (c.height - 40);
  g.strokeStyle = "#999";
  for (const p of points) {
    g.beginPath();
    g.moveTo(px(p.z), py(p.lower));
    g.lineTo(px(p.z), py(p.upper));
    g.stroke();
    g.fillRect(px(p.z) - 2, py(p.observed_cov) - 2, 4, 4);
  }
  const line = (key, color, dash) => {
    g.strokeStyle = color;
    g.setLineDash(dash);
    g.beginPath();
    points.forEach((p, i) => (i ? g.lineTo : g.moveTo).call(g, px(p.z), py(p[key])));
    g.stroke();
    g.setLineDash([]);
  };
  line("model_cov", "#c33", [6, 4]);
  line("reduced_cov", "#36c", [2, 3]);
}

function runCurve() {
  show("curve-out", () => {
    const pts = JSON.parse(covariance_curve(+$("cbb").value, +$("per").value, +$("seed").value));
    draw(pts);
    return "red dashed: full model; blue dotted: slope covariance set to 0; bars: 95% bootstrap band\n" +
      pts.map((p) => `z=${p.z} observed ${p.observed_cov.toFixed(1)} model ${p.model_cov.toFixed(1)}`).join("\n");
  });
}

await init();
for (const id of ["alphas", "bx", "by", "pz", "rounded"]) $(id).addEventListener("input", runMixture);
for (const id of ["graph", "gx", "gy", "given"]) $(id).addEventListener("input", runGraph);
$("run-curve").addEventListener("click", runCurve);
runMixture();
runGraph();
runCurve();
