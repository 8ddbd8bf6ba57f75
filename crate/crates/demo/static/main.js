import init, {
  coincidence_histogram,
  visibility_scan,
  method_comparison,
} from "./pkg/twincal_demo.js";

const $ = (id) => document.getElementById(id);

function plotFrame(canvas) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#8888";
  ctx.strokeRect(40.5, 10.5, w - 55, h - 40);
  return { ctx, x0: 41, y0: 11, pw: w - 56, ph: h - 42 };
}

function axisLabel(ctx, text, x, y) {
  ctx.fillStyle = "#888";
  ctx.font = "11px system-ui";
  ctx.fillText(text, x, y);
}

// Bars on a log-ish scale so the flat accidental grass stays visible under
// the coincidence peak.
function drawHistogram(canvas, bins, counts, windowNs) {
  const { ctx, x0, y0, pw, ph } = plotFrame(canvas);
  const maxC = Math.max(1, ...counts);
  const xmin = bins[0], xmax = bins[bins.length - 1];
  const sx = (ns) => x0 + ((ns - xmin) / (xmax - xmin)) * pw;
  const sy = (c) => y0 + ph - (Math.log10(1 + c) / Math.log10(1 + maxC)) * ph;
  ctx.fillStyle = "#4a90d9";
  const bw = Math.max(1, pw / counts.length);
  for (let i = 0; i < counts.length; i++) {
    if (counts[i] === 0) continue;
    ctx.fillRect(sx(bins[i]), sy(counts[i]), bw, y0 + ph - sy(counts[i]));
  }
  ctx.strokeStyle = "#d95f4a";
  ctx.setLineDash([4, 3]);
  for (const edge of windowNs) {
    ctx.beginPath();
    ctx.moveTo(sx(edge), y0);
    ctx.lineTo(sx(edge), y0 + ph);
    ctx.stroke();
  }
  ctx.setLineDash([]);
  axisLabel(ctx, "start–stop delay (ns)", x0 + pw / 2 - 50, y0 + ph + 24);
  axisLabel(ctx, "counts (log)", 2, y0 + 10);
}

function drawScan(canvas, angles, series) {
  const { ctx, x0, y0, pw, ph } = plotFrame(canvas);
  let maxY = 1;
  for (const s of series) maxY = Math.max(maxY, ...s.values);
  const sx = (a) => x0 + (a / 180) * pw;
  const sy = (v) => y0 + ph - (v / (1.12 * maxY)) * ph;
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.fillStyle = s.color;
    if (s.line) {
      ctx.beginPath();
      s.values.forEach((v, i) => {
        const x = sx(angles[i]), y = sy(v);
        i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
      });
      ctx.stroke();
    } else {
      s.values.forEach((v, i) => {
        ctx.beginPath();
        ctx.arc(sx(angles[i]), sy(v), 3, 0, 2 * Math.PI);
        ctx.fill();
      });
    }
  }
  axisLabel(ctx, "polarizer angle (deg)", x0 + pw / 2 - 55, y0 + ph + 24);
  let lx = x0 + 8;
  for (const s of series) {
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, lx, y0 + 14);
    lx += ctx.measureText(s.label).width + 16;
  }
}

function fmt(x, digits = 3) {
  return Number(x).toFixed(digits);
}

function bindSlider(id, digits = 2) {
  const el = $(id);
  const show = () => ($(id + "_v").textContent = fmt(el.value, digits));
  el.addEventListener("input", show);
  show();
  return el;
}

function setupHistogram() {
  const eta = bindSlider("h_eta"), rate = bindSlider("h_rate", 0);
  const dark = bindSlider("h_dark", 0), gate = bindSlider("h_gate", 1);
  const rerun = () => {
    const doc = JSON.parse(
      coincidence_histogram(+rate.value, +eta.value, 0.45, +dark.value, +gate.value, 3519n)
    );
    drawHistogram($("h_canvas"), doc.bin_start_ns, doc.counts, doc.window_ns);
    $("h_result").textContent =
      `corrected η = ${fmt(doc.eta_corrected)} ± ${fmt(doc.sigma)}   ` +
      `raw ratio = ${fmt(doc.eta_raw)}   truth = ${fmt(doc.truth)}   ` +
      `(${doc.n_coincidence} coincidences / ${doc.n_trigger} triggers)`;
  };
  for (const el of [eta, rate, dark, gate]) el.addEventListener("change", rerun);
  rerun();
}

function setupScan() {
  const eta = bindSlider("s_eta"), flip = bindSlider("s_flip");
  const rate = bindSlider("s_rate", 0), integ = bindSlider("s_int", 1);
  const rerun = () => {
    const doc = JSON.parse(
      visibility_scan(+eta.value, +flip.value, +rate.value, +integ.value, 4860n)
    );
    drawScan($("s_canvas"), doc.angles_deg, [
      { values: doc.counts, color: "#4a90d9", label: "triggered scan" },
      { values: doc.background, color: "#999", label: "background (pump off)" },
      { values: doc.fit_curve, color: "#d95f4a", label: "LSA fit", line: true },
    ]);
    $("s_result").textContent =
      `V = ${fmt(doc.visibility)} ± ${fmt(doc.sigma_visibility)}   ` +
      `corrected η₁ = ${fmt(doc.eta_estimate)} ± ${fmt(doc.sigma_eta)}   ` +
      `truth = ${fmt(doc.truth)}   live fraction = ${fmt(doc.live_fraction)}`;
  };
  for (const el of [eta, flip, rate, integ]) el.addEventListener("change", rerun);
  rerun();
}

function setupCompare() {
  const eta = bindSlider("c_eta"), rate = bindSlider("c_rate", 0);
  const integ = bindSlider("c_int", 1);
  const rerun = () => {
    $("c_result").textContent = "running…";
    setTimeout(() => {
      const doc = JSON.parse(
        method_comparison(+eta.value, +rate.value, +integ.value, 4860n)
      );
      drawScan($("c_canvas"), doc.angles_deg, [
        { values: doc.with_rotation, color: "#d95f4a", label: "coincidences, rotation on" },
        { values: doc.without_rotation, color: "#4a90d9", label: "rotation off" },
      ]);
      $("c_result").textContent =
        `coincidence η₁ = ${fmt(doc.coincidence)} ± ${fmt(doc.coincidence_sigma)}   ` +
        `conditional η₁ = ${fmt(doc.conditional)} ± ${fmt(doc.conditional_sigma)}   ` +
        `Δ = ${fmt(doc.difference)} (σ = ${fmt(doc.combined_sigma)})   ` +
        `curve phases ${fmt(doc.phase_with_deg, 1)}° / ${fmt(doc.phase_without_deg, 1)}°`;
    }, 20);
  };
  $("c_run").addEventListener("click", rerun);
  rerun();
}

init().then(() => {
  setupHistogram();
  setupScan();
  setupCompare();
});
