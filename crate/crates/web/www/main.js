import init, { quantize_json, policy_json, paging_json } from "./pkg/kvmix_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(fn, ...args) {
  const out = JSON.parse(fn(...args));
  if (out && out.error) throw new Error(out.error);
  return out;
}

function fail(target, err) {
  target.innerHTML = `<p class="error">${err.message}</p>`;
}

function runQuant() {
  const out = $("q-out");
  try {
    const v = call(quantize_json, $("q-values").value, num("q-bits"));
    const rows = v.input.map((x, i) =>
      `<tr><td>${x}</td><td>${v.codes[i]}</td><td>${v.dequantized[i].toFixed(5)}</td><td>${Math.abs(x - v.dequantized[i]).toExponential(2)}</td></tr>`);
    out.innerHTML =
      `<p>scale ${v.scale.toPrecision(6)}, zero ${v.zero.toPrecision(6)}, ${v.packed_bytes} packed bytes,
       max error ${v.max_error.toExponential(3)} (half step ${v.bound.toExponential(3)})</p>
       <table><tr><th>input</th><th>code</th><th>restored</th><th>error</th></tr>${rows.join("")}</table>`;
  } catch (e) {
    fail(out, e);
  }
}

function runPolicy() {
  const out = $("p-out");
  const strip = $("p-strip");
  try {
    const v = call(policy_json, JSON.stringify({
      alpha_high: num("p-ah"), alpha_low: num("p-al"), window: num("p-w"), exponent: num("p-s"),
      prompt_len: num("p-n"), gen_len: num("p-g"), seed: num("p-seed"),
    }));
    strip.innerHTML = v.classes.map((c, i) => `<div class="cell ${c}" title="position ${i}: ${c}"></div>`).join("");
    out.innerHTML =
      `<p class="legend"><span class="high">high ${v.high}</span><span class="low">low ${v.low}</span>
       <span class="pruned">pruned ${v.pruned}</span><span class="window">window ${v.window}</span></p>
       <p>payload memory ${(100 * v.payload_fraction).toFixed(2)}% of FP16,
       pages held ${(100 * v.full_fraction).toFixed(2)}% (${v.pages} pages)</p>`;
  } catch (e) {
    strip.innerHTML = "";
    fail(out, e);
  }
}

let frames = [];

function showFrame(i) {
  const f = frames[i];
  if (!f) return;
  $("g-label").textContent = `${i + 1}/${frames.length}: ${f.label} (free ${f.free_count}, start ${f.start}, end ${f.end})`;
  const n = f.slots.length;
  const isFree = (k) => (k - f.start + n) % n < f.free_count;
  $("g-ring").innerHTML = f.slots.map((p, k) => {
    const cls = ["slot", isFree(k) ? "free" : "", k === f.start ? "start" : "", k === f.end ? "end" : ""].join(" ");
    return `<div class="${cls}" title="slot ${k}">${isFree(k) ? p : ""}</div>`;
  }).join("");
  $("g-pages-view").innerHTML = f.pages.map((p) => {
    const owner = p.request === null ? "" : `r${p.request}h${p.head}`;
    return `<div class="page ${p.class}" title="page ${p.id}: ${p.class} ${p.occupancy}/${p.capacity}">
      <b>${p.id}</b><span>${owner}</span></div>`;
  }).join("");
}

function runPaging() {
  try {
    frames = call(paging_json, JSON.stringify({
      total_pages: num("g-pages"), requests: num("g-req"), prompt_len: num("g-n"), gen_steps: num("g-steps"),
    }));
    $("g-frame").max = frames.length - 1;
    $("g-frame").value = 0;
    showFrame(0);
  } catch (e) {
    fail($("g-pages-view"), e);
  }
}

await init();
$("q-run").onclick = runQuant;
$("p-run").onclick = runPolicy;
$("g-run").onclick = runPaging;
$("g-frame").oninput = (e) => showFrame(Number(e.target.value));
runQuant();
runPolicy();
runPaging();
