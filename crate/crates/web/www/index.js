import init, { curve_samples, enhance_uniform, DemoSession } from "./pkg/lucent_web.js";

const $ = (id) => document.getElementById(id);
const MAX_SIDE = 256;

let source = null; // { rgba, width, height }
let session = null;

function syntheticDark(width, height) {
  const rgba = new Uint8ClampedArray(width * height * 4);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 4;
      const sky = 10 + 25 * (1 - y / height);
      const inBox = x > width * 0.55 && x < width * 0.8 && y > height * 0.45;
      const disc = Math.hypot(x - width * 0.25, y - height * 0.35) < height * 0.12;
      rgba[i] = inBox ? 45 : disc ? 60 : sky * 0.7;
      rgba[i + 1] = inBox ? 25 : disc ? 55 : sky * 0.8;
      rgba[i + 2] = inBox ? 15 : disc ? 30 : sky;
      rgba[i + 3] = 255;
    }
  }
  return { rgba, width, height };
}

function fitted(width, height) {
  const scale = Math.min(1, MAX_SIDE / Math.max(width, height));
  return [Math.max(1, Math.round(width * scale)), Math.max(1, Math.round(height * scale))];
}

function paint(canvas, rgba, width, height) {
  canvas.width = width;
  canvas.height = height;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), width, height), 0, 0);
}

function drawCurve() {
  const a = parseFloat($("alpha").value);
  const n = parseInt($("iters").value, 10);
  $("alpha-out").textContent = a.toFixed(2);
  $("iters-out").textContent = n;
  const canvas = $("curve");
  const ctx = canvas.getContext("2d");
  const s = canvas.width;
  ctx.clearRect(0, 0, s, s);
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.moveTo(0, s);
  ctx.lineTo(s, 0);
  ctx.stroke();
  const ys = curve_samples(a, n, 101);
  ctx.strokeStyle = "#c60";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ys.forEach((v, i) => {
    const px = (i / 100) * s;
    const py = s - v * s;
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
  ctx.lineWidth = 1;
}

function drawUniform() {
  if (!source) return;
  const a = parseFloat($("alpha").value);
  const n = parseInt($("iters").value, 10);
  const out = enhance_uniform(source.rgba, source.width, source.height, a, n);
  paint($("uniform"), out, source.width, source.height);
}

function newSession() {
  if (!source) return;
  session?.free();
  session = new DemoSession(source.rgba, source.width, source.height, parseInt($("width").value, 10), 0n);
  $("loss").textContent = "n/a";
  showSession();
}

function showSession() {
  $("step").textContent = session.step;
  paint($("learned"), session.enhanced(), session.width, session.height);
  paint($("map"), session.curve_map(), session.width, session.height);
}

function trainChunk(steps) {
  const loss = session.train_steps(steps);
  $("loss").textContent = loss.toFixed(4);
  showSession();
}

async function trainMany(total) {
  const buttons = ["train", "auto", "reset"].map($);
  buttons.forEach((b) => (b.disabled = true));
  try {
    for (let done = 0; done < total; done += 25) {
      trainChunk(25);
      await new Promise((r) => requestAnimationFrame(r));
    }
  } finally {
    buttons.forEach((b) => (b.disabled = false));
  }
}

function setSource(img) {
  source = img;
  paint($("original"), img.rgba, img.width, img.height);
  drawUniform();
  newSession();
}

function loadFile(file) {
  const url = URL.createObjectURL(file);
  const img = new Image();
  img.onload = () => {
    const [w, h] = fitted(img.naturalWidth, img.naturalHeight);
    const canvas = document.createElement("canvas");
    canvas.width = w;
    canvas.height = h;
    const ctx = canvas.getContext("2d");
    ctx.drawImage(img, 0, 0, w, h);
    setSource({ rgba: ctx.getImageData(0, 0, w, h).data, width: w, height: h });
    URL.revokeObjectURL(url);
  };
  img.onerror = () => ($("status").textContent = "could not decode that file");
  img.src = url;
}

function guard(fn) {
  return (...args) => {
    try {
      $("status").textContent = "";
      return fn(...args);
    } catch (e) {
      $("status").textContent = String(e.message ?? e);
    }
  };
}

await init();
$("alpha").addEventListener("input", guard(() => { drawCurve(); drawUniform(); }));
$("iters").addEventListener("input", guard(() => { drawCurve(); drawUniform(); }));
$("file").addEventListener("change", guard((e) => e.target.files[0] && loadFile(e.target.files[0])));
$("reset").addEventListener("click", guard(newSession));
$("width").addEventListener("change", guard(newSession));
$("train").addEventListener("click", guard(() => trainChunk(25)));
$("auto").addEventListener("click", guard(() => trainMany(500)));
drawCurve();
guard(setSource)(syntheticDark(160, 120));
