//! WebAssembly bindings for the browser demo.
//!
//! The exported functions are thin wrappers over plain Rust functions so the
//! logic can be tested natively.

use lucent_core::checkpoint::Checkpoint;
use lucent_core::enhance::{curve, enhance, EnhanceSpec};
use lucent_core::imaging::{curve_map_image, from_unit, resize, to_unit, ImageBuffer};
use lucent_core::losses::LossPlugins;
use lucent_core::network::{CurveNet, CurveNetConfig};
use lucent_core::train::{train_step, TrainConfig};
use lucent_core::{Error, Result, Scalar, Tensor};
use wasm_bindgen::prelude::*;

/// Longest side the demo works at; larger uploads are downscaled.
pub const MAX_SIDE: usize = 256;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Drops alpha and converts to a `3×H×W` unit tensor.
pub fn rgba_to_unit(rgba: &[u8], width: usize, height: usize) -> Result<Tensor> {
    if rgba.len() != width * height * 4 {
        return Err(Error::InvalidArgument(format!(
            "expected {} RGBA bytes for {width}×{height}, got {}",
            width * height * 4,
            rgba.len()
        )));
    }
    let rgb = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    Ok(to_unit(&ImageBuffer::new(width, height, rgb)?))
}

fn buffer_to_rgba(img: &ImageBuffer) -> Vec<u8> {
    img.data().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Opaque RGBA bytes from a unit tensor, clamping out-of-range values.
pub fn unit_to_rgba(t: &Tensor) -> Result<Vec<u8>> {
    Ok(buffer_to_rgba(&from_unit(t, true)?))
}

/// Size after fitting `(width, height)` inside `MAX_SIDE` with the aspect kept.
pub fn working_size(width: usize, height: usize) -> (usize, usize) {
    let side = width.max(height);
    if side <= MAX_SIDE {
        return (width, height);
    }
    let scale = MAX_SIDE as Scalar / side as Scalar;
    let fit = |v: usize| ((v as Scalar * scale).round() as usize).max(1);
    (fit(width), fit(height))
}

/// `samples` evenly spaced points of the `n`-step curve with factor `a` on `[0, 1]`.
#[wasm_bindgen]
pub fn curve_samples(a: f64, n: usize, samples: usize) -> Vec<f64> {
    let last = samples.saturating_sub(1).max(1) as Scalar;
    (0..samples).map(|i| curve(i as Scalar / last, a, n)).collect()
}

pub fn enhance_uniform_rgba(rgba: &[u8], width: usize, height: usize, a: f64, n: usize) -> Result<Vec<u8>> {
    let image = rgba_to_unit(rgba, width, height)?;
    let map = Tensor::full(image.shape(), a);
    let spec = EnhanceSpec {
        iterations: n,
        clamp_output: true,
    };
    unit_to_rgba(&enhance(&image, &map, &spec)?)
}

/// Applies one curve factor to every pixel and channel.
#[wasm_bindgen]
pub fn enhance_uniform(rgba: &[u8], width: usize, height: usize, a: f64, n: usize) -> std::result::Result<Vec<u8>, JsError> {
    enhance_uniform_rgba(rgba, width, height, a, n).map_err(js)
}

/// Trains a small network on a single image, entirely in the page.
#[wasm_bindgen]
pub struct DemoSession {
    state: Checkpoint,
    image: Tensor,
    train_image: Tensor,
    config: TrainConfig,
    last_loss: f64,
}

impl DemoSession {
    pub fn create(rgba: &[u8], width: usize, height: usize, net_width: usize, seed: u64) -> Result<Self> {
        let full = rgba_to_unit(rgba, width, height)?;
        let (w, h) = working_size(width, height);
        let image = resize(&full, h, w)?;
        let mut config = TrainConfig {
            image_size: 64,
            seed,
            ..TrainConfig::default()
        };
        config.adam.learning_rate = 1e-3;
        config.validate()?;
        let train_image = resize(&full, config.image_size, config.image_size)?;
        let net = CurveNet::build(CurveNetConfig {
            seed,
            ..CurveNetConfig::with_width(net_width)
        })?;
        Ok(Self {
            state: Checkpoint::fresh(net, seed),
            image,
            train_image,
            config,
            last_loss: f64::NAN,
        })
    }

    /// Runs `steps` optimisation steps and returns the final total loss.
    pub fn run(&mut self, steps: usize) -> Result<f64> {
        for _ in 0..steps {
            let record = train_step(&mut self.state, &[&self.train_image], &self.config, LossPlugins::default())?;
            self.last_loss = record.loss.total;
        }
        Ok(self.last_loss)
    }

    pub fn enhanced_rgba(&self) -> Result<Vec<u8>> {
        let map = self.state.net.infer(&self.image)?;
        let spec = EnhanceSpec {
            iterations: self.state.net.config().iterations,
            clamp_output: true,
        };
        unit_to_rgba(&enhance(&self.image, map.values(), &spec)?)
    }

    pub fn curve_map_rgba(&self) -> Result<Vec<u8>> {
        let map = self.state.net.infer(&self.image)?;
        Ok(buffer_to_rgba(&curve_map_image(map.values())?))
    }
}

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(rgba: &[u8], width: usize, height: usize, net_width: usize, seed: u64) -> std::result::Result<DemoSession, JsError> {
        Self::create(rgba, width, height, net_width, seed).map_err(js)
    }

    /// Width of the images returned by `enhanced` and `curve_map`.
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    #[wasm_bindgen(getter)]
    pub fn step(&self) -> u64 {
        self.state.optimizer.step
    }

    pub fn train_steps(&mut self, steps: usize) -> std::result::Result<f64, JsError> {
        self.run(steps).map_err(js)
    }

    pub fn enhanced(&self) -> std::result::Result<Vec<u8>, JsError> {
        self.enhanced_rgba().map_err(js)
    }

    pub fn curve_map(&self) -> std::result::Result<Vec<u8>, JsError> {
        self.curve_map_rgba().map_err(js)
    }
}
