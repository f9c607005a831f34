//! wasm-bindgen entry points for the static page in `www/`.
//!
//! Boxes cross the boundary as flat `Float64Array`s: five numbers per ground
//! truth box (`class, x1, y1, x2, y2`) and six per prediction (plus confidence).

pub mod demo;

use wasm_bindgen::prelude::*;

fn js_err(e: rescbam::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct ImageHandle {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    boxes: Vec<f64>,
}

impl From<demo::ImageView> for ImageHandle {
    fn from(v: demo::ImageView) -> Self {
        ImageHandle {
            width: v.width,
            height: v.height,
            rgba: v.rgba,
            boxes: v.boxes.concat(),
        }
    }
}

#[wasm_bindgen]
impl ImageHandle {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }
}

#[wasm_bindgen]
pub fn synthetic_image(seed: u32, num_classes: u32) -> Result<ImageHandle, JsError> {
    demo::synthetic_image(seed.into(), num_classes as usize).map(Into::into).map_err(js_err)
}

/// Returns `[iou, d2, c2, v, loss]`.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn ciou(px1: f64, py1: f64, px2: f64, py2: f64, gx1: f64, gy1: f64, gx2: f64, gy2: f64) -> Result<Vec<f64>, JsError> {
    demo::ciou_breakdown([px1, py1, px2, py2], [gx1, gy1, gx2, gy2]).map(|t| t.to_vec()).map_err(js_err)
}

#[wasm_bindgen]
pub struct JitterHandle {
    report: demo::JitterReport,
}

#[wasm_bindgen]
impl JitterHandle {
    #[wasm_bindgen(getter)]
    pub fn map50(&self) -> f64 {
        self.report.map50
    }

    #[wasm_bindgen(getter)]
    pub fn map5095(&self) -> f64 {
        self.report.map5095
    }

    #[wasm_bindgen(getter)]
    pub fn f1(&self) -> f64 {
        self.report.f1
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> usize {
        self.report.images.len()
    }

    pub fn image(&self, i: usize) -> Option<ImageHandle> {
        self.report.images.get(i).cloned().map(Into::into)
    }

    pub fn predictions(&self, i: usize) -> Vec<f64> {
        self.report.predictions.get(i).map(|p| p.concat()).unwrap_or_default()
    }
}

#[wasm_bindgen]
pub fn jitter_eval(seed: u32, num_images: u32, num_classes: u32, jitter: f64, clutter: f64) -> Result<JitterHandle, JsError> {
    demo::jitter_eval(seed.into(), num_images as usize, num_classes as usize, jitter, clutter)
        .map(|report| JitterHandle { report })
        .map_err(js_err)
}
