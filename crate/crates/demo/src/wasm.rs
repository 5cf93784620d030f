use wasm_bindgen::prelude::*;

use crate::{explore_bsgc, json, theory_table, TrainingSession};

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = exploreBsgc)]
pub fn explore_bsgc_js(rows: usize, cols: usize, k: usize, noise: f64, seed: u32) -> Result<String, JsError> {
    explore_bsgc(rows, cols, k, noise, u64::from(seed)).map(|r| json(&r)).map_err(js)
}

#[wasm_bindgen(js_name = theoryTable)]
pub fn theory_table_js(widths: &str, n_prev: usize, parts: &str, jl_n: usize, jl_eps: f64) -> Result<String, JsError> {
    theory_table(widths, n_prev, parts, jl_n, jl_eps).map(|r| json(&r)).map_err(js)
}

#[wasm_bindgen(js_name = TrainingSession)]
pub struct Session(TrainingSession);

#[wasm_bindgen(js_class = TrainingSession)]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(lambda: f64, k: usize, seed: u32) -> Result<Session, JsError> {
        TrainingSession::new(lambda, k, u64::from(seed)).map(Session).map_err(js)
    }

    /// Runs `steps` optimizer steps and returns a snapshot.
    pub fn advance(&mut self, steps: usize) -> Result<String, JsError> {
        self.0.advance(steps).map(|s| json(&s)).map_err(js)
    }
}
