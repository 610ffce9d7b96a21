//! Browser bindings: loadings from rotation angles, 2×2 tangent
//! coordinates and the marginal horseshoe density of an angle.

use std::f64::consts::FRAC_PI_2;

use bsn_core::givens::{self, reconstruct, sparsity_pattern, GivensAngles};
use bsn_core::model::truncated_normal_log_density;
use bsn_core::spd::{tangent_project, SpdMatrix};
use nalgebra::DMatrix;
use wasm_bindgen::prelude::*;

const QUADRATURE_NODES: usize = 4000;

pub fn angle_count(p: usize, d: usize) -> Result<usize, String> {
    givens::angle_count(p, d).map_err(|e| e.to_string())
}

/// Row-major `p × d` loadings generated from `angles`.
pub fn loadings(p: usize, d: usize, angles: &[f64]) -> Result<Vec<f64>, String> {
    let angles = GivensAngles::new(p, d, angles.to_vec()).map_err(|e| e.to_string())?;
    let gamma = reconstruct(&angles).into_matrix();
    Ok((0..p).flat_map(|r| (0..d).map(move |c| (r, c))).map(|rc| gamma[rc]).collect())
}

/// Row-major flags, 1 where an entry is zero because of the zero angles.
pub fn structural_zeros(p: usize, d: usize, angles: &[f64]) -> Result<Vec<u8>, String> {
    let mask: Vec<bool> = angles.iter().map(|a| *a == 0.0).collect();
    let pattern = sparsity_pattern(&mask, p, d).map_err(|e| e.to_string())?;
    Ok((0..p)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| pattern.is_zero(r, c) as u8)
        .collect())
}

fn spd2(v: &[f64]) -> Result<SpdMatrix, String> {
    if v.len() != 3 {
        return Err(format!("expected [a, b, c] for [[a, b], [b, c]], got {} values", v.len()));
    }
    SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[v[0], v[1], v[1], v[2]])).map_err(|e| e.to_string())
}

/// Tangent coordinates `[φ11, φ12, φ22]` of `[[a, b], [b, c]]` at a reference.
pub fn tangent_coordinates(m: &[f64], mref: &[f64]) -> Result<Vec<f64>, String> {
    let phi = tangent_project(&spd2(m)?, &spd2(mref)?).map_err(|e| e.to_string())?;
    Ok(vec![phi.get(0, 0), phi.get(0, 1), phi.get(1, 1)])
}

/// Density of an angle under a truncated normal with half-Cauchy scale
/// `τλ`, integrated over `λ = tan φ` by the midpoint rule.
pub fn angle_prior_density(tau: f64, thetas: &[f64]) -> Result<Vec<f64>, String> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(format!("tau must be positive, got {tau}"));
    }
    let h = FRAC_PI_2 / QUADRATURE_NODES as f64;
    Ok(thetas
        .iter()
        .map(|&theta| {
            if theta.abs() > FRAC_PI_2 {
                return 0.0;
            }
            let sum: f64 = (0..QUADRATURE_NODES)
                .map(|k| {
                    let lambda = ((k as f64 + 0.5) * h).tan();
                    truncated_normal_log_density(theta, tau * lambda).exp()
                })
                .sum();
            sum * h / FRAC_PI_2
        })
        .collect())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = angleCount)]
pub fn angle_count_js(p: usize, d: usize) -> Result<usize, JsError> {
    js(angle_count(p, d))
}

#[wasm_bindgen(js_name = loadings)]
pub fn loadings_js(p: usize, d: usize, angles: Vec<f64>) -> Result<Vec<f64>, JsError> {
    js(loadings(p, d, &angles))
}

#[wasm_bindgen(js_name = structuralZeros)]
pub fn structural_zeros_js(p: usize, d: usize, angles: Vec<f64>) -> Result<Vec<u8>, JsError> {
    js(structural_zeros(p, d, &angles))
}

#[wasm_bindgen(js_name = tangentCoordinates)]
pub fn tangent_coordinates_js(m: Vec<f64>, mref: Vec<f64>) -> Result<Vec<f64>, JsError> {
    js(tangent_coordinates(&m, &mref))
}

#[wasm_bindgen(js_name = anglePriorDensity)]
pub fn angle_prior_density_js(tau: f64, thetas: Vec<f64>) -> Result<Vec<f64>, JsError> {
    js(angle_prior_density(tau, &thetas))
}
