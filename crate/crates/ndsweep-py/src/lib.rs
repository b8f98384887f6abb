//! Python bindings for the capacity-discovery primitives: the truncated
//! geometric sampler, mask construction, capacity selection, and curve
//! CSV round-tripping.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;

use ndsweep::experiment::{CapacityCurve, CurveRow};
use ndsweep::nested;

fn err(e: ndsweep::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// P(k kept units) under the truncated geometric with sweep index `s`.
#[pyfunction]
fn truncated_geometric_pmf(rho: f64, s: usize, n: usize, k: usize) -> PyResult<f64> {
    nested::truncated_geometric_pmf(rho, s, n, k).map_err(err)
}

/// Marginal probability that unit `i` (1-based) is kept on a training step.
#[pyfunction]
fn keep_probability(i: usize, rho: f64, s: usize, n: usize) -> PyResult<f64> {
    nested::keep_probability(i, rho, s, n).map_err(err)
}

/// Draw `count` kept-unit counts, seeded for reproducibility.
#[pyfunction]
fn sample_kept_counts(
    rho: f64,
    s: usize,
    n: usize,
    count: usize,
    seed: u64,
) -> PyResult<Vec<usize>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| nested::sample_kept_count(rho, s, n, &mut rng).map_err(err))
        .collect()
}

/// Per-sample binary keep masks `[len(draws)][n]` from kept-unit counts.
#[pyfunction]
fn build_mask(n: usize, draws: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
    let mask = nested::build_mask(n, &draws).map_err(err)?;
    Ok(mask.data().chunks(n).map(|row| row.to_vec()).collect())
}

fn curve_from_points(points: &[(usize, f64)]) -> CapacityCurve {
    CapacityCurve {
        rows: points
            .iter()
            .map(|&(k, accuracy)| CurveRow {
                k,
                accuracy,
                checkpoint: String::new(),
            })
            .collect(),
    }
}

/// Smallest k whose accuracy is within `epsilon` of the maximum of the
/// curve, given `(k, accuracy)` points with strictly increasing k.
#[pyfunction]
fn select_capacity(points: Vec<(usize, f64)>, epsilon: f64) -> PyResult<usize> {
    let curve = curve_from_points(&points);
    curve.validate().map_err(err)?;
    ndsweep::select_capacity(&curve, epsilon).map_err(err)
}

/// Parse a `k,accuracy,checkpoint` CSV into row tuples.
#[pyfunction]
fn curve_from_csv(text: &str) -> PyResult<Vec<(usize, f64, String)>> {
    let curve = CapacityCurve::from_csv(text).map_err(err)?;
    Ok(curve
        .rows
        .into_iter()
        .map(|r| (r.k, r.accuracy, r.checkpoint))
        .collect())
}

/// Serialize row tuples into the `k,accuracy,checkpoint` CSV format.
#[pyfunction]
fn curve_to_csv(rows: Vec<(usize, f64, String)>) -> PyResult<String> {
    let curve = CapacityCurve {
        rows: rows
            .into_iter()
            .map(|(k, accuracy, checkpoint)| CurveRow {
                k,
                accuracy,
                checkpoint,
            })
            .collect(),
    };
    curve.validate().map_err(err)?;
    Ok(curve.to_csv())
}

#[pymodule]
fn ndsweep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(truncated_geometric_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(keep_probability, m)?)?;
    m.add_function(wrap_pyfunction!(sample_kept_counts, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(select_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(curve_from_csv, m)?)?;
    m.add_function(wrap_pyfunction!(curve_to_csv, m)?)?;
    Ok(())
}
