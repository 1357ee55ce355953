//! ToA trilateration with weighted nonlinear least squares.
//!
//! Distances come from `d_i = c * ToA_i`; the position minimizes
//! `F(x) = sum_i alpha_i^2 (d_i - |x - rx_i|)^2` via Levenberg-Marquardt.
//! Because all receivers sit on the ground plane, the mirror solution below
//! ground is rejected by restarting from the z-reflected point and keeping
//! the non-negative-z solution with the lower cost. Selection policies pick
//! the receivers that enter the solve: uniformly at random, or all receivers
//! the classifier predicts as LoS.

use crate::channel::SPEED_OF_LIGHT;
use crate::dataset::Sample;
use crate::model::Prediction;
use crate::scene::{rx_positions, RxGrid, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt;

/// One receiver's contribution to the positioning problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub rx_pos: Vec3,
    pub toa: f64,
    pub weight: f64,
    pub predicted_los: bool,
    pub true_los: bool,
}

/// Solver output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub pos: Vec3,
    pub cost: f64,
    pub iterations: u32,
    pub converged: bool,
    pub used_rx_count: usize,
}

/// Receiver subset chosen by a selection policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// True when too few predicted-LoS receivers existed and the policy fell
    /// back to the highest-probability ones.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PosError {
    InsufficientData { required: usize, available: usize },
    Domain(String),
}

impl fmt::Display for PosError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PosError::InsufficientData { required, available } => {
                write!(f, "insufficient measurements: need {required}, have {available}")
            }
            PosError::Domain(msg) => write!(f, "positioning domain error: {msg}"),
        }
    }
}

impl std::error::Error for PosError {}

/// `d = c * toa`.
pub fn toa_to_distance(toa: f64) -> Result<f64, PosError> {
    if toa < 0.0 || toa.is_nan() {
        return Err(PosError::Domain(format!("negative ToA {toa}")));
    }
    Ok(SPEED_OF_LIGHT * toa)
}

/// `F(x) = sum_i alpha_i^2 f_i^2(x)` with `f_i = d_i - |x - rx_i|`.
pub fn cost(x: Vec3, measurements: &[Measurement]) -> f64 {
    measurements
        .iter()
        .map(|m| {
            let f = SPEED_OF_LIGHT * m.toa - x.dist(m.rx_pos);
            (m.weight * m.weight) * (f * f)
        })
        .sum()
}

const STEP_TOL: f64 = 1e-9;
const MAX_ITERS: u32 = 100;
const LAMBDA0: f64 = 1e-3;

/// Levenberg-Marquardt fit of the UAV position to the selected measurements.
///
/// `init` defaults to the receiver centroid lifted by `mean(d) / sqrt(2)`.
pub fn solve_position(measurements: &[Measurement], init: Option<Vec3>) -> Result<PositionEstimate, PosError> {
    let used: Vec<&Measurement> = measurements.iter().filter(|m| m.weight > 0.0).collect();
    if used.len() < 3 {
        return Err(PosError::InsufficientData {
            required: 3,
            available: used.len(),
        });
    }
    for m in &used {
        if !m.toa.is_finite() {
            return Err(PosError::Domain("included measurement has non-finite ToA".into()));
        }
    }
    let x0 = init.unwrap_or_else(|| {
        let inv = 1.0 / used.len() as f64;
        let centroid = used.iter().fold(Vec3::new(0.0, 0.0, 0.0), |acc, m| acc.add(m.rx_pos)).scale(inv);
        let mean_d = used.iter().map(|m| SPEED_OF_LIGHT * m.toa).sum::<f64>() * inv;
        Vec3::new(centroid.x, centroid.y, centroid.z + mean_d / std::f64::consts::SQRT_2)
    });
    let first = lm_minimize(measurements, x0);
    let best = if first.pos.z < 0.0 {
        let mirrored = Vec3::new(first.pos.x, first.pos.y, -first.pos.z);
        let second = lm_minimize(measurements, mirrored);
        match (first.pos.z >= 0.0, second.pos.z >= 0.0) {
            (_, true) => second,
            _ => {
                if second.cost < first.cost {
                    second
                } else {
                    first
                }
            }
        }
    } else {
        first
    };
    Ok(PositionEstimate {
        used_rx_count: used.len(),
        ..best
    })
}

fn lm_minimize(measurements: &[Measurement], x0: Vec3) -> PositionEstimate {
    let mut x = x0;
    let mut current = cost(x, measurements);
    let mut lambda = LAMBDA0;
    let mut converged = false;
    let mut iters = 0;
    'outer: for iter in 1..=MAX_ITERS {
        iters = iter;
        // Normal equations on weighted residuals r_i = alpha_i (d_i - |x - p_i|)
        // with J_i = dr_i/dx = -alpha_i (x - p_i) / |x - p_i|. Accumulating the
        // negated rows j = -J_i makes the step solve (J^T J + lambda I) s = j^T r.
        let mut jtj = [0.0f64; 9];
        let mut jtr = [0.0f64; 3];
        for m in measurements {
            if m.weight == 0.0 {
                continue;
            }
            let diff = x.sub(m.rx_pos);
            let dist = diff.norm().max(1e-12);
            let r = m.weight * (SPEED_OF_LIGHT * m.toa - dist);
            let j = [
                m.weight * diff.x / dist,
                m.weight * diff.y / dist,
                m.weight * diff.z / dist,
            ];
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a * 3 + b] += j[a] * j[b];
                }
            }
        }
        loop {
            let mut damped = jtj;
            for a in 0..3 {
                damped[a * 3 + a] += lambda;
            }
            let Some(step) = solve_3x3(&damped, &jtr) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let step_norm = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
            if step_norm < STEP_TOL {
                converged = true;
                break 'outer;
            }
            let candidate = Vec3::new(x.x + step[0], x.y + step[1], x.z + step[2]);
            let c = cost(candidate, measurements);
            if c < current {
                x = candidate;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break 'outer;
            }
        }
    }
    PositionEstimate {
        pos: x,
        cost: current,
        iterations: iters,
        converged,
        used_rx_count: 0,
    }
}

fn solve_3x3(a: &[f64; 9], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6]);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let inv = [
        (a[4] * a[8] - a[5] * a[7]) * inv_det,
        (a[2] * a[7] - a[1] * a[8]) * inv_det,
        (a[1] * a[5] - a[2] * a[4]) * inv_det,
        (a[5] * a[6] - a[3] * a[8]) * inv_det,
        (a[0] * a[8] - a[2] * a[6]) * inv_det,
        (a[2] * a[3] - a[0] * a[5]) * inv_det,
        (a[3] * a[7] - a[4] * a[6]) * inv_det,
        (a[1] * a[6] - a[0] * a[7]) * inv_det,
        (a[0] * a[4] - a[1] * a[3]) * inv_det,
    ];
    Some([
        inv[0] * b[0] + inv[1] * b[1] + inv[2] * b[2],
        inv[3] * b[0] + inv[4] * b[1] + inv[5] * b[2],
        inv[6] * b[0] + inv[7] * b[1] + inv[8] * b[2],
    ])
}

/// Measurements for every receiver of a sample's grid, with truth labels and
/// optional classifier predictions attached.
pub fn snapshot_measurements(sample: &Sample, grid_side: f64, prediction: Option<&Prediction>) -> Vec<Measurement> {
    let grid = RxGrid {
        center: Vec3::new(sample.uav_pos.x, sample.uav_pos.y, 0.0),
        side: grid_side,
        g: sample.labels.g,
    };
    rx_positions(&grid)
        .into_iter()
        .enumerate()
        .map(|(i, rx_pos)| Measurement {
            rx_pos,
            toa: sample.toa.values[i],
            weight: 1.0,
            predicted_los: prediction.map_or(false, |p| p.hard[i] == 1),
            true_los: sample.labels.values[i] == 1,
        })
        .collect()
}

/// Uniform choice of `k` finite-ToA receivers, without replacement.
pub fn select_random(measurements: &[Measurement], k: usize, seed: u64) -> Result<Selection, PosError> {
    let finite: Vec<usize> = (0..measurements.len()).filter(|&i| measurements[i].toa.is_finite()).collect();
    if finite.len() < k {
        return Err(PosError::InsufficientData {
            required: k,
            available: finite.len(),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, finite.len(), k);
    let mut indices: Vec<usize> = picks.iter().map(|i| finite[i]).collect();
    indices.sort_unstable();
    Ok(Selection {
        indices,
        fallback: false,
    })
}

/// All receivers with a predicted-LoS label and finite ToA. Falls back to the
/// three highest-probability finite-ToA receivers when fewer than three
/// qualify, flagging the result.
pub fn select_predicted_los(measurements: &[Measurement], prediction: &Prediction) -> Result<Selection, PosError> {
    if prediction.hard.len() != measurements.len() {
        return Err(PosError::Domain(format!(
            "prediction covers {} cells but the grid has {} measurements",
            prediction.hard.len(),
            measurements.len()
        )));
    }
    let indices: Vec<usize> = (0..measurements.len())
        .filter(|&i| prediction.hard[i] == 1 && measurements[i].toa.is_finite())
        .collect();
    if indices.len() >= 3 {
        return Ok(Selection {
            indices,
            fallback: false,
        });
    }
    let mut finite: Vec<usize> = (0..measurements.len()).filter(|&i| measurements[i].toa.is_finite()).collect();
    if finite.len() < 3 {
        return Err(PosError::InsufficientData {
            required: 3,
            available: finite.len(),
        });
    }
    finite.sort_by(|&a, &b| prediction.prob[b].partial_cmp(&prediction.prob[a]).unwrap());
    let mut indices: Vec<usize> = finite.into_iter().take(3).collect();
    indices.sort_unstable();
    Ok(Selection {
        indices,
        fallback: true,
    })
}

/// True-LoS selection: the lower bound policy for the comparison suite.
pub fn select_true_los(measurements: &[Measurement]) -> Result<Selection, PosError> {
    let indices: Vec<usize> = (0..measurements.len())
        .filter(|&i| measurements[i].true_los && measurements[i].toa.is_finite())
        .collect();
    if indices.len() < 3 {
        return Err(PosError::InsufficientData {
            required: 3,
            available: indices.len(),
        });
    }
    Ok(Selection {
        indices,
        fallback: false,
    })
}

/// Solve with only the selected measurements (unit weights).
pub fn solve_with_selection(measurements: &[Measurement], selection: &Selection) -> Result<PositionEstimate, PosError> {
    let subset: Vec<Measurement> = selection
        .indices
        .iter()
        .map(|&i| Measurement {
            weight: 1.0,
            ..measurements[i]
        })
        .collect();
    solve_position(&subset, None)
}

/// Euclidean positioning error in meters.
pub fn positioning_error(estimate: &PositionEstimate, truth: Vec3) -> f64 {
    estimate.pos.dist(truth)
}

/// Empirical CDF: sorted errors with cumulative probability `i / n`.
pub fn error_cdf(errors: &[f64]) -> Result<Vec<(f64, f64)>, PosError> {
    if errors.is_empty() {
        return Err(PosError::Domain("empty error list".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect())
}
