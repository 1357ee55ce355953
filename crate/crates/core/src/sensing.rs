//! Synthetic nadir camera.
//!
//! Renders the ground footprint beneath the UAV as an orthographic top-down
//! raster. Ground is mid-gray, street corridors dark gray, and building
//! rooftops carry their normalized height in channel 0 plus a deterministic
//! per-building hue in channels 1-2, so occlusion-relevant geometry is
//! explicit in the pixels. Pixel (0, 0) covers the footprint corner with
//! minimum x and minimum y; pixel rows advance along +x and columns along +y,
//! matching the receiver grid indexing.

use crate::scene::{Scenario, Snapshot};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::{self, Write};

/// Square RGB image tensor in channel-major (3 x H x H) layout, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub resolution: usize,
    pub data: Vec<f32>,
    pub meters_per_pixel: f64,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let hw = self.resolution * self.resolution;
        let idx = row * self.resolution + col;
        [self.data[idx], self.data[hw + idx], self.data[2 * hw + idx]]
    }
}

/// Nadir camera parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub footprint_side: f64,
    pub resolution: usize,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            footprint_side: 150.0,
            resolution: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SenseError {
    Config(String),
    Domain(String),
}

impl fmt::Display for SenseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SenseError::Config(msg) => write!(f, "camera config error: {msg}"),
            SenseError::Domain(msg) => write!(f, "sensing domain error: {msg}"),
        }
    }
}

impl std::error::Error for SenseError {}

const GROUND: [f32; 3] = [0.5, 0.5, 0.5];
const STREET: [f32; 3] = [0.2, 0.2, 0.2];

/// Deterministic rooftop hue for channels 1-2 from the building id.
fn rooftop_hue(id: u32) -> (f32, f32) {
    let phi = 0.618_033_988_749_894_9_f64;
    let a = ((id as f64 + 1.0) * phi).fract();
    let b = ((id as f64 + 1.0) * phi * phi).fract();
    ((0.25 + 0.5 * a) as f32, (0.25 + 0.5 * b) as f32)
}

/// Orthographic top-down raster of the camera footprint centered on the nadir.
pub fn render(snapshot: &Snapshot, scenario: &Scenario, cam: &CameraSpec) -> Result<Image, SenseError> {
    if cam.resolution < 32 {
        return Err(SenseError::Config(format!(
            "camera resolution must be at least 32, got {}",
            cam.resolution
        )));
    }
    if cam.footprint_side < snapshot.grid.side {
        return Err(SenseError::Config(format!(
            "camera footprint {} m does not cover the {} m receiver grid",
            cam.footprint_side, snapshot.grid.side
        )));
    }
    let res = cam.resolution;
    let step = cam.footprint_side / res as f64;
    let x0 = snapshot.grid.center.x - cam.footprint_side / 2.0;
    let y0 = snapshot.grid.center.y - cam.footprint_side / 2.0;
    let h_max = scenario.max_building_height();
    let hw = res * res;
    let mut data = vec![0.0f32; 3 * hw];
    for row in 0..res {
        let x = x0 + (row as f64 + 0.5) * step;
        for col in 0..res {
            let y = y0 + (col as f64 + 0.5) * step;
            let mut color = if scenario.streets.iter().any(|s| s.contains(x, y)) {
                STREET
            } else {
                GROUND
            };
            // Tallest building wins the pixel.
            let mut best = f64::NEG_INFINITY;
            for b in &scenario.buildings {
                if b.height() > best && b.contains_xy(x, y) {
                    best = b.height();
                    let (c1, c2) = rooftop_hue(b.height_color_id);
                    color = [(b.height() / h_max) as f32, c1, c2];
                }
            }
            let idx = row * res + col;
            data[idx] = color[0];
            data[hw + idx] = color[1];
            data[2 * hw + idx] = color[2];
        }
    }
    Ok(Image {
        resolution: res,
        data,
        meters_per_pixel: step,
    })
}

/// Zero-mean Gaussian field with the given variance, deterministic per seed.
pub(crate) fn noise_field(n: usize, variance: f64, seed: u64) -> Vec<f32> {
    if variance == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("valid std");
    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
}

/// Per-element Gaussian perturbation followed by a clamp to [0, 1].
pub fn add_gaussian_noise(img: &Image, variance: f64, seed: u64) -> Result<Image, SenseError> {
    if !(variance >= 0.0) {
        return Err(SenseError::Domain(format!(
            "noise variance must be non-negative, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(img.clone());
    }
    let noise = noise_field(img.data.len(), variance, seed);
    let data = img
        .data
        .iter()
        .zip(&noise)
        .map(|(&v, &n)| (v + n).clamp(0.0, 1.0))
        .collect();
    Ok(Image {
        resolution: img.resolution,
        data,
        meters_per_pixel: img.meters_per_pixel,
    })
}

/// Binary PPM (P6, 8-bit) export for visual inspection.
pub fn write_ppm(img: &Image, w: &mut impl Write) -> io::Result<()> {
    let res = img.resolution;
    write!(w, "P6\n{res} {res}\n255\n")?;
    let hw = res * res;
    let mut buf = Vec::with_capacity(3 * hw);
    for idx in 0..hw {
        for c in 0..3 {
            buf.push((img.data[c * hw + idx].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scenario, rx_positions, Building, RxGrid, ScenarioSpec, Vec3};

    fn snapshot_at(x: f64, y: f64, z: f64, side: f64, g: usize) -> Snapshot {
        Snapshot {
            uav_pos: Vec3::new(x, y, z),
            route_id: 1,
            index: 0,
            grid: RxGrid {
                center: Vec3::new(x, y, 0.0),
                side,
                g,
            },
        }
    }

    #[test]
    fn empty_scene_renders_uniform_ground() {
        let mut spec = ScenarioSpec::crossroad(1);
        spec.building_count = Some(0);
        let mut s = build_scenario(&spec).unwrap();
        s.streets.clear();
        let img = render(&snapshot_at(0.0, 0.0, 60.0, 150.0, 30), &s, &CameraSpec::default()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tallest_building_pixel_hits_full_channel0() {
        let mut spec = ScenarioSpec::crossroad(1);
        spec.building_count = Some(0);
        let mut s = build_scenario(&spec).unwrap();
        s.streets.clear();
        s.buildings.push(Building {
            min: Vec3::new(-20.0, -20.0, 0.0),
            max: Vec3::new(20.0, 20.0, 37.5),
            height_color_id: 4,
        });
        let img = render(&snapshot_at(0.0, 0.0, 60.0, 150.0, 30), &s, &CameraSpec::default()).unwrap();
        let center = img.pixel(48, 48);
        assert_eq!(center[0], 1.0);
        // Corner pixel stays ground-colored.
        assert_eq!(img.pixel(0, 0), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn paper_scale_resolution() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let cam = CameraSpec {
            footprint_side: 150.0,
            resolution: 1080,
        };
        let img = render(&snapshot_at(0.0, 0.0, 63.3, 150.0, 30), &s, &cam).unwrap();
        assert_eq!(img.data.len(), 3 * 1080 * 1080);
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tiny_resolution_is_config_error() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let cam = CameraSpec {
            footprint_side: 150.0,
            resolution: 16,
        };
        assert!(matches!(
            render(&snapshot_at(0.0, 0.0, 63.3, 150.0, 30), &s, &cam),
            Err(SenseError::Config(_))
        ));
    }

    #[test]
    fn render_is_deterministic() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let snap = snapshot_at(10.0, -25.0, 63.3, 150.0, 30);
        let a = render(&snap, &s, &CameraSpec::default()).unwrap();
        let b = render(&snap, &s, &CameraSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_grid_alignment() {
        // The pixel containing receiver (r, c) must land on (r, c) under the
        // footprint -> grid affine map, within one pixel.
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let snap = snapshot_at(12.0, -7.0, 63.3, 150.0, 30);
        let cam = CameraSpec::default();
        let img = render(&snap, &s, &cam).unwrap();
        let res = img.resolution;
        let step_px = cam.footprint_side / res as f64;
        let step_rx = snap.grid.side / (snap.grid.g - 1) as f64;
        let x0 = snap.grid.center.x - cam.footprint_side / 2.0;
        let y0 = snap.grid.center.y - cam.footprint_side / 2.0;
        let gx0 = snap.grid.center.x - snap.grid.side / 2.0;
        let gy0 = snap.grid.center.y - snap.grid.side / 2.0;
        for (i, rx) in rx_positions(&snap.grid).iter().enumerate() {
            let (r, c) = (i / snap.grid.g, i % snap.grid.g);
            let row = (((rx.x - x0) / step_px).floor() as usize).min(res - 1);
            let col = (((rx.y - y0) / step_px).floor() as usize).min(res - 1);
            // Map the pixel center back to grid index units.
            let r_back = (x0 + (row as f64 + 0.5) * step_px - gx0) / step_rx;
            let c_back = (y0 + (col as f64 + 0.5) * step_px - gy0) / step_rx;
            let tol = step_px / step_rx; // one pixel in grid units
            assert!((r_back - r as f64).abs() <= tol, "row misaligned at rx {i}");
            assert!((c_back - c as f64).abs() <= tol, "col misaligned at rx {i}");
        }
    }

    #[test]
    fn zero_variance_is_identity() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let img = render(&snapshot_at(0.0, 0.0, 63.3, 150.0, 30), &s, &CameraSpec::default()).unwrap();
        let noisy = add_gaussian_noise(&img, 0.0, 99).unwrap();
        assert_eq!(img, noisy);
    }

    #[test]
    fn negative_variance_is_domain_error() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let img = render(&snapshot_at(0.0, 0.0, 63.3, 150.0, 30), &s, &CameraSpec::default()).unwrap();
        assert!(matches!(add_gaussian_noise(&img, -0.1, 0), Err(SenseError::Domain(_))));
    }

    #[test]
    fn noise_statistics_match_requested_variance() {
        let n = 1_200_000;
        let field = noise_field(n, 0.35, 7);
        let mean: f64 = field.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 0.35).abs() < 0.01, "sample variance {var}");
        let sigma = 0.35f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "sample mean {mean}");
    }

    #[test]
    fn noisy_output_stays_clamped_and_seeded() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let img = render(&snapshot_at(0.0, 0.0, 63.3, 150.0, 30), &s, &CameraSpec::default()).unwrap();
        let a = add_gaussian_noise(&img, 0.35, 5).unwrap();
        let b = add_gaussian_noise(&img, 0.35, 5).unwrap();
        let c = add_gaussian_noise(&img, 0.35, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ppm_header_and_size() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        let img = render(&snapshot_at(0.0, 0.0, 63.3, 150.0, 30), &s, &CameraSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n96 96\n255\n"));
        assert_eq!(buf.len(), b"P6\n96 96\n255\n".len() + 3 * 96 * 96);
    }
}
