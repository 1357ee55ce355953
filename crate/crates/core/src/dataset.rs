//! Aligned multi-modal samples, route splits, and the "SNLD" on-disk format.
//!
//! Each sample pairs one snapshot's rendered image with its CIR planes, LoS
//! label grid, first-arrival ToA grid and UAV pose. Splits are route-based;
//! CIR normalization statistics always come from the training subset. The
//! file format is little-endian and bit-exact, so save -> load -> save
//! reproduces identical bytes.

use crate::channel::{trace_grid, ChannelConfig, CirMatrix, LabelGrid, ToaGrid};
use crate::scene::{trajectory_snapshots, Scenario, Vec3};
use crate::sensing::{render, CameraSpec, Image, SenseError};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One snapshot's aligned (image, CIR, labels, ToA) tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub cir: CirMatrix,
    pub labels: LabelGrid,
    pub toa: ToaGrid,
    pub uav_pos: Vec3,
    pub route_id: u32,
    pub snapshot_index: u32,
}

/// Per-channel CIR standardization statistics (identity until computed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirNormalization {
    pub mean: [f32; 2],
    pub std: [f32; 2],
}

impl Default for CirNormalization {
    fn default() -> Self {
        CirNormalization {
            mean: [0.0, 0.0],
            std: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub scenario: String,
    pub altitude: f64,
    pub freq_hz: f64,
    pub g: u32,
    pub grid_side: f64,
    pub footprint_side: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub norm: CirNormalization,
    pub meta: DatasetMeta,
}

/// Disjoint train/test index lists covering the whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Split {
    /// True when the held-out route left nothing to train on.
    pub fn is_degenerate(&self) -> bool {
        self.train_ids.is_empty()
    }
}

#[derive(Debug)]
pub enum DataError {
    Config(String),
    Domain(String),
    NotFound(String),
    Format(String),
    Io(io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Config(msg) => write!(f, "dataset config error: {msg}"),
            DataError::Domain(msg) => write!(f, "dataset domain error: {msg}"),
            DataError::NotFound(msg) => write!(f, "not found: {msg}"),
            DataError::Format(msg) => write!(f, "dataset format error: {msg}"),
            DataError::Io(e) => write!(f, "dataset io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<SenseError> for DataError {
    fn from(e: SenseError) -> Self {
        DataError::Config(e.to_string())
    }
}

const MAGIC: &[u8; 4] = b"SNLD";
const VERSION: u32 = 1;

/// One sample per snapshot per route, rendered and ray-traced at `altitude`.
pub fn generate_dataset(
    scenario: &Scenario,
    altitude: f64,
    cam: &CameraSpec,
    channel_cfg: &ChannelConfig,
) -> Result<Dataset, DataError> {
    if !(altitude > 0.0) {
        return Err(DataError::Config(format!("altitude must be positive, got {altitude}")));
    }
    let scn = scenario.with_route_altitude(altitude);
    let mut snapshots = Vec::new();
    for route in &scn.routes {
        let snaps = trajectory_snapshots(&scn, route.id).map_err(|e| DataError::Config(e.to_string()))?;
        for snap in &snaps {
            for b in &scn.buildings {
                if b.contains_xy(snap.uav_pos.x, snap.uav_pos.y) && b.height() >= snap.uav_pos.z {
                    return Err(DataError::Config(format!(
                        "route {} at altitude {altitude} m passes through a {} m building",
                        route.id,
                        b.height()
                    )));
                }
            }
        }
        snapshots.extend(snaps);
    }
    let samples: Vec<Result<Sample, DataError>> = snapshots
        .par_iter()
        .map(|snap| {
            let image = render(snap, &scn, cam)?;
            let (labels, cir, toa) = trace_grid(snap, &scn, channel_cfg);
            Ok(Sample {
                image,
                cir,
                labels,
                toa,
                uav_pos: snap.uav_pos,
                route_id: snap.route_id,
                snapshot_index: snap.index,
            })
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        samples,
        norm: CirNormalization::default(),
        meta: DatasetMeta {
            scenario: scn.name.to_string(),
            altitude,
            freq_hz: channel_cfg.freq_hz,
            g: scn.grid_g as u32,
            grid_side: scn.grid_side,
            footprint_side: cam.footprint_side,
        },
    })
}

/// Hold out one route as the test set; everything else trains.
pub fn split_by_route(ds: &Dataset, test_route: u32) -> Result<Split, DataError> {
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if s.route_id == test_route {
            test_ids.push(i);
        } else {
            train_ids.push(i);
        }
    }
    if test_ids.is_empty() {
        return Err(DataError::NotFound(format!("route {test_route} has no samples")));
    }
    Ok(Split { train_ids, test_ids })
}

/// Uniform sample of `k` training indices without replacement, seeded.
pub fn few_shot_subset(split: &Split, k: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if k > split.train_ids.len() {
        return Err(DataError::Domain(format!(
            "requested {k} few-shot samples from a train split of {}",
            split.train_ids.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, split.train_ids.len(), k);
    let mut ids: Vec<usize> = picks.iter().map(|i| split.train_ids[i]).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Standardizes both CIR channels with statistics from the training subset.
/// Standard deviations are floored at 1e-12; statistics land in `norm`.
pub fn normalize_cir(mut ds: Dataset, split: &Split) -> Dataset {
    let mut sum = [0.0f64; 2];
    let mut count = 0usize;
    for &i in &split.train_ids {
        let s = &ds.samples[i];
        sum[0] += s.cir.re.iter().map(|&v| v as f64).sum::<f64>();
        sum[1] += s.cir.im.iter().map(|&v| v as f64).sum::<f64>();
        count += s.cir.re.len();
    }
    let n = count.max(1) as f64;
    let mean = [sum[0] / n, sum[1] / n];
    let mut sq = [0.0f64; 2];
    for &i in &split.train_ids {
        let s = &ds.samples[i];
        sq[0] += s.cir.re.iter().map(|&v| (v as f64 - mean[0]).powi(2)).sum::<f64>();
        sq[1] += s.cir.im.iter().map(|&v| (v as f64 - mean[1]).powi(2)).sum::<f64>();
    }
    let std = [(sq[0] / n).sqrt().max(1e-12), (sq[1] / n).sqrt().max(1e-12)];
    for s in &mut ds.samples {
        for v in &mut s.cir.re {
            *v = ((*v as f64 - mean[0]) / std[0]) as f32;
        }
        for v in &mut s.cir.im {
            *v = ((*v as f64 - mean[1]) / std[1]) as f32;
        }
    }
    ds.norm = CirNormalization {
        mean: [mean[0] as f32, mean[1] as f32],
        std: [std[0] as f32, std[1] as f32],
    };
    ds
}

// --- binary io helpers ---

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, vs: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            DataError::Format("truncated file".into())
        } else {
            DataError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>, DataError> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, DataError> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_to(&self, w: &mut impl Write) -> Result<(), DataError> {
        let g = self.meta.g as usize;
        let res = self.samples.first().map_or(0, |s| s.image.resolution);
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.meta.g)?;
        write_u32(w, res as u32)?;
        write_u64(w, self.samples.len() as u64)?;
        write_f32s(w, &[self.norm.mean[0], self.norm.mean[1], self.norm.std[0], self.norm.std[1]])?;
        let meta = format!(
            "scenario={}\naltitude={}\nfreq_hz={}\ngrid_side={}\nfootprint_side={}\n",
            self.meta.scenario, self.meta.altitude, self.meta.freq_hz, self.meta.grid_side, self.meta.footprint_side
        );
        write_u32(w, meta.len() as u32)?;
        w.write_all(meta.as_bytes())?;
        for s in &self.samples {
            if s.labels.g != g || s.cir.g != g || s.toa.g != g || s.image.resolution != res {
                return Err(DataError::Format("sample grid/resolution mismatch".into()));
            }
            write_f64s(w, &[s.uav_pos.x, s.uav_pos.y, s.uav_pos.z])?;
            write_u32(w, s.route_id)?;
            write_u32(w, s.snapshot_index)?;
            write_f32s(w, &s.image.data)?;
            write_f32s(w, &s.cir.re)?;
            write_f32s(w, &s.cir.im)?;
            w.write_all(&s.labels.values)?;
            write_f64s(w, &s.toa.values)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, DataError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::load_from(&mut r)
    }

    pub fn load_from(r: &mut impl Read) -> Result<Dataset, DataError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::Format(format!("bad magic {magic:?}, expected SNLD")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let g = read_u32(r)? as usize;
        let res = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        let stats = read_f32s(r, 4)?;
        let meta_len = read_u32(r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        read_exact(r, &mut meta_buf)?;
        let meta_str = String::from_utf8(meta_buf).map_err(|_| DataError::Format("metadata is not UTF-8".into()))?;
        let mut meta = DatasetMeta {
            scenario: String::new(),
            altitude: 0.0,
            freq_hz: 0.0,
            g: g as u32,
            grid_side: 0.0,
            footprint_side: 0.0,
        };
        for line in meta_str.lines() {
            let Some((key, value)) = line.split_once('=') else { continue };
            match key {
                "scenario" => meta.scenario = value.to_string(),
                "altitude" => meta.altitude = parse_meta_f64(value)?,
                "freq_hz" => meta.freq_hz = parse_meta_f64(value)?,
                "grid_side" => meta.grid_side = parse_meta_f64(value)?,
                "footprint_side" => meta.footprint_side = parse_meta_f64(value)?,
                _ => {}
            }
        }
        let cells = g * g;
        let pixels = 3 * res * res;
        let mpp = if res > 0 { meta.footprint_side / res as f64 } else { 0.0 };
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let pos = read_f64s(r, 3)?;
            let route_id = read_u32(r)?;
            let snapshot_index = read_u32(r)?;
            let image_data = read_f32s(r, pixels)?;
            let re = read_f32s(r, cells)?;
            let im = read_f32s(r, cells)?;
            let mut labels = vec![0u8; cells];
            read_exact(r, &mut labels)?;
            if labels.iter().any(|&v| v > 1) {
                return Err(DataError::Format("label byte outside {0, 1}".into()));
            }
            let toa = read_f64s(r, cells)?;
            samples.push(Sample {
                image: Image {
                    resolution: res,
                    data: image_data,
                    meters_per_pixel: mpp,
                },
                cir: CirMatrix { g, re, im },
                labels: LabelGrid { g, values: labels },
                toa: ToaGrid { g, values: toa },
                uav_pos: Vec3::new(pos[0], pos[1], pos[2]),
                route_id,
                snapshot_index,
            });
        }
        Ok(Dataset {
            samples,
            norm: CirNormalization {
                mean: [stats[0], stats[1]],
                std: [stats[2], stats[3]],
            },
            meta,
        })
    }
}

fn parse_meta_f64(v: &str) -> Result<f64, DataError> {
    v.parse::<f64>().map_err(|_| DataError::Format(format!("bad float in metadata: {v}")))
}
