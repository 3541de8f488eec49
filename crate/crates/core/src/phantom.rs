//! Synthetic 2D+t left-ventricle echo phantoms.
//!
//! Each case is a short-axis-style video of a star-shaped cavity (dark pool)
//! inside a bright myocardial wall on a mid-gray background. The cavity
//! boundary is a polar curve `r(theta, t)` around a per-case center; the two
//! disease classes differ only in how that curve moves:
//!
//! * label 1 (takotsubo-like): the apical half barely moves and may balloon
//!   slightly, while the basal half contracts strongly;
//! * label 0 (STEMI-like): the whole contour contracts except a septal
//!   sector that stays frozen in place.
//!
//! Bright static "rib artifact" bands are overlaid independently of the
//! label, and multiplicative speckle is applied last. All randomness comes
//! from per-case seeds derived with [`crate::rng::derive_seed`], so any case
//! can be regenerated in isolation.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::Tensor;

/// Angular center of the frozen septal sector for label-0 cases (the -x
/// direction, i.e. the left of the image).
pub const FROZEN_SECTOR_CENTER: f64 = PI;
/// Half-width of the sector core within which the boundary is effectively
/// static (displacement under one pixel).
pub const FROZEN_SECTOR_HALF_WIDTH: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Frames per case (the temporal extent T).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of cases carrying label 1; the default mirrors a 140/300
    /// class balance.
    pub class_a_fraction: f64,
    /// Multiplicative speckle strength (0 disables).
    pub speckle: f64,
    /// Probability that a case carries bright static artifact bands.
    pub artifact_prob: f64,
    pub master_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 64,
            width: 64,
            class_a_fraction: 140.0 / 300.0,
            speckle: 0.15,
            artifact_prob: 0.1,
            master_seed: 17,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::InvalidConfig(format!("frames {} < 4", self.frames)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig(format!(
                "spatial extent {}x{} below 16x16",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.class_a_fraction) {
            return Err(Error::InvalidConfig(format!(
                "class_a_fraction {} outside [0, 1]",
                self.class_a_fraction
            )));
        }
        if self.speckle < 0.0 || self.speckle > 1.0 {
            return Err(Error::InvalidConfig(format!("speckle {} outside [0, 1]", self.speckle)));
        }
        if !(0.0..=1.0).contains(&self.artifact_prob) {
            return Err(Error::InvalidConfig(format!(
                "artifact_prob {} outside [0, 1]",
                self.artifact_prob
            )));
        }
        Ok(())
    }
}

/// One generated case: video and ground-truth cavity mask, both `(T, H, W)`.
#[derive(Clone, Debug)]
pub struct LabeledEcho {
    pub id: String,
    pub label: u8,
    pub seed: u64,
    pub video: Tensor,
    pub mask: Tensor,
}

/// Per-case motion parameters drawn once from the case rng.
struct Anatomy {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    wall: f64,
    /// Amplitude profile factors; see `amplitude`.
    amp_apex: f64,
    amp_base: f64,
    bulge: f64,
    amp_global: f64,
    freeze_sigma: f64,
    tex_phase: f64,
    row_phase: f64,
}

impl Anatomy {
    fn draw(label: u8, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (height as f64, width as f64);
        // Every parameter is drawn unconditionally so the stream position
        // never depends on the label; label-specific fields are zeroed after
        // the draw. Anything else would leak the label into the shared
        // appearance parameters further down the stream.
        let cx = w * (0.5 + rng.gen_range(-0.03..0.03));
        let cy = h * (0.5 + rng.gen_range(-0.03..0.03));
        let a = w * rng.gen_range(0.16..0.20);
        let b = h * rng.gen_range(0.22..0.27);
        let wall = h.min(w) * rng.gen_range(0.055..0.085);
        let amp_apex = rng.gen_range(0.0..0.015);
        let amp_base = rng.gen_range(0.26..0.32);
        let bulge = rng.gen_range(0.0..0.03);
        let amp_global = rng.gen_range(0.20..0.26);
        let freeze_sigma = rng.gen_range(0.55..0.70);
        let tex_phase = rng.gen_range(0.0..2.0 * PI);
        let row_phase = rng.gen_range(0.0..2.0 * PI);
        Self {
            cx,
            cy,
            a,
            b,
            wall,
            amp_apex,
            amp_base,
            bulge: if label == 1 { bulge } else { 0.0 },
            amp_global,
            freeze_sigma,
            tex_phase,
            row_phase,
        }
    }

    /// Contraction amplitude at polar angle `theta` (0 = +x, pi/2 = apex
    /// toward larger rows).
    fn amplitude(&self, label: u8, theta: f64) -> f64 {
        if label == 1 {
            // Apex quiet, base strong; cubic weighting keeps the equator close
            // to the apical amplitude.
            let basal = (1.0 - theta.sin()) / 2.0;
            self.amp_apex + (self.amp_base - self.amp_apex) * basal.powi(3)
        } else {
            // Global contraction with a frozen septal sector: fully akinetic
            // inside the core, Gaussian recovery of motion outside it.
            let d = angle_diff(theta, FROZEN_SECTOR_CENTER);
            let outside = (d - 1.4 * FROZEN_SECTOR_HALF_WIDTH).max(0.0);
            let freeze = (-(outside / self.freeze_sigma).powi(2)).exp();
            self.amp_global * (1.0 - freeze)
        }
    }

    /// Cavity boundary radius at `(theta, phase)`.
    fn radius(&self, label: u8, theta: f64, phase: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        let r0 = self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt();
        let apical = (1.0 + s) / 2.0;
        let balloon = 1.0 + self.bulge * apical * apical * phase;
        r0 * balloon * (1.0 - self.amplitude(label, theta) * phase)
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d = 2.0 * PI - d;
    }
    d
}

/// Cardiac phase in [0, 1]: 0 at the first frame (diastole), 1 mid-sequence
/// (systole), relaxing again toward the end.
fn cardiac_phase(t: usize, frames: usize) -> f64 {
    0.5 * (1.0 - (2.0 * PI * t as f64 / frames as f64).cos())
}

struct Band {
    row: f64,
    half_thickness: f64,
    x0: usize,
    x1: usize,
    gain: f64,
}

/// Multiplicative speckle: `clamp(v * (1 + sigma * g), 0, 1)` with standard
/// normal `g` drawn from `seed`.
pub fn add_speckle(video: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "speckle", 0);
    let mut out = video.clone();
    for v in out.data_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = (*v * (1.0 + sigma * g)).clamp(0.0, 1.0);
    }
    out
}

/// Generates one case from its own seed. Labels: 1 = takotsubo-like,
/// 0 = STEMI-like.
pub fn generate_case(config: &PhantomConfig, case_seed: u64, label: u8, id: &str) -> Result<LabeledEcho> {
    config.validate()?;
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label {} must be 0 or 1", label)));
    }
    let (t_n, h, w) = (config.frames, config.height, config.width);
    let mut rng = rng::stream(case_seed, "anatomy", 0);
    let anat = Anatomy::draw(label, h, w, &mut rng);

    // Artifact bands are drawn from the same case stream but independently of
    // the label, so their presence carries no class information.
    let mut band_rng = rng::stream(case_seed, "artifact", 0);
    let mut bands = Vec::new();
    if band_rng.gen::<f64>() < config.artifact_prob {
        let count = if band_rng.gen::<f64>() < 0.3 { 2 } else { 1 };
        for _ in 0..count {
            let x0 = band_rng.gen_range(0.0..0.5) * w as f64;
            let span = band_rng.gen_range(0.3..0.6) * w as f64;
            bands.push(Band {
                row: band_rng.gen_range(0.1..0.9) * h as f64,
                half_thickness: band_rng.gen_range(1.2..2.4),
                x0: x0 as usize,
                x1: ((x0 + span) as usize).min(w),
                gain: band_rng.gen_range(0.25..0.40),
            });
        }
    }

    let mut video = Tensor::zeros(&[t_n, h, w]);
    let mut mask = Tensor::zeros(&[t_n, h, w]);
    let vdata = video.data_mut();
    let mdata = mask.data_mut();

    for t in 0..t_n {
        let phase = cardiac_phase(t, t_n);
        let base = t * h * w;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - anat.cx;
                let dy = y as f64 + 0.5 - anat.cy;
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let rb = anat.radius(label, theta, phase);
                let outer = rb + anat.wall;

                let cavity = 0.08 + 0.03 * (rho / rb).min(1.0);
                let wall_tex = 0.85 - 0.05 * ((rho - rb) / anat.wall).clamp(0.0, 1.0)
                    + 0.05 * (5.0 * theta + anat.tex_phase).sin();
                let background = 0.35 - 0.04 * ((rho - outer) / 20.0).clamp(0.0, 1.0)
                    + 0.03 * (0.35 * y as f64 + anat.row_phase).sin();

                // One-pixel linear ramps at both interfaces.
                let inner_mix = (rho - rb + 0.5).clamp(0.0, 1.0);
                let outer_mix = (rho - outer + 0.5).clamp(0.0, 1.0);
                let mut v = cavity + (wall_tex - cavity) * inner_mix;
                v += (background - v) * outer_mix;

                for band in &bands {
                    if x >= band.x0 && x < band.x1 {
                        let fall = (-(((y as f64) - band.row) / band.half_thickness).powi(2)).exp();
                        v += band.gain * fall;
                    }
                }

                vdata[base + y * w + x] = v.clamp(0.0, 1.0);
                mdata[base + y * w + x] = f64::from(rho < rb);
            }
        }
    }

    // Mask sanity: cavity area within [2%, 60%] of the frame in every frame.
    let frame_area = (h * w) as f64;
    for t in 0..t_n {
        let count: f64 = mdata[t * h * w..(t + 1) * h * w].iter().sum();
        let frac = count / frame_area;
        if !(0.02..=0.60).contains(&frac) {
            return Err(Error::InvalidConfig(format!(
                "degenerate phantom config: mask covers {:.1}% of frame {} (bounds 2%..60%)",
                frac * 100.0,
                t
            )));
        }
    }

    let video = if config.speckle > 0.0 {
        add_speckle(&video, config.speckle, rng::derive_seed(case_seed, "speckle-sub", 0))
    } else {
        video
    };

    Ok(LabeledEcho { id: id.to_string(), label, seed: case_seed, video, mask })
}

/// Generates `n` cases. The first `round(n * class_a_fraction)` carry label 1;
/// every case draws from its own derived seed, so generation order is
/// irrelevant to content.
pub fn generate_dataset(config: &PhantomConfig, n: usize) -> Result<Vec<LabeledEcho>> {
    config.validate()?;
    if n < 8 {
        return Err(Error::InvalidConfig(format!("dataset size {} < 8", n)));
    }
    let n1 = (n as f64 * config.class_a_fraction).round() as usize;
    if n1 == 0 || n1 >= n {
        return Err(Error::InvalidConfig(format!(
            "class_a_fraction {} leaves a class empty for n = {}",
            config.class_a_fraction, n
        )));
    }
    (0..n)
        .map(|i| {
            let seed = rng::derive_seed(config.master_seed, "phantom-case", i as u64);
            let label = u8::from(i < n1);
            generate_case(config, seed, label, &format!("case{:04}", i))
        })
        .collect()
}

/// Classifies a case from mask motion alone: the apical half (rows below the
/// overall centroid) staying quiet relative to the basal half marks label 1.
/// Intended as an independent check that generated motion is separable.
pub fn motion_label_oracle(mask: &Tensor) -> u8 {
    let &[t_n, h, w] = mask.shape() else { panic!("mask must be (T, H, W)") };
    let data = mask.data();
    let mut weighted = 0.0;
    let mut total = 0.0;
    for t in 0..t_n {
        for y in 0..h {
            let row_sum: f64 = data[(t * h + y) * w..(t * h + y + 1) * w].iter().sum();
            weighted += y as f64 * row_sum;
            total += row_sum;
        }
    }
    let centroid = weighted / total;
    let variation = |areas: &[f64]| {
        let max = areas.iter().cloned().fold(f64::MIN, f64::max);
        let min = areas.iter().cloned().fold(f64::MAX, f64::min);
        if max > 0.0 {
            (max - min) / max
        } else {
            0.0
        }
    };
    let mut apical = Vec::with_capacity(t_n);
    let mut basal = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let mut ap = 0.0;
        let mut ba = 0.0;
        for y in 0..h {
            let row_sum: f64 = data[(t * h + y) * w..(t * h + y + 1) * w].iter().sum();
            if (y as f64) > centroid {
                ap += row_sum;
            } else {
                ba += row_sum;
            }
        }
        apical.push(ap);
        basal.push(ba);
    }
    u8::from(variation(&apical) < 0.45 * variation(&basal))
}

/// Nearest-index temporal resampling to exactly `frames` frames.
pub fn resample_frames(video: &Tensor, frames: usize) -> Result<Tensor> {
    let &[t_n, h, w] = video.shape() else {
        return Err(Error::InvalidArgument(format!(
            "resample_frames wants (T, H, W), got {:?}",
            video.shape()
        )));
    };
    if frames == 0 {
        return Err(Error::InvalidArgument("cannot resample to zero frames".into()));
    }
    if frames == t_n {
        return Ok(video.clone());
    }
    let mut out = Tensor::zeros(&[frames, h, w]);
    for t in 0..frames {
        let src = ((t as f64 + 0.5) * t_n as f64 / frames as f64) as usize;
        let src = src.min(t_n - 1);
        out.data_mut()[t * h * w..(t + 1) * h * w]
            .copy_from_slice(&video.data()[src * h * w..(src + 1) * h * w]);
    }
    Ok(out)
}

/// Writes `cases/<id>/video.ltsr`, `cases/<id>/mask.ltsr` and a
/// `manifest.csv` with columns id,label,seed,frames,height,width.
pub fn write_dataset(dir: &Path, cases: &[LabeledEcho]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("write_dataset with no cases".into()));
    }
    let case_root = dir.join("cases");
    fs::create_dir_all(&case_root).map_err(|e| Error::io(&case_root, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    writeln!(manifest, "id,label,seed,frames,height,width").map_err(|e| Error::io(&manifest_path, e))?;
    for case in cases {
        let &[t_n, h, w] = case.video.shape() else {
            return Err(Error::InvalidArgument(format!("case {} video is not rank 3", case.id)));
        };
        let cdir = case_root.join(&case.id);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        io::write_tensor(&cdir.join("video.ltsr"), &case.video)?;
        io::write_tensor(&cdir.join("mask.ltsr"), &case.mask)?;
        writeln!(manifest, "{},{},{},{},{},{}", case.id, case.label, case.seed, t_n, h, w)
            .map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledEcho>> {
    let manifest_path = dir.join("manifest.csv");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut cases = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if lineno == 0 {
            if line.trim() != "id,label,seed,frames,height,width" {
                return Err(Error::format(&manifest_path, "unexpected manifest header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                &manifest_path,
                format!("line {}: expected 6 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::format(&manifest_path, format!("line {}: bad {}", lineno + 1, what)))
        };
        let id = fields[0].trim().to_string();
        if id.is_empty() || id.contains(['/', '\\', '.']) {
            return Err(Error::format(&manifest_path, format!("line {}: bad case id", lineno + 1)));
        }
        let label = parse(fields[1], "label")?;
        if label > 1 {
            return Err(Error::format(&manifest_path, format!("line {}: label {}", lineno + 1, label)));
        }
        let seed = parse(fields[2], "seed")?;
        let (frames, height, width) =
            (parse(fields[3], "frames")?, parse(fields[4], "height")?, parse(fields[5], "width")?);
        let cdir = dir.join("cases").join(&id);
        let video: Tensor = io::read_tensor(&cdir.join("video.ltsr"))?;
        let mask: Tensor = io::read_tensor(&cdir.join("mask.ltsr"))?;
        let want = [frames as usize, height as usize, width as usize];
        if video.shape() != want || mask.shape() != want {
            return Err(Error::format(
                &cdir.join("video.ltsr"),
                format!("tensor shape disagrees with manifest entry {:?}", want),
            ));
        }
        cases.push(LabeledEcho { id, label: label as u8, seed, video, mask });
    }
    if cases.is_empty() {
        return Err(Error::format(&manifest_path, "manifest lists no cases"));
    }
    Ok(cases)
}
