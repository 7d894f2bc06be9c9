//! Synthetic multi-temporal crop scenes.
//!
//! A scene is a tile of rectangular field parcels, each parcel carrying a
//! class. Every class has a fixed per-band double-logistic phenology; frames
//! are observed on irregular days, perturbed by Gaussian noise and occluded
//! by clouds. Two extra channels hold the scaled day of year and year.

mod container;

pub use container::{read_dataset, write_dataset, Dataset, DatasetSample, Split, MAGIC, VERSION};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::encoder::{LabelMap, SequenceSample};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, rng, stream};
use crate::tensor::Tensor;

/// Band names used in metadata; values are synthetic.
pub const BAND_NAMES: [&str; 13] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12"];
pub const CLOUD_REFLECTANCE: f64 = 0.9;
pub const CLOUD_SIGMA: f64 = 0.05;
pub const MAX_CLASSES: usize = 17;
pub const MAX_TILE: usize = 64;
const DAYS: f64 = 365.0;
const CATALOGUE_SEED: u64 = 0x5EED_C10D;
/// Minimum spectral distance between any two classes on every day.
pub const SEPARATION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub tile: usize,
    pub n_bands: usize,
    pub n_classes: usize,
    /// Frames per sample.
    pub t: usize,
    pub seasons: usize,
    pub cloud_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub min_field: usize,
    /// When set, each sample keeps a random number of frames in
    /// `min_obs..=t`; the rest is trailing padding.
    pub min_obs: Option<usize>,
    /// Exponent of the Zipf-like class distribution (0 gives uniform).
    pub zipf: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            tile: 24,
            n_bands: 13,
            n_classes: 8,
            t: 30,
            seasons: 2,
            cloud_prob: 0.2,
            noise_sigma: 0.02,
            seed: 0,
            min_field: 5,
            min_obs: None,
            zipf: 1.0,
        }
    }
}

impl SceneSpec {
    /// Input depth seen by the model.
    pub fn depth(&self) -> usize {
        self.n_bands + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_bands == 0 {
            return bad("n_bands must be >= 1".into());
        }
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return bad(format!("n_classes must be in 2..={MAX_CLASSES}, got {}", self.n_classes));
        }
        if self.t == 0 {
            return bad("t must be >= 1".into());
        }
        if !(1..=2).contains(&self.seasons) {
            return bad(format!("seasons must be 1 or 2, got {}", self.seasons));
        }
        if !(0.0..1.0).contains(&self.cloud_prob) {
            return bad(format!("cloud_prob must be in [0, 1), got {}", self.cloud_prob));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return bad(format!("zipf must be >= 0, got {}", self.zipf));
        }
        if let Some(m) = self.min_obs {
            if m == 0 || m > self.t {
                return bad(format!("min_obs must be in 1..={}, got {m}", self.t));
            }
        }
        if self.tile > MAX_TILE {
            return bad(format!("tile must be <= {MAX_TILE}, got {}", self.tile));
        }
        check_field(self.tile, self.min_field)
    }
}

fn check_field(tile: usize, min_field: usize) -> Result<()> {
    if min_field == 0 || tile < min_field {
        return Err(Error::Config(format!("tile of {tile} px is too small for min_field {min_field}")));
    }
    Ok(())
}

/// One band's double-logistic curve over the day of year.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub rho_min: f64,
    pub rho_max: f64,
    pub t_g: f64,
    pub t_s: f64,
    pub a: f64,
    pub b: f64,
}

impl BandCurve {
    pub fn at(&self, day: f64) -> f64 {
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        self.rho_min + (self.rho_max - self.rho_min) * (s(self.a * (day - self.t_g)) - s(self.b * (day - self.t_s)))
    }

    fn shifted(&self, days: f64) -> BandCurve {
        BandCurve { t_g: self.t_g + days, t_s: self.t_s + days, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenologyProfile {
    pub bands: Vec<BandCurve>,
}

impl PhenologyProfile {
    fn shifted(&self, days: f64) -> PhenologyProfile {
        PhenologyProfile { bands: self.bands.iter().map(|b| b.shifted(days)).collect() }
    }
}

/// Reflectance of every band on `day`.
pub fn reflectance(profile: &PhenologyProfile, day: f64) -> Vec<f64> {
    profile.bands.iter().map(|b| b.at(day)).collect()
}

/// Per-class phenologies plus a per-season timing shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalogue {
    pub classes: Vec<PhenologyProfile>,
    pub season_shift: Vec<f64>,
}

impl ClassCatalogue {
    /// The fixed catalogue for a class and band count. Classes are redrawn
    /// until every pair differs by more than [`SEPARATION`] in some band on
    /// every day of every season.
    pub fn new(n_classes: usize, n_bands: usize, seasons: usize) -> Self {
        let mut rng = rng(derive_seed(CATALOGUE_SEED, n_classes as u64, n_bands as u64));
        let season_shift: Vec<f64> = (0..seasons).map(|s| if s == 0 { 0.0 } else { rng.gen_range(-15.0..15.0) }).collect();
        let mut classes: Vec<PhenologyProfile> = Vec::with_capacity(n_classes);
        while classes.len() < n_classes {
            let candidate = PhenologyProfile { bands: (0..n_bands).map(|_| draw_curve(&mut rng)).collect() };
            let separated = classes.iter().all(|other| {
                season_shift.iter().all(|&sh| min_separation(&candidate.shifted(sh), &other.shifted(sh)) > SEPARATION + 0.01)
            });
            if separated {
                classes.push(candidate);
            }
        }
        ClassCatalogue { classes, season_shift }
    }

    pub fn profile(&self, class: usize, season: usize) -> PhenologyProfile {
        self.classes[class].shifted(self.season_shift[season])
    }
}

fn draw_curve(rng: &mut ChaCha8Rng) -> BandCurve {
    let rho_min = rng.gen_range(0.02..0.35);
    let t_g = rng.gen_range(70.0..170.0);
    BandCurve {
        rho_min,
        rho_max: rho_min + rng.gen_range(0.03..0.45),
        t_g,
        t_s: t_g + rng.gen_range(60.0..150.0),
        a: rng.gen_range(0.05..0.2),
        b: rng.gen_range(0.05..0.2),
    }
}

/// Smallest over all days of the largest per-band difference.
pub fn min_separation(p: &PhenologyProfile, q: &PhenologyProfile) -> f64 {
    (1..=365)
        .map(|day| {
            let (a, b) = (reflectance(p, day as f64), reflectance(q, day as f64));
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Zipf-like class weights `1 / (k + 1)^s`.
pub fn class_weights(n_classes: usize, zipf: f64) -> Vec<f64> {
    (0..n_classes).map(|k| 1.0 / ((k + 1) as f64).powf(zipf)).collect()
}

/// Axis-aligned parcel rectangles `(y0, x0, h, w)` covering a `tile × tile`
/// map. A side is cut while it is at least `2·min_field` long.
pub fn parcels(tile: usize, min_field: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize, usize)>> {
    check_field(tile, min_field)?;
    let mut leaves = Vec::new();
    let mut stack = vec![(0, 0, tile, tile)];
    while let Some((y0, x0, h, w)) = stack.pop() {
        let horizontal = match (h >= 2 * min_field, w >= 2 * min_field) {
            (false, false) => {
                leaves.push((y0, x0, h, w));
                continue;
            }
            (true, true) => rng.gen_bool(h as f64 / (h + w) as f64),
            (sy, _) => sy,
        };
        if horizontal {
            let cut = rng.gen_range(min_field..=h - min_field);
            stack.push((y0 + cut, x0, h - cut, w));
            stack.push((y0, x0, cut, w));
        } else {
            let cut = rng.gen_range(min_field..=w - min_field);
            stack.push((y0, x0 + cut, h, w - cut));
            stack.push((y0, x0, h, cut));
        }
    }
    Ok(leaves)
}

/// Label map of [`parcels`], each parcel labeled by a draw from `weights`.
pub fn partition_fields(tile: usize, min_field: usize, weights: &[f64], rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let pick = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("class weights: {e}")))?;
    let mut labels = vec![0i16; tile * tile];
    for (y0, x0, h, w) in parcels(tile, min_field, rng)? {
        let class = pick.sample(rng) as i16;
        for y in y0..y0 + h {
            labels[y * tile + x0..y * tile + x0 + w].fill(class);
        }
    }
    LabelMap::new(tile, tile, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudEvent {
    WholeFrame,
    Rect { y0: usize, x0: usize, h: usize, w: usize },
}

/// At most one event per frame: a whole-frame cover with probability
/// `cloud_prob / 2`, otherwise a random rectangle with probability `cloud_prob`.
pub fn draw_cloud_events(tile: usize, cloud_prob: f64, rng: &mut ChaCha8Rng) -> Vec<CloudEvent> {
    if cloud_prob <= 0.0 {
        return Vec::new();
    }
    if rng.gen_bool(cloud_prob / 2.0) {
        return vec![CloudEvent::WholeFrame];
    }
    if !rng.gen_bool(cloud_prob) {
        return Vec::new();
    }
    let lo = (tile / 4).max(1);
    let h = rng.gen_range(lo..=tile);
    let w = rng.gen_range(lo..=tile);
    vec![CloudEvent::Rect { y0: rng.gen_range(0..=tile - h), x0: rng.gen_range(0..=tile - w), h, w }]
}

/// Overwrite the first `n_bands` channels of cloudy pixels of a `[h, w, d]`
/// frame with bright noisy reflectance. Returns the diagnostic cloud mask.
pub fn apply_clouds(frame: &mut Tensor, n_bands: usize, events: &[CloudEvent], rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let (h, w, d) = frame.dims3("apply_clouds")?;
    if n_bands > d {
        return Err(Error::shape("apply_clouds", format!("at most {d} bands"), n_bands));
    }
    let mut mask = vec![false; h * w];
    for e in events {
        match *e {
            CloudEvent::WholeFrame => mask.fill(true),
            CloudEvent::Rect { y0, x0, h: eh, w: ew } => {
                for y in y0..(y0 + eh).min(h) {
                    for x in x0..(x0 + ew).min(w) {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, CLOUD_SIGMA).expect("valid sigma");
    for (px, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for v in &mut frame.data_mut()[px * d..px * d + n_bands] {
            *v = CLOUD_REFLECTANCE + noise.sample(rng).clamp(-3.0 * CLOUD_SIGMA, 3.0 * CLOUD_SIGMA);
        }
    }
    Ok(mask)
}

/// Irregular observation days: one uniform draw per equal-width slot of the year.
fn observation_days(t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let slot = DAYS / t as f64;
    (0..t).map(|i| (1.0 + (i as f64 + rng.gen::<f64>()) * slot).floor().min(DAYS)).collect()
}

/// A generated sample together with generator-side diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: SequenceSample,
    pub season: usize,
    pub days: Vec<f64>,
    /// Per frame, per pixel; never part of the model input.
    pub cloud_masks: Vec<Vec<bool>>,
}

/// Generate one scene; a pure function of `spec` (including its seed).
pub fn generate_scene_full(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let catalogue = ClassCatalogue::new(spec.n_classes, spec.n_bands, spec.seasons);
    generate_with(spec, &catalogue)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SequenceSample> {
    generate_scene_full(spec).map(|s| s.sample)
}

fn generate_with(spec: &SceneSpec, catalogue: &ClassCatalogue) -> Result<Scene> {
    let mut rng = rng(spec.seed);
    let (tile, nb, d) = (spec.tile, spec.n_bands, spec.depth());
    let season = rng.gen_range(0..spec.seasons);
    let days = observation_days(spec.t, &mut rng);
    let observed = match spec.min_obs {
        Some(m) => rng.gen_range(m..=spec.t),
        None => spec.t,
    };
    let labels = partition_fields(tile, spec.min_field, &class_weights(spec.n_classes, spec.zipf), &mut rng)?;
    let year = if spec.seasons > 1 { season as f64 / (spec.seasons - 1) as f64 } else { 0.0 };
    let profiles: Vec<PhenologyProfile> = (0..spec.n_classes).map(|k| catalogue.profile(k, season)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut frames = Vec::with_capacity(spec.t);
    let mut cloud_masks = Vec::with_capacity(spec.t);
    for (i, &day) in days.iter().enumerate() {
        let mut frame = Tensor::zeros(&[tile, tile, d]);
        if i < observed {
            let spectra: Vec<Vec<f64>> = profiles.iter().map(|p| reflectance(p, day)).collect();
            for (px, row) in frame.data_mut().chunks_exact_mut(d).enumerate() {
                let class = labels.labels[px] as usize;
                for (v, &rho) in row[..nb].iter_mut().zip(&spectra[class]) {
                    *v = if spec.noise_sigma > 0.0 { rho + noise.sample(&mut rng) } else { rho };
                }
                row[nb] = day / DAYS;
                row[nb + 1] = year;
            }
            let events = draw_cloud_events(tile, spec.cloud_prob, &mut rng);
            cloud_masks.push(apply_clouds(&mut frame, nb, &events, &mut rng)?);
        } else {
            cloud_masks.push(vec![false; tile * tile]);
        }
        frames.push(frame);
    }
    let mut x = Tensor::stack(&frames)?;
    x.round_to_f32();
    let mask = (0..spec.t).map(|i| i < observed).collect();
    let sample = SequenceSample::new(x, mask, labels)?;
    Ok(Scene { sample, season, days, cloud_masks })
}

/// Exact split sizes for `n` samples at the given ratio; remainders go to
/// the earliest splits.
pub fn split_sizes(n: usize, ratio: [usize; 3]) -> Result<[usize; 3]> {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratio must not be all zero".into()));
    }
    let mut sizes = ratio.map(|r| n * r / total);
    let mut rest = n - sizes.iter().sum::<usize>();
    for (s, &r) in sizes.iter_mut().zip(&ratio) {
        if rest > 0 && r > 0 {
            *s += 1;
            rest -= 1;
        }
    }
    Ok(sizes)
}

/// `n` scenes with per-sample derived seeds and a shuffled exact split.
pub fn generate_dataset(spec: &SceneSpec, n: usize, ratio: [usize; 3]) -> Result<Dataset> {
    spec.validate()?;
    let catalogue = ClassCatalogue::new(spec.n_classes, spec.n_bands, spec.seasons);
    let sizes = split_sizes(n, ratio)?;
    let mut tags: Vec<Split> = Split::ALL.iter().zip(sizes).flat_map(|(&s, k)| std::iter::repeat(s).take(k)).collect();
    tags.shuffle(&mut rng(derive_seed(spec.seed, stream::SPLIT, 0)));
    let samples = tags
        .into_iter()
        .enumerate()
        .map(|(i, split)| {
            let s = SceneSpec { seed: derive_seed(spec.seed, stream::SCENE, i as u64), ..spec.clone() };
            generate_with(&s, &catalogue).map(|scene| DatasetSample { split, sample: scene.sample })
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = serde_json::json!({
        "spec": spec,
        "ratio": ratio,
        "bands": BAND_NAMES.iter().cycle().take(spec.n_bands).collect::<Vec<_>>(),
        "channels": "bands..., day_of_year / 365, year index / (seasons - 1)",
    });
    Dataset::new(spec.t, spec.tile, spec.tile, spec.depth(), spec.n_classes, samples, metadata)
}
