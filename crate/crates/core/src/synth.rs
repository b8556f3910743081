//! Synthetic long-tailed compositional triplet videos.
//!
//! A label space of valid (instrument, verb, target) triplets is sampled
//! once, per-class frequencies follow a rescaled power law, and each video
//! is a Markov chain over small sets of concurrently active triplets. Frame
//! features are noisy means of per-class cluster centers, so head classes
//! are easy to learn and tail classes are learnable but slow. All features
//! are quantized through f32 at generation time because that is the wire
//! format; serialization is bit-exact.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Shape of the compositional label space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabelSpaceConfig {
    pub n_instruments: usize,
    pub n_verbs: usize,
    pub n_targets: usize,
    pub n_triplets: usize,
}

impl Default for LabelSpaceConfig {
    fn default() -> Self {
        Self {
            n_instruments: 6,
            n_verbs: 10,
            n_targets: 15,
            n_triplets: 100,
        }
    }
}

/// The sampled set of valid triplets with component lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSpace {
    pub n_instruments: usize,
    pub n_verbs: usize,
    pub n_targets: usize,
    /// Distinct `(instrument, verb, target)` tuples; every component value
    /// appears in at least one tuple.
    pub triplets: Vec<(usize, usize, usize)>,
}

impl LabelSpace {
    /// Sample `n_triplets` distinct cells of the component grid, then repair
    /// coverage so every instrument, verb, and target appears somewhere.
    pub fn build(cfg: &LabelSpaceConfig, seed: u64) -> Result<Self> {
        let grid = cfg.n_instruments * cfg.n_verbs * cfg.n_targets;
        if cfg.n_triplets > grid {
            return Err(Error::Config(format!(
                "cannot sample {} distinct triplets from a {grid}-cell grid",
                cfg.n_triplets
            )));
        }
        if cfg.n_triplets < cfg.n_instruments.max(cfg.n_verbs).max(cfg.n_targets) {
            return Err(Error::Config(
                "too few triplets to cover every component value".into(),
            ));
        }
        let mut rng = rng_for(seed, "label-space");
        let mut cells: Vec<(usize, usize, usize)> = (0..cfg.n_instruments)
            .flat_map(|i| {
                (0..cfg.n_verbs).flat_map(move |v| (0..cfg.n_targets).map(move |t| (i, v, t)))
            })
            .collect();
        cells.shuffle(&mut rng);
        let mut chosen: Vec<(usize, usize, usize)> = cells[..cfg.n_triplets].to_vec();

        // Coverage repair: swap redundant tuples for ones hitting missing values.
        loop {
            let mut count_i = vec![0usize; cfg.n_instruments];
            let mut count_v = vec![0usize; cfg.n_verbs];
            let mut count_t = vec![0usize; cfg.n_targets];
            for &(i, v, t) in &chosen {
                count_i[i] += 1;
                count_v[v] += 1;
                count_t[t] += 1;
            }
            let missing_i = count_i.iter().position(|&c| c == 0);
            let missing_v = count_v.iter().position(|&c| c == 0);
            let missing_t = count_t.iter().position(|&c| c == 0);
            if missing_i.is_none() && missing_v.is_none() && missing_t.is_none() {
                break;
            }
            let victim = chosen
                .iter()
                .position(|&(i, v, t)| count_i[i] >= 2 && count_v[v] >= 2 && count_t[t] >= 2)
                .ok_or_else(|| {
                    Error::Config("coverage repair impossible for this configuration".into())
                })?;
            let taken: HashSet<(usize, usize, usize)> = chosen.iter().cloned().collect();
            let i_new = missing_i.unwrap_or_else(|| rng.random_range(0..cfg.n_instruments));
            let v_new = missing_v.unwrap_or_else(|| rng.random_range(0..cfg.n_verbs));
            let mut replacement = None;
            for _ in 0..10_000 {
                let t_new = missing_t.unwrap_or_else(|| rng.random_range(0..cfg.n_targets));
                let cand = (i_new, v_new, t_new);
                if !taken.contains(&cand) {
                    replacement = Some(cand);
                    break;
                }
            }
            let Some(cand) = replacement else {
                return Err(Error::Config(
                    "coverage repair could not find a free cell".into(),
                ));
            };
            chosen[victim] = cand;
        }
        Ok(Self {
            n_instruments: cfg.n_instruments,
            n_verbs: cfg.n_verbs,
            n_targets: cfg.n_targets,
            triplets: chosen,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn components(&self, class: usize) -> (usize, usize, usize) {
        self.triplets[class]
    }
}

/// Power-law class-count profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerLawConfig {
    /// Decay exponent `s >= 0`; rank-r weight is `(r+1)^-s` before rescaling.
    pub exponent: f64,
    pub n_max: u64,
    pub n_min: u64,
}

/// Rank-ordered class counts: `(r+1)^-s`, affinely rescaled so rank 0 hits
/// `n_max` and the last rank hits `n_min` exactly. Non-increasing in rank.
pub fn sample_class_counts(cfg: &PowerLawConfig, g: usize) -> Result<Vec<u64>> {
    if g < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if cfg.n_max < cfg.n_min || cfg.n_min < 1 {
        return Err(Error::Config(format!(
            "invalid count bounds [{}, {}]",
            cfg.n_min, cfg.n_max
        )));
    }
    if cfg.exponent < 0.0 {
        return Err(Error::Config("power-law exponent must be >= 0".into()));
    }
    if cfg.exponent == 0.0 {
        if cfg.n_max != cfg.n_min {
            return Err(Error::Config(
                "exponent 0 is the uniform limit and needs n_max == n_min".into(),
            ));
        }
        return Ok(vec![cfg.n_max; g]);
    }
    let raw: Vec<f64> = (0..g)
        .map(|r| ((r + 1) as f64).powf(-cfg.exponent))
        .collect();
    let (hi, lo) = (raw[0], raw[g - 1]);
    let span = (cfg.n_max - cfg.n_min) as f64;
    Ok(raw
        .iter()
        .map(|&w| (cfg.n_min as f64 + span * (w - lo) / (hi - lo)).round() as u64)
        .collect())
}

/// Class sampler plus the fixed cluster geometry shared by all videos.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    pub space: LabelSpace,
    pub counts: Vec<u64>,
    /// Per-class feature-space cluster centers, unit scale, fixed by seed.
    pub centers: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
}

impl TripletSampler {
    pub fn new(space: LabelSpace, counts: Vec<u64>, feature_dim: usize, seed: u64) -> Result<Self> {
        if counts.len() != space.len() {
            return Err(Error::Shape(format!(
                "{} counts for {} classes",
                counts.len(),
                space.len()
            )));
        }
        let mut rng = rng_for(seed, "cluster-centers");
        let centers: Vec<Vec<f64>> = (0..space.len())
            .map(|_| {
                (0..feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut acc = 0.0;
        for &c in &counts {
            acc += c as f64;
            cumulative.push(acc);
        }
        Ok(Self {
            space,
            counts,
            centers,
            cumulative,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn draw_class(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("nonempty counts");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u)
    }

    /// Count-weighted draw of `m` distinct classes.
    fn draw_active_set(&self, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut set = Vec::with_capacity(m);
        while set.len() < m {
            let g = self.draw_class(rng);
            if !set.contains(&g) {
                set.push(g);
            }
        }
        set.sort_unstable();
        set
    }
}

/// One generated video: frame features and per-task binary label matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub features: Tensor,
    pub labels_i: Tensor,
    pub labels_v: Tensor,
    pub labels_t: Tensor,
    pub labels_ivt: Tensor,
    pub seed: u64,
}

impl SyntheticVideo {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generate one video: active triplet sets persist with probability
/// `p_stay`, otherwise 1 to 3 triplets are redrawn count-weighted; the frame
/// feature is the mean of the active cluster centers plus isotropic noise.
pub fn generate_video(
    sampler: &TripletSampler,
    frames: usize,
    p_stay: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticVideo> {
    if frames == 0 {
        return Err(Error::Config("video needs at least one frame".into()));
    }
    if !(0.0..1.0).contains(&p_stay) {
        return Err(Error::Config(format!("p_stay {p_stay} not in [0,1)")));
    }
    let space = &sampler.space;
    let dim = sampler.feature_dim();
    let mut rng = rng_for(seed, "video");
    let mut features = Tensor::zeros(&[frames, dim]);
    let mut labels_i = Tensor::zeros(&[frames, space.n_instruments]);
    let mut labels_v = Tensor::zeros(&[frames, space.n_verbs]);
    let mut labels_t = Tensor::zeros(&[frames, space.n_targets]);
    let mut labels_ivt = Tensor::zeros(&[frames, space.len()]);
    let mut active: Vec<usize> = Vec::new();
    for f in 0..frames {
        let stay = !active.is_empty() && rng.random::<f64>() < p_stay;
        if !stay {
            let m = rng.random_range(1..=3usize);
            active = sampler.draw_active_set(m, &mut rng);
        }
        let row = features.row_mut(f);
        for &g in &active {
            for (x, c) in row.iter_mut().zip(&sampler.centers[g]) {
                *x += c / active.len() as f64;
            }
        }
        for x in row.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = quantize_f32(*x + noise_sigma * noise);
        }
        for &g in &active {
            let (i, v, t) = space.components(g);
            labels_ivt.set(f, g, 1.0);
            labels_i.set(f, i, 1.0);
            labels_v.set(f, v, 1.0);
            labels_t.set(f, t, 1.0);
        }
    }
    Ok(SyntheticVideo {
        features,
        labels_i,
        labels_v,
        labels_t,
        labels_ivt,
        seed,
    })
}

/// Full dataset generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub label_space: LabelSpaceConfig,
    pub power_law: PowerLawConfig,
    pub videos_train: usize,
    pub videos_test: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub p_stay: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            label_space: LabelSpaceConfig::default(),
            power_law: PowerLawConfig {
                exponent: 1.5,
                n_max: 4000,
                n_min: 8,
            },
            videos_train: 20,
            videos_test: 8,
            frames: 64,
            feature_dim: 32,
            p_stay: 0.9,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

/// A generated dataset split into train and test videos.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub space: LabelSpace,
    /// The power-law profile the sampler draws from.
    pub target_counts: Vec<u64>,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

impl Dataset {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        let space = LabelSpace::build(&config.label_space, config.seed)?;
        let target_counts = sample_class_counts(&config.power_law, space.len())?;
        let sampler = TripletSampler::new(
            space.clone(),
            target_counts.clone(),
            config.feature_dim,
            config.seed,
        )?;
        let gen_split = |offset: u64, n: usize| -> Result<Vec<SyntheticVideo>> {
            (0..n)
                .map(|v| {
                    generate_video(
                        &sampler,
                        config.frames,
                        config.p_stay,
                        config.noise_sigma,
                        config.seed ^ (offset + v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    )
                })
                .collect()
        };
        let train = gen_split(1, config.videos_train)?;
        let test = gen_split(1_000_001, config.videos_test)?;
        Ok(Self {
            config: config.clone(),
            space,
            target_counts,
            train,
            test,
        })
    }

    /// Realized per-class positive counts over the training split.
    pub fn train_class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.space.len()];
        for video in &self.train {
            for f in 0..video.frames() {
                for (g, count) in counts.iter_mut().enumerate() {
                    if video.labels_ivt.at(f, g) == 1.0 {
                        *count += 1;
                    }
                }
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Serialization: manifest.json + features.bin (LE f32) + labels.bin (packed
// bit rows per task).
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VideoRecord {
    id: String,
    split: String,
    frames: usize,
    seed: u64,
    feature_offset: usize,
    feature_bytes: usize,
    label_offset: usize,
    label_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: DataConfig,
    label_space: LabelSpace,
    target_counts: Vec<u64>,
    train_class_counts: Vec<u64>,
    videos: Vec<VideoRecord>,
}

fn pack_bits(labels: &Tensor) -> Vec<u8> {
    let (rows, cols) = (labels.rows(), labels.cols());
    let stride = cols.div_ceil(8);
    let mut out = vec![0u8; rows * stride];
    for r in 0..rows {
        for c in 0..cols {
            if labels.at(r, c) == 1.0 {
                out[r * stride + c / 8] |= 1 << (c % 8);
            }
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], rows: usize, cols: usize) -> Tensor {
    let stride = cols.div_ceil(8);
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            if bytes[r * stride + c / 8] & (1 << (c % 8)) != 0 {
                out.set(r, c, 1.0);
            }
        }
    }
    out
}

fn label_block(video: &SyntheticVideo) -> Vec<u8> {
    let mut block = Vec::new();
    for labels in [
        &video.labels_i,
        &video.labels_v,
        &video.labels_t,
        &video.labels_ivt,
    ] {
        block.extend_from_slice(&pack_bits(labels));
    }
    block
}

/// Write `manifest.json`, `features.bin`, and `labels.bin` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut videos = Vec::new();
    let splits = [("train", &dataset.train), ("test", &dataset.test)];
    for (split, list) in splits {
        for (v, video) in list.iter().enumerate() {
            let feature_offset = features.len();
            for &x in video.features.data() {
                features.extend_from_slice(&(x as f32).to_le_bytes());
            }
            let label_offset = labels.len();
            let block = label_block(video);
            labels.extend_from_slice(&block);
            videos.push(VideoRecord {
                id: format!("{split}-{v:03}"),
                split: split.to_string(),
                frames: video.frames(),
                seed: video.seed,
                feature_offset,
                feature_bytes: features.len() - feature_offset,
                label_offset,
                label_bytes: block.len(),
            });
        }
    }
    let manifest = Manifest {
        config: dataset.config.clone(),
        label_space: dataset.space.clone(),
        target_counts: dataset.target_counts.clone(),
        train_class_counts: dataset.train_class_counts(),
        videos,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut f = std::fs::File::create(dir.join("features.bin"))?;
    f.write_all(&features)?;
    let mut f = std::fs::File::create(dir.join("labels.bin"))?;
    f.write_all(&labels)?;
    Ok(())
}

/// Load a dataset directory; the inverse of [`save_dataset`], bit-exact.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut features = Vec::new();
    std::fs::File::open(dir.join("features.bin"))?.read_to_end(&mut features)?;
    let mut labels = Vec::new();
    std::fs::File::open(dir.join("labels.bin"))?.read_to_end(&mut labels)?;
    let space = &manifest.label_space;
    let dim = manifest.config.feature_dim;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in &manifest.videos {
        let want_feat = record.frames * dim * 4;
        if record.feature_bytes != want_feat
            || record.feature_offset + want_feat > features.len()
        {
            return Err(Error::Format(format!(
                "feature blob truncated or mis-sized for video '{}'",
                record.id
            )));
        }
        let feat_bytes = &features[record.feature_offset..record.feature_offset + want_feat];
        let data: Vec<f64> = feat_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let feats = Tensor::new(vec![record.frames, dim], data)?;

        let widths = [
            space.n_instruments,
            space.n_verbs,
            space.n_targets,
            space.len(),
        ];
        let want_label: usize = widths
            .iter()
            .map(|w| record.frames * w.div_ceil(8))
            .sum();
        if record.label_bytes != want_label || record.label_offset + want_label > labels.len() {
            return Err(Error::Format(format!(
                "label blob truncated or mis-sized for video '{}'",
                record.id
            )));
        }
        let mut cursor = record.label_offset;
        let mut tensors = Vec::with_capacity(4);
        for w in widths {
            let bytes = record.frames * w.div_ceil(8);
            tensors.push(unpack_bits(&labels[cursor..cursor + bytes], record.frames, w));
            cursor += bytes;
        }
        let video = SyntheticVideo {
            features: feats,
            labels_ivt: tensors.pop().expect("four label blocks"),
            labels_t: tensors.pop().expect("four label blocks"),
            labels_v: tensors.pop().expect("four label blocks"),
            labels_i: tensors.pop().expect("four label blocks"),
            seed: record.seed,
        };
        match record.split.as_str() {
            "train" => train.push(video),
            "test" => test.push(video),
            other => {
                return Err(Error::Format(format!(
                    "unknown split '{other}' for video '{}'",
                    record.id
                )))
            }
        }
    }
    Ok(Dataset {
        config: manifest.config,
        space: manifest.label_space,
        target_counts: manifest.target_counts,
        train,
        test,
    })
}
