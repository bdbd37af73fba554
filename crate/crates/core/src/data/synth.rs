use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabeledSample, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::tensor::Tensor;

/// Knobs of the planted-signal generator.
///
/// Each subject has a latent score `u ~ U(−1, 1)` and is positive when `u`
/// lies in the top `positive_fraction` of that range. The lateral view
/// carries a vertical intensity ramp running up or down; the frontal view
/// carries a broad blob whose signed intensity is `u` times the ramp
/// direction. The blob therefore tracks the label only once the ramp
/// direction is known. Ramps point up more often for positives, which leaves
/// each view on its own weakly informative.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub positive_fraction: f64,
    pub blob_amplitude: f64,
    /// Blob standard deviation as a fraction of the image height.
    pub blob_sigma: f64,
    pub ramp_amplitude: f64,
    /// Probability that a positive subject's ramp points up.
    pub ramp_up_positive: f64,
    /// Probability that a negative subject's ramp points up.
    pub ramp_up_negative: f64,
    pub texture: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            positive_fraction: 0.3,
            blob_amplitude: 0.4,
            blob_sigma: 1.0,
            ramp_amplitude: 0.5,
            ramp_up_positive: 0.7,
            ramp_up_negative: 0.5,
            texture: 0.05,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    /// The same generator at another image size.
    pub fn with_size(height: usize, width: usize) -> Self {
        SynthConfig {
            height,
            width,
            ..SynthConfig::default()
        }
    }
}

pub const MIN_SUBJECTS: usize = 10;

/// Sizes of the train, validation and test splits for `n` subjects.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    [train, val, n - train - val]
}

/// Smooth background: a few random low-frequency plane waves.
fn texture<R: Rng>(h: usize, w: usize, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let fy = rng.random_range(0.5..3.0) / h as f64;
            let fx = rng.random_range(0.5..3.0) / w as f64;
            (fy, fx, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = waves
                .iter()
                .map(|&(fy, fx, ph)| (std::f64::consts::TAU * (fy * r as f64 + fx * c as f64) + ph).sin())
                .sum::<f64>()
                * amplitude
                / 3.0;
        }
    }
    out
}

fn finish<R: Rng>(mut pixels: Vec<f64>, h: usize, w: usize, noise: f64, rng: &mut R) -> Tensor<f32> {
    let normal = Normal::new(0.0, noise).expect("noise is a finite standard deviation");
    for p in &mut pixels {
        *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(&[h, w], pixels.into_iter().map(|v| v as f32).collect()).expect("h×w pixels")
}

fn subject(config: &SynthConfig, label: bool, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let (h, w) = (config.height, config.width);
    let up = if label { config.ramp_up_positive } else { config.ramp_up_negative };
    let ramp_sign: f64 = if rng.random_bool(up) { 1.0 } else { -1.0 };
    let tau = 1.0 - 2.0 * config.positive_fraction;
    let latent = if label {
        rng.random_range(tau..=1.0)
    } else if tau > -1.0 {
        rng.random_range(-1.0..tau)
    } else {
        -1.0
    };

    let mut u = texture(h, w, config.texture, rng);
    let amp = config.blob_amplitude * latent * ramp_sign;
    let cy = h as f64 * rng.random_range(0.35..0.65);
    let cx = w as f64 * rng.random_range(0.35..0.65);
    let sigma = config.blob_sigma * h as f64;
    for r in 0..h {
        for c in 0..w {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            u[r * w + c] += 0.5 + amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }

    let mut v = texture(h, w, config.texture, rng);
    for r in 0..h {
        let t = if h > 1 { r as f64 / (h - 1) as f64 - 0.5 } else { 0.0 };
        for c in 0..w {
            v[r * w + c] += 0.5 + ramp_sign * config.ramp_amplitude * t;
        }
    }
    (finish(u, h, w, config.noise, rng), finish(v, h, w, config.noise, rng))
}

/// Deterministic two-view dataset with a stratified 70/10/20 subject split.
/// Exactly `round(positive_fraction · n)` subjects are positive. Subject `i`
/// draws from its own stream of the seeded generator.
pub fn synth_dataset(seed: u64, n: usize, config: &SynthConfig) -> Result<Dataset> {
    if n < MIN_SUBJECTS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SUBJECTS} subjects, got {n}"
        )));
    }
    for (name, p) in [
        ("positive_fraction", config.positive_fraction),
        ("ramp_up_positive", config.ramp_up_positive),
        ("ramp_up_negative", config.ramp_up_negative),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (config.positive_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![false; n];
    for &i in &order[..positives] {
        labels[i] = true;
    }

    let samples: Vec<LabeledSample> = (0..n)
        .map(|i| {
            let mut sub = ChaCha8Rng::seed_from_u64(seed);
            sub.set_stream(i as u64 + 1);
            let (frontal, lateral) = subject(config, labels[i], &mut sub);
            LabeledSample {
                frontal,
                lateral,
                label: labels[i],
                subject_id: format!("S{i:05}"),
            }
        })
        .collect();

    let sizes = split_sizes(n);
    let mut pos_ids: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut neg_ids: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    pos_ids.shuffle(&mut rng);
    neg_ids.shuffle(&mut rng);
    let mut manifest = SplitManifest::default();
    let (mut pi, mut ni) = (0, 0);
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let (pos_left, neg_left) = (pos_ids.len() - pi, neg_ids.len() - ni);
        let (want_pos, want_neg) = if split == Split::Test {
            (pos_left, neg_left)
        } else {
            let p = ((sizes[k] * positives) as f64 / n as f64).round() as usize;
            let q = (sizes[k] - p.min(pos_left)).min(neg_left);
            (sizes[k] - q, q)
        };
        let ids = manifest.ids_mut(split);
        ids.extend(pos_ids[pi..pi + want_pos].iter().map(|&i| samples[i].subject_id.clone()));
        ids.extend(neg_ids[ni..ni + want_neg].iter().map(|&i| samples[i].subject_id.clone()));
        ids.sort();
        pi += want_pos;
        ni += want_neg;
    }
    Ok(Dataset { samples, manifest })
}

fn mean_of(img: &Tensor<f32>, rows: std::ops::Range<usize>) -> f64 {
    let (_, w) = img.dims2().expect("two-dimensional");
    let d = &img.data()[rows.start * w..rows.end * w];
    d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
}

/// AUROC of the pixel mean of one view taken as a score, folded so that a
/// reversed ranking counts as informative too.
pub fn pixel_mean_auroc(samples: &[&LabeledSample], frontal: bool) -> Result<f64> {
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| {
            let img = if frontal { &s.frontal } else { &s.lateral };
            mean_of(img, 0..img.shape()[0])
        })
        .collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let a = auroc(&scores, &labels)?;
    Ok(a.max(1.0 - a))
}

/// AUROC of a hand-built rule that knows the generator: blob polarity from
/// centre-minus-border contrast of the frontal view times ramp direction from
/// bottom-minus-top of the lateral view.
pub fn two_view_oracle_auroc(samples: &[&LabeledSample]) -> Result<f64> {
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| {
            let (h, w) = s.frontal.dims2().expect("two-dimensional");
            let d = s.frontal.data();
            let (mut centre, mut nc, mut border, mut nb) = (0.0, 0, 0.0, 0);
            for r in 0..h {
                for c in 0..w {
                    let inner = r >= h / 4 && r < 3 * h / 4 && c >= w / 4 && c < 3 * w / 4;
                    if inner {
                        centre += d[r * w + c] as f64;
                        nc += 1;
                    } else {
                        border += d[r * w + c] as f64;
                        nb += 1;
                    }
                }
            }
            let polarity = centre / nc as f64 - border / nb.max(1) as f64;
            let hl = s.lateral.shape()[0];
            let ramp = mean_of(&s.lateral, hl / 2..hl) - mean_of(&s.lateral, 0..hl / 2);
            polarity * ramp
        })
        .collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    auroc(&scores, &labels)
}
