//! Synthetic segmentation scenes: coloured rectangles and ellipses on a
//! background.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::encoder::{check_input_size, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::rng::SeedSource;
use crate::tensor::Tensor;

/// Class colours, also used for predicted-mask images. Class 0 is background.
pub const PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [128, 128, 128],
];

pub const NOISE_STD: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H x W` labels in `0..K`.
    pub mask: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn random(rng: &mut crate::rng::Rng, height: usize, width: usize) -> Shape {
        if rng.random::<bool>() {
            let h = rng.random_range(height / 4..=height / 2);
            let w = rng.random_range(width / 4..=width / 2);
            Shape::Rect {
                y0: rng.random_range(0..=height - h),
                x0: rng.random_range(0..=width - w),
                h,
                w,
            }
        } else {
            let ry = rng.random_range(height as f64 / 8.0..=height as f64 / 4.0);
            let rx = rng.random_range(width as f64 / 8.0..=width as f64 / 4.0);
            Shape::Ellipse {
                cy: rng.random_range(ry..=height as f64 - ry),
                cx: rng.random_range(rx..=width as f64 - rx),
                ry,
                rx,
            }
        }
    }
}

/// Validates the generator arguments shared by every split.
pub fn check_task(height: usize, width: usize, classes: usize) -> Result<()> {
    check_input_size(height, width)?;
    if classes < 2 || classes > PALETTE.len() {
        return Err(Error::config(format!(
            "synthetic task supports 2 to {} classes, got {classes}",
            PALETTE.len()
        )));
    }
    Ok(())
}

/// `n` scenes with `classes - 1` shapes of distinct classes each.
pub fn gen_synthetic_dataset(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    gen_split(n, height, width, classes, seed, "train")
}

/// Like [`gen_synthetic_dataset`], drawing from the stream family `split` so
/// that differently named splits never share scenes.
pub fn gen_split(n: usize, height: usize, width: usize, classes: usize, seed: u64, split: &str) -> Result<Vec<SyntheticSample>> {
    check_task(height, width, classes)?;
    let seeds = SeedSource::new(seed);
    Ok((0..n)
        .map(|i| gen_sample(&mut seeds.stream(&format!("{split}/{i}")), height, width, classes))
        .collect())
}

fn gen_sample(rng: &mut crate::rng::Rng, height: usize, width: usize, classes: usize) -> SyntheticSample {
    let min_pixels = height * width / 64;
    let mut mask = vec![0usize; height * width];
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut order: Vec<usize> = (1..classes).collect();
        order.shuffle(rng);
        mask.fill(0);
        for &class in &order {
            let shape = Shape::random(rng, height, width);
            for y in 0..height {
                for x in 0..width {
                    if shape.contains(y, x) {
                        mask[y * width + x] = class;
                    }
                }
            }
        }
        let mut counts = vec![0usize; classes];
        mask.iter().for_each(|&c| counts[c] += 1);
        if counts.iter().all(|&c| c >= min_pixels) {
            break;
        }
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let plane = height * width;
    let mut image = vec![0.0; IMAGE_CHANNELS * plane];
    for (p, &class) in mask.iter().enumerate() {
        for ch in 0..IMAGE_CHANNELS {
            let base = PALETTE[class][ch] as f64 / 255.0;
            image[ch * plane + p] = (base + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    SyntheticSample {
        image: Tensor::new(&[IMAGE_CHANNELS, height, width], image).expect("sized above"),
        mask,
    }
}

/// Stacks samples into `[B, 3, H, W]` images and row-major `[B, H, W]` labels.
pub fn stack<'a>(samples: impl IntoIterator<Item = &'a SyntheticSample>) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut b = 0;
    for s in samples {
        match &shape {
            Some(sh) if sh != s.image.shape() => {
                return Err(Error::Data(format!(
                    "cannot batch images of shape {sh:?} and {:?}",
                    s.image.shape()
                )))
            }
            Some(_) => {}
            None => shape = Some(s.image.shape().to_vec()),
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask);
        b += 1;
    }
    let shape = shape.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok((Tensor::new(&[b, shape[0], shape[1], shape[2]], data)?, labels))
}
