use ndarray::ArrayViewMut1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result, SiteDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    /// Multiply by a scale below one.
    IntensityDown(f64),
    /// Multiply by a scale above one, then clamp.
    IntensityUp(f64),
    /// Blur with a Gaussian of this standard deviation in pixels.
    GaussianBlur(f64),
    /// Each pixel becomes 0 or 1 with this total probability.
    SaltPepper(f64),
}

impl ShiftKind {
    pub fn tag(&self) -> u8 {
        match self {
            ShiftKind::None => 0,
            ShiftKind::IntensityDown(_) => 1,
            ShiftKind::IntensityUp(_) => 2,
            ShiftKind::GaussianBlur(_) => 3,
            ShiftKind::SaltPepper(_) => 4,
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            ShiftKind::None => 0.0,
            ShiftKind::IntensityDown(v)
            | ShiftKind::IntensityUp(v)
            | ShiftKind::GaussianBlur(v)
            | ShiftKind::SaltPepper(v) => v,
        }
    }

    pub fn from_tag(tag: u8, param: f64) -> Option<Self> {
        Some(match tag {
            0 => ShiftKind::None,
            1 => ShiftKind::IntensityDown(param),
            2 => ShiftKind::IntensityUp(param),
            3 => ShiftKind::GaussianBlur(param),
            4 => ShiftKind::SaltPepper(param),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::IntensityDown(_) => "intensity_down",
            ShiftKind::IntensityUp(_) => "intensity_up",
            ShiftKind::GaussianBlur(_) => "gaussian_blur",
            ShiftKind::SaltPepper(_) => "salt_pepper",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvalidShift(msg));
        match *self {
            ShiftKind::None => Ok(()),
            ShiftKind::IntensityDown(s) if !(s > 0.0 && s < 1.0) => bad(format!("intensity_down scale {s}")),
            ShiftKind::IntensityUp(s) if !(s > 1.0 && s.is_finite()) => bad(format!("intensity_up scale {s}")),
            ShiftKind::GaussianBlur(sigma) if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("blur sigma {sigma}"))
            }
            ShiftKind::SaltPepper(p) if !(0.0..=1.0).contains(&p) => bad(format!("salt-pepper probability {p}")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self { kind: ShiftKind::None, seed: 0 }
    }

    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Applies `shift` to every split of an unshifted dataset.
pub fn apply_shift(ds: &SiteDataset, shift: ShiftSpec) -> Result<SiteDataset> {
    if ds.shift.kind != ShiftKind::None {
        return Err(DataError::AlreadyShifted(ds.shift.kind));
    }
    shift.kind.validate()?;
    let mut out = ds.clone();
    out.shift = shift;
    let width = ds.width;
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    for split in out.splits_mut() {
        for mut row in split.inputs.rows_mut() {
            match shift.kind {
                ShiftKind::None => {}
                ShiftKind::IntensityDown(s) | ShiftKind::IntensityUp(s) => {
                    row.mapv_inplace(|v| (v * s).clamp(0.0, 1.0));
                }
                ShiftKind::GaussianBlur(sigma) => gaussian_blur(row.view_mut(), width, sigma),
                ShiftKind::SaltPepper(p) => salt_pepper(row.view_mut(), p, &mut rng),
            }
        }
    }
    Ok(out)
}

fn salt_pepper(mut image: ArrayViewMut1<f64>, p: f64, rng: &mut ChaCha8Rng) {
    for v in image.iter_mut() {
        let u: f64 = rng.random();
        if u < p / 2.0 {
            *v = 0.0;
        } else if u < p {
            *v = 1.0;
        }
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur of a square `width` x `width` image stored
/// row-major, with reflect padding.
pub fn gaussian_blur(mut image: ArrayViewMut1<f64>, width: usize, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let k = kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let src: Vec<f64> = image.iter().copied().collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..width {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * src[y * width + reflect(x as isize + j as isize - radius, width)])
                .sum();
        }
    }
    for y in 0..width {
        for x in 0..width {
            image[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - radius, width) * width + x])
                .sum();
        }
    }
}
