use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Training-time image augmentations over `H x W x C` inputs in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Augment {
    /// Mirror the width axis with probability 0.5.
    HorizontalFlip,
    /// Scale each channel by an independent factor in `[1 - s, 1 + s]`.
    ColorJitter { strength: f64 },
    /// Zero-pad every border by `padding`, then cut a random window.
    RandomCrop { height: usize, width: usize, padding: usize },
}

impl std::str::FromStr for Augment {
    type Err = Error;

    /// `flip`, `jitter:<strength>` or `crop:<size>:<padding>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Config(format!("malformed augmentation {s:?}")))
        };
        match parts[0] {
            "flip" => Ok(Augment::HorizontalFlip),
            "jitter" => Ok(Augment::ColorJitter { strength: num(1)? }),
            "crop" => {
                let size = num(1)? as usize;
                Ok(Augment::RandomCrop {
                    height: size,
                    width: size,
                    padding: num(2)? as usize,
                })
            }
            _ => Err(Error::Config(format!("unknown augmentation {s:?}"))),
        }
    }
}

fn check_image(input: &[f64], shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || shape.iter().product::<usize>() != input.len() {
        return shape_err(format!("augmentation needs an H x W x C image, got shape {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Mirrors the width axis.
pub fn flip_horizontal(input: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    let (h, w, c) = check_image(input, shape)?;
    let mut out = vec![0.0; input.len()];
    for i in 0..h {
        for j in 0..w {
            let src = (i * w + j) * c;
            let dst = (i * w + (w - 1 - j)) * c;
            out[dst..dst + c].copy_from_slice(&input[src..src + c]);
        }
    }
    Ok(out)
}

fn color_jitter<R: Rng + ?Sized>(input: &[f64], c: usize, strength: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("jitter strength must lie in [0, 1], got {strength}")));
    }
    if strength == 0.0 {
        return Ok(input.to_vec());
    }
    let factors: Vec<f64> = (0..c).map(|_| rng.random_range(1.0 - strength..=1.0 + strength)).collect();
    Ok(input
        .iter()
        .enumerate()
        .map(|(i, &x)| (x * factors[i % c]).clamp(0.0, 1.0))
        .collect())
}

fn random_crop<R: Rng + ?Sized>(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    (ch, cw, pad): (usize, usize, usize),
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if ch > ph || cw > pw || ch == 0 || cw == 0 {
        return Err(Error::Config(format!(
            "crop {ch}x{cw} does not fit the padded {ph}x{pw} input"
        )));
    }
    let top = rng.random_range(0..=ph - ch);
    let left = rng.random_range(0..=pw - cw);
    let mut out = vec![0.0; ch * cw * c];
    for i in 0..ch {
        let si = (top + i) as isize - pad as isize;
        if si < 0 || si >= h as isize {
            continue;
        }
        for j in 0..cw {
            let sj = (left + j) as isize - pad as isize;
            if sj < 0 || sj >= w as isize {
                continue;
            }
            let src = (si as usize * w + sj as usize) * c;
            let dst = (i * cw + j) * c;
            out[dst..dst + c].copy_from_slice(&input[src..src + c]);
        }
    }
    Ok(out)
}

/// Applies `ops` in order. A crop whose window differs from the input size
/// changes the item shape; callers normally crop back to the input size.
pub fn augment<R: Rng + ?Sized>(input: &[f64], shape: &[usize], ops: &[Augment], rng: &mut R) -> Result<Vec<f64>> {
    let (mut h, mut w, c) = check_image(input, shape)?;
    let mut cur = input.to_vec();
    for op in ops {
        cur = match *op {
            Augment::HorizontalFlip => {
                if rng.random_bool(0.5) {
                    flip_horizontal(&cur, &[h, w, c])?
                } else {
                    cur
                }
            }
            Augment::ColorJitter { strength } => color_jitter(&cur, c, strength, rng)?,
            Augment::RandomCrop { height, width, padding } => {
                let out = random_crop(&cur, (h, w, c), (height, width, padding), rng)?;
                h = height;
                w = width;
                out
            }
        };
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> (Vec<f64>, Vec<usize>) {
        let shape = vec![3, 4, 2];
        let data = (0..24).map(|i| i as f64 / 24.0).collect();
        (data, shape)
    }

    #[test]
    fn zero_jitter_is_identity() {
        let (x, s) = image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = augment(&x, &s, &[Augment::ColorJitter { strength: 0.0 }], &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn double_flip_is_identity() {
        let (x, s) = image();
        let once = flip_horizontal(&x, &s).unwrap();
        assert_ne!(once, x);
        assert_eq!(flip_horizontal(&once, &s).unwrap(), x);
    }

    #[test]
    fn full_window_crop_is_identity() {
        let (x, s) = image();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = Augment::RandomCrop { height: 3, width: 4, padding: 0 };
        assert_eq!(augment(&x, &s, &[op], &mut rng).unwrap(), x);
    }

    #[test]
    fn oversized_crop_is_a_config_error() {
        let (x, s) = image();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = Augment::RandomCrop { height: 6, width: 4, padding: 1 };
        assert!(matches!(augment(&x, &s, &[op], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn jitter_stays_in_range() {
        let (x, s) = image();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let y = augment(&x, &s, &[Augment::ColorJitter { strength: 0.9 }], &mut rng).unwrap();
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parses_flag_syntax() {
        assert_eq!("flip".parse::<Augment>().unwrap(), Augment::HorizontalFlip);
        assert_eq!(
            "crop:84:8".parse::<Augment>().unwrap(),
            Augment::RandomCrop { height: 84, width: 84, padding: 8 }
        );
        assert!("blur".parse::<Augment>().is_err());
    }
}
