//! Procedural training images: one colored shape on a dark background.

use crate::error::{Error, Result};
use crate::model::{PromptSpec, ShapeToken, IMAGE_DIMS, IMAGE_SIZE};
use crate::tensor::{DenseArray, SeededRng};

/// `n` images in `[0,1]`, class `i mod 9` for the `i`-th image.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<(DenseArray, PromptSpec)>> {
    if n == 0 {
        return Err(Error::Domain("dataset size must be positive".into()));
    }
    let prompts = PromptSpec::all();
    let root = SeededRng::new(seed).derive(&[0xda7a]);
    (0..n)
        .map(|i| {
            let prompt = prompts[i % prompts.len()];
            let mut rng = root.derive(&[i as u64]);
            Ok((render(&prompt, &mut rng)?, prompt))
        })
        .collect()
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub(crate) fn render(prompt: &PromptSpec, rng: &mut SeededRng) -> Result<DenseArray> {
    let background = uniform(rng, 0.0, 0.1) as f32;
    let intensity = uniform(rng, 0.75, 1.0) as f32;
    let size = IMAGE_SIZE as f64;
    // (half extent, shape test on offsets from the center)
    let (extent, inside): (f64, Box<dyn Fn(f64, f64) -> bool>) = match prompt.shape {
        ShapeToken::Circle => {
            let r = uniform(rng, 3.0, 5.5);
            (r, Box::new(move |dx, dy| dx * dx + dy * dy <= r * r))
        }
        ShapeToken::Square => {
            let h = uniform(rng, 2.5, 5.0);
            (h, Box::new(move |dx: f64, dy: f64| dx.abs() <= h && dy.abs() <= h))
        }
        ShapeToken::Cross => {
            let len = uniform(rng, 4.0, 6.5);
            let w = uniform(rng, 1.0, 1.6);
            (
                len,
                Box::new(move |dx: f64, dy: f64| {
                    (dx.abs() <= w && dy.abs() <= len) || (dy.abs() <= w && dx.abs() <= len)
                }),
            )
        }
    };
    let cx = uniform(rng, extent, size - extent);
    let cy = uniform(rng, extent, size - extent);
    let rgb = prompt.color.rgb();
    let mut img = DenseArray::filled(&IMAGE_DIMS, background)?;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            if inside(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                for (c, &k) in rgb.iter().enumerate() {
                    img.data_mut()[c * plane + y * IMAGE_SIZE + x] = background.max(k * intensity);
                }
            }
        }
    }
    Ok(img)
}
