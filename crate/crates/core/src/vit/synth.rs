//! Procedural training images: seeded compositions of colored shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Stripes { y0: f32, x0: f32, y1: f32, x1: f32, period: f32, vertical: bool },
    Checker { y0: f32, x0: f32, y1: f32, x1: f32, cell: f32 },
}

impl Shape {
    fn random<R: Rng + ?Sized>(rng: &mut R, res: f32) -> Shape {
        let rect = |rng: &mut R| {
            let (a, b) = (rng.random_range(0.0..res), rng.random_range(0.0..res));
            let (c, d) = (rng.random_range(0.0..res), rng.random_range(0.0..res));
            (a.min(b), c.min(d), a.max(b) + 4.0, c.max(d) + 4.0)
        };
        match rng.random_range(0..4) {
            0 => Shape::Disc {
                cy: rng.random_range(0.0..res),
                cx: rng.random_range(0.0..res),
                r: rng.random_range(res * 0.08..res * 0.35),
            },
            1 => {
                let (y0, x0, y1, x1) = rect(rng);
                Shape::Rect { y0, x0, y1, x1 }
            }
            2 => {
                let (y0, x0, y1, x1) = rect(rng);
                Shape::Stripes {
                    y0,
                    x0,
                    y1,
                    x1,
                    period: rng.random_range(2.0..8.0),
                    vertical: rng.random(),
                }
            }
            _ => {
                let (y0, x0, y1, x1) = rect(rng);
                Shape::Checker {
                    y0,
                    x0,
                    y1,
                    x1,
                    cell: rng.random_range(1.5..6.0),
                }
            }
        }
    }

    /// Coverage of pixel center `(y, x)`; `None` outside, `Some(alt)` inside
    /// where `alt` selects the secondary color of patterned shapes.
    fn cover(&self, y: f32, x: f32) -> Option<bool> {
        let inside = |y0: f32, x0: f32, y1: f32, x1: f32| y >= y0 && y < y1 && x >= x0 && x < x1;
        match *self {
            Shape::Disc { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2) <= r * r).then_some(false),
            Shape::Rect { y0, x0, y1, x1 } => inside(y0, x0, y1, x1).then_some(false),
            Shape::Stripes { y0, x0, y1, x1, period, vertical } => inside(y0, x0, y1, x1).then(|| {
                let t = if vertical { x } else { y };
                (t / period).floor() as i64 % 2 == 0
            }),
            Shape::Checker { y0, x0, y1, x1, cell } => inside(y0, x0, y1, x1)
                .then(|| ((y / cell).floor() as i64 + (x / cell).floor() as i64) % 2 == 0),
        }
    }
}

pub fn synthetic_image<R: Rng + ?Sized>(res: usize, rng: &mut R) -> Image {
    let (top, bottom) = (color(rng), color(rng));
    let shapes: Vec<(Shape, [f32; 3], [f32; 3])> = (0..rng.random_range(3..7))
        .map(|_| (Shape::random(rng, res as f32), color(rng), color(rng)))
        .collect();
    let denom = res.saturating_sub(1).max(1) as f32;
    let mut img = Image::from_fn(res, res, |y, _, c| {
        let t = y as f32 / denom;
        top[c] * (1.0 - t) + bottom[c] * t
    });
    for y in 0..res {
        for x in 0..res {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            for (shape, main, alt) in &shapes {
                if let Some(second) = shape.cover(py, px) {
                    let col = if second { alt } else { main };
                    for (c, v) in col.iter().enumerate() {
                        img.set(y, x, c, *v);
                    }
                }
            }
        }
    }
    img
}

pub fn synthetic_dataset(count: usize, res: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(res, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_seeded_and_in_range() {
        let a = synthetic_dataset(4, 32, 9);
        assert_eq!(a, synthetic_dataset(4, 32, 9));
        assert_ne!(a, synthetic_dataset(4, 32, 10));
        for img in &a {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
