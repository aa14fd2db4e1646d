//! Shape rasterization. Membership tests use integer arithmetic only, so a
//! mask is a pure function of the drawn parameters — no trig, no rounding,
//! nothing platform-dependent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ShapeClass;

/// Rasterize one randomly-parameterized shape into a boolean mask.
pub(crate) fn rasterize(class: ShapeClass, size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as i64;
    match class {
        ShapeClass::Circle => {
            let r = rng.gen_range(3..=5) as i64;
            let cx = rng.gen_range(r + 1..s - 1 - r);
            let cy = rng.gen_range(r + 1..s - 1 - r);
            grid(size, |x, y| (x - cx).pow(2) + (y - cy).pow(2) <= r * r)
        }
        ShapeClass::Square => {
            let half = rng.gen_range(2..=4) as i64;
            let cx = rng.gen_range(half + 1..s - 1 - half);
            let cy = rng.gen_range(half + 1..s - 1 - half);
            grid(size, |x, y| (x - cx).abs() <= half && (y - cy).abs() <= half)
        }
        ShapeClass::Triangle => {
            // Up-pointing isoceles: width grows linearly from apex row y0.
            let h = rng.gen_range(7..=10) as i64;
            let half_base = rng.gen_range(4..=5) as i64;
            let y0 = rng.gen_range(1..s - 1 - h);
            let cx = rng.gen_range(half_base + 1..s - 1 - half_base);
            grid(size, |x, y| {
                let dy = y - y0;
                dy >= 0 && dy <= h && (x - cx).abs() * h <= dy * half_base
            })
        }
        ShapeClass::Stripes => {
            let period = rng.gen_range(2..=4) as i64;
            let phase = rng.gen_range(0..period);
            let vertical = rng.gen_bool(0.5);
            grid(size, |x, y| {
                let coord = if vertical { x } else { y };
                ((coord + phase) / period) % 2 == 0
            })
        }
    }
}

fn grid(size: usize, f: impl Fn(i64, i64) -> bool) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            mask[y * size + x] = f(x as i64, y as i64);
        }
    }
    mask
}

/// Pick positions for small background distractor blobs (1×1 or 2×2), never
/// touching the shape itself. Returns (x, y, side) triples.
pub(crate) fn clutter_spots(
    mask: &[bool],
    size: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize)> {
    let mut spots = Vec::new();
    'outer: for _ in 0..count {
        for _attempt in 0..20 {
            let side = if rng.gen_bool(0.5) { 1 } else { 2 };
            let x = rng.gen_range(0..size - side + 1);
            let y = rng.gen_range(0..size - side + 1);
            let clear = (0..side)
                .flat_map(|dy| (0..side).map(move |dx| (x + dx, y + dy)))
                .all(|(px, py)| !mask[py * size + px]);
            if clear {
                spots.push((x, y, side));
                continue 'outer;
            }
        }
        // Crowded frame: drop this blob rather than overlap the shape.
    }
    spots
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn every_class_renders_inside_the_frame_with_nonempty_area() {
        for class in ShapeClass::ALL {
            for seed in 0..50 {
                let mask = rasterize(class, 16, &mut rng(seed));
                let area = mask.iter().filter(|&&m| m).count();
                assert!(area >= 9, "{class:?} seed {seed}: area {area}");
                assert!(area <= 200, "{class:?} seed {seed}: area {area}");
                if class != ShapeClass::Stripes {
                    // Solid shapes keep a clear border.
                    for i in 0..16 {
                        assert!(!mask[i], "{class:?} touches top row");
                        assert!(!mask[15 * 16 + i], "{class:?} touches bottom row");
                        assert!(!mask[i * 16], "{class:?} touches left column");
                        assert!(!mask[i * 16 + 15], "{class:?} touches right column");
                    }
                }
            }
        }
    }

    #[test]
    fn stripes_alternate_with_the_drawn_period() {
        for seed in 0..30 {
            let mask = rasterize(ShapeClass::Stripes, 16, &mut rng(seed));
            // Every row equals either row 0 or its complement (vertical
            // stripes make columns constant; horizontal make rows constant).
            let row0: Vec<bool> = mask[0..16].to_vec();
            let col0: Vec<bool> = (0..16).map(|y| mask[y * 16]).collect();
            let rows_constant = (0..16).all(|y| {
                let v = mask[y * 16];
                (0..16).all(|x| mask[y * 16 + x] == v)
            });
            let cols_constant = (0..16).all(|x| {
                let v = mask[x];
                (0..16).all(|y| mask[y * 16 + x] == v)
            });
            assert!(rows_constant || cols_constant, "seed {seed}");
            // And both on and off bands exist.
            assert!(row0.iter().any(|&m| m) || col0.iter().any(|&m| m));
            assert!(row0.iter().any(|&m| !m) || col0.iter().any(|&m| !m));
        }
    }

    #[test]
    fn rasterize_is_deterministic_per_seed() {
        for class in ShapeClass::ALL {
            let a = rasterize(class, 16, &mut rng(9));
            let b = rasterize(class, 16, &mut rng(9));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn clutter_never_lands_on_the_shape() {
        for seed in 0..50 {
            let mask = rasterize(ShapeClass::Circle, 16, &mut rng(seed));
            let spots = clutter_spots(&mask, 16, 3, &mut rng(seed + 1000));
            for (x, y, side) in spots {
                for dy in 0..side {
                    for dx in 0..side {
                        assert!(!mask[(y + dy) * 16 + (x + dx)]);
                    }
                }
            }
        }
    }
}
