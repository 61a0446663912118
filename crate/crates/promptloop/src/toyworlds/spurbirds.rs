//! Binary shape classification (disc vs square) over two background
//! textures (stripes vs dots). The train/val backgrounds correlate with the
//! class; the test split is balanced over all four (class, background)
//! groups. Shape colors are warm (R >= 0.7), backgrounds cool (R <= 0.55),
//! so the masked object never blends into the texture.

use rand::Rng;

use super::*;

pub(super) const BG_STRIPES: &str = "stripes";
pub(super) const BG_DOTS: &str = "dots";

fn correlated_bg(class: usize) -> &'static str {
    if class == 0 {
        BG_STRIPES
    } else {
        BG_DOTS
    }
}

fn other_bg(bg: &str) -> &'static str {
    if bg == BG_STRIPES {
        BG_DOTS
    } else {
        BG_STRIPES
    }
}

fn render(seed: u64, class: usize, bg: &str) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut img = vec![0.0; IMG_LEN];

    if bg == BG_STRIPES {
        let period = 2 + (r.gen::<u64>() % 2) as usize; // 2 or 3
        let phase = (r.gen::<u64>() % period as u64) as usize;
        let c1 = [uniform_in(&mut r, 0.05, 0.2), uniform_in(&mut r, 0.3, 0.5), uniform_in(&mut r, 0.7, 0.95)];
        let c2 = [uniform_in(&mut r, 0.0, 0.1), uniform_in(&mut r, 0.1, 0.25), uniform_in(&mut r, 0.35, 0.55)];
        for y in 0..SIDE {
            let col = if ((y + phase) / period).is_multiple_of(2) { c1 } else { c2 };
            for x in 0..SIDE {
                for c in 0..3 {
                    img[pix(x, y, c)] = col[c];
                }
            }
        }
    } else {
        let field = [uniform_in(&mut r, 0.1, 0.25), uniform_in(&mut r, 0.45, 0.65), uniform_in(&mut r, 0.1, 0.25)];
        let dot = [uniform_in(&mut r, 0.35, 0.55), uniform_in(&mut r, 0.7, 0.9), uniform_in(&mut r, 0.3, 0.5)];
        let (ox, oy) = ((r.gen::<u64>() % 3) as usize, (r.gen::<u64>() % 3) as usize);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let is_dot = (x % 4 == ox || x % 4 == ox + 1) && (y % 4 == oy || y % 4 == oy + 1);
                let col = if is_dot { dot } else { field };
                for c in 0..3 {
                    img[pix(x, y, c)] = col[c];
                }
            }
        }
    }

    let shape_col = [uniform_in(&mut r, 0.7, 0.95), uniform_in(&mut r, 0.15, 0.55), uniform_in(&mut r, 0.05, 0.3)];
    let mut mask = vec![0.0; MAP_LEN];
    if class == 0 {
        let cx = uniform_in(&mut r, 4.5, 11.5);
        let cy = uniform_in(&mut r, 4.5, 11.5);
        let rad = uniform_in(&mut r, 2.6, 3.4);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= rad * rad {
                    mask[y * SIDE + x] = 1.0;
                }
            }
        }
    } else {
        let side = 5 + (r.gen::<u64>() % 2) as usize; // 5 or 6
        let x0 = 2 + (r.gen::<u64>() % (SIDE as u64 - side as u64 - 4)) as usize;
        let y0 = 2 + (r.gen::<u64>() % (SIDE as u64 - side as u64 - 4)) as usize;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                mask[y * SIDE + x] = 1.0;
            }
        }
    }
    for p in 0..MAP_LEN {
        if mask[p] == 1.0 {
            for c in 0..3 {
                img[p * 3 + c] = shape_col[c];
            }
        }
    }
    snap_image(&mut img);
    (img, mask)
}

fn make_example(cfg: &WorldConfig, split: &str, index: usize, class: usize, bg: &str) -> ToyExample {
    let seed = example_seed(cfg.seed, split, index);
    let (image, mask) = render(seed, class, bg);
    ToyExample {
        id: format!("{split}-{index:05}"),
        image,
        label: Label::Class(class),
        mask,
        group: Group { class: Some(class), background: Some(bg.to_string()), ..Group::default() },
        provenance: None,
    }
}

/// Correlated split: per class, exactly round(correlation * n_class)
/// examples keep the class's texture; membership is a seeded choice.
fn correlated_split(cfg: &WorldConfig, split: &str, n: usize) -> ToyDataset {
    let mut flip = vec![false; n];
    for class in 0..2 {
        let idxs: Vec<usize> = (0..n).filter(|i| i % 2 == class).collect();
        let keep = (cfg.correlation * idxs.len() as f64).round() as usize;
        let mut order = idxs.clone();
        let mut r = rng(mix(cfg.seed, &[str_tag("corr"), str_tag(split), class as u64]));
        for i in (1..order.len()).rev() {
            let j = (r.gen::<u64>() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for &i in order.iter().skip(keep) {
            flip[i] = true;
        }
    }
    let examples = (0..n)
        .map(|i| {
            let class = i % 2;
            let bg = if flip[i] { other_bg(correlated_bg(class)) } else { correlated_bg(class) };
            make_example(cfg, split, i, class, bg)
        })
        .collect();
    ToyDataset { world: WorldKind::Spurbirds, split: split.to_string(), examples }
}

fn balanced_split(cfg: &WorldConfig, split: &str, n: usize) -> ToyDataset {
    let examples = (0..n)
        .map(|i| {
            let class = i % 2;
            let bg = if (i / 2) % 2 == 0 { correlated_bg(class) } else { other_bg(correlated_bg(class)) };
            make_example(cfg, split, i, class, bg)
        })
        .collect();
    ToyDataset { world: WorldKind::Spurbirds, split: split.to_string(), examples }
}

pub(super) fn build(cfg: &WorldConfig) -> World {
    World {
        cfg: cfg.clone(),
        train: correlated_split(cfg, "train", cfg.train),
        val: correlated_split(cfg, "val", cfg.val),
        test: balanced_split(cfg, "test", cfg.test),
    }
}

/// Broad pool: all four (class, background) combinations, balanced.
pub(super) fn pool(cfg: &WorldConfig, size: usize) -> ToyDataset {
    balanced_split(cfg, "pool", size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(correlation: f64) -> WorldConfig {
        WorldConfig {
            kind: WorldKind::Spurbirds,
            train: 64,
            val: 16,
            test: 200,
            correlation,
            seed: 3,
            class_counts: None,
        }
    }

    #[test]
    fn train_correlation_fraction_is_exact_up_to_rounding() {
        for rho in [1.0, 0.95, 0.5, 0.0] {
            let w = build(&small(rho));
            for class in 0..2 {
                let idxs: Vec<&ToyExample> =
                    w.train.examples.iter().filter(|e| e.label.class() == Some(class)).collect();
                let matching = idxs
                    .iter()
                    .filter(|e| e.group.background.as_deref() == Some(correlated_bg(class)))
                    .count();
                let expect = (rho * idxs.len() as f64).round() as usize;
                assert_eq!(matching, expect, "rho={rho} class={class}");
            }
        }
    }

    #[test]
    fn test_split_of_200_has_exactly_50_per_group() {
        let w = build(&small(1.0));
        for class in 0..2 {
            for bg in [BG_STRIPES, BG_DOTS] {
                let n = w
                    .test
                    .examples
                    .iter()
                    .filter(|e| e.label.class() == Some(class) && e.group.background.as_deref() == Some(bg))
                    .count();
                assert_eq!(n, 50, "class={class} bg={bg}");
            }
        }
    }

    #[test]
    fn masked_pixels_are_the_shape_palette_never_the_background() {
        // Oracle: scan every pixel; masked pixels must share one color whose
        // red channel is >= 0.7, unmasked pixels must stay <= 0.55 in red.
        let w = build(&small(0.95));
        for ex in w.train.examples.iter().chain(&w.test.examples) {
            let mut shape_col: Option<[f64; 3]> = None;
            for p in 0..MAP_LEN {
                let c = [ex.image[p * 3], ex.image[p * 3 + 1], ex.image[p * 3 + 2]];
                if ex.mask[p] == 1.0 {
                    match shape_col {
                        None => shape_col = Some(c),
                        Some(sc) => assert_eq!(sc, c, "{} pixel {p}", ex.id),
                    }
                    assert!(c[0] >= 0.7 - 1.0 / 255.0, "{} shape red {}", ex.id, c[0]);
                } else {
                    assert!(c[0] <= 0.55 + 1.0 / 255.0, "{} bg red {}", ex.id, c[0]);
                }
            }
            assert!(shape_col.is_some());
        }
    }

    #[test]
    fn mask_area_distinguishes_disc_from_square_geometry() {
        let w = build(&small(1.0));
        for ex in &w.train.examples {
            let area: f64 = ex.mask.iter().sum();
            assert!((13.0..=40.0).contains(&area), "{} area {area}", ex.id);
        }
    }
}
