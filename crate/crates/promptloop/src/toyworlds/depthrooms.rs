//! Dense depth regression: scenes of 2-5 axis-aligned rectangles in front of
//! a far plane at depth 1.0, nearer rectangles occluding farther ones.
//! Shading is albedo * (1 - 0.8 * depth), so brightness falls off with
//! distance; the label is the true depth map and the mask is all ones.
//! Albedo stays in a narrow band so depth dominates brightness and a probe
//! model can read it back from the image.

use rand::Rng;

use super::*;

struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    z: f64,
    albedo: [f64; 3],
}

impl Rect {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

fn shade(albedo: f64, depth: f64) -> f64 {
    albedo * (1.0 - 0.8 * depth)
}

fn render_rects(bg_albedo: [f64; 3], rects: &[Rect]) -> (Vec<f64>, Vec<f64>) {
    let mut img = vec![0.0; IMG_LEN];
    let mut depth = vec![0.0; MAP_LEN];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut z = 1.0;
            let mut albedo = bg_albedo;
            for rect in rects {
                if rect.covers(x, y) && rect.z < z {
                    z = rect.z;
                    albedo = rect.albedo;
                }
            }
            depth[y * SIDE + x] = z;
            for c in 0..3 {
                img[pix(x, y, c)] = shade(albedo[c], z);
            }
        }
    }
    snap_image(&mut img);
    for v in depth.iter_mut() {
        *v = crate::dataio::ppm::to_grid(*v);
    }
    (img, depth)
}

fn sample_rects(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Rect> {
    let n = 2 + (r.gen::<u64>() % 4) as usize;
    (0..n)
        .map(|_| {
            let x0 = (r.gen::<u64>() % 12) as usize;
            let y0 = (r.gen::<u64>() % 12) as usize;
            let w = 3 + (r.gen::<u64>() % 8) as usize;
            let h = 3 + (r.gen::<u64>() % 8) as usize;
            Rect {
                x0,
                y0,
                x1: (x0 + w).min(SIDE),
                y1: (y0 + h).min(SIDE),
                z: uniform_in(r, 0.1, 0.9),
                albedo: [
                    uniform_in(r, 0.6, 1.0),
                    uniform_in(r, 0.6, 1.0),
                    uniform_in(r, 0.6, 1.0),
                ],
            }
        })
        .collect()
}

fn make_example(cfg: &WorldConfig, split: &str, index: usize) -> ToyExample {
    let mut r = rng(example_seed(cfg.seed, split, index));
    let bg = uniform_in(&mut r, 0.7, 1.0);
    let rects = sample_rects(&mut r);
    let (image, depth) = render_rects([bg, bg, bg], &rects);
    ToyExample {
        id: format!("{split}-{index:05}"),
        image,
        label: Label::Dense(depth),
        mask: vec![1.0; MAP_LEN],
        group: Group::default(),
        provenance: None,
    }
}

fn make_split(cfg: &WorldConfig, split: &str, n: usize) -> ToyDataset {
    ToyDataset {
        world: WorldKind::Depthrooms,
        split: split.to_string(),
        examples: (0..n).map(|i| make_example(cfg, split, i)).collect(),
    }
}

pub(super) fn build(cfg: &WorldConfig) -> World {
    World {
        cfg: cfg.clone(),
        train: make_split(cfg, "train", cfg.train),
        val: make_split(cfg, "val", cfg.val),
        test: make_split(cfg, "test", cfg.test),
    }
}

/// Pool cycling through the style vocabulary: clean scenes plus blurred,
/// foggy (depth-weighted) and noisy variants at seeded severities.
pub(super) fn pool(cfg: &WorldConfig, size: usize) -> ToyDataset {
    let examples = (0..size)
        .map(|i| {
            let mut ex = make_example(cfg, "pool", i);
            let style = i % 4;
            if style > 0 {
                let kind = Corruption::ALL[style - 1];
                let seed = example_seed(cfg.seed, "pool-style", i);
                let severity = 1 + (seed % 5) as usize;
                let depth = ex.label.dense().map(|d| d.to_vec());
                ex.image = corrupt::corrupt(&ex.image, kind, severity, depth.as_deref(), seed)
                    .expect("valid severity");
                snap_image(&mut ex.image);
                ex.group.corruption = Some(kind.as_str().to_string());
                ex.group.severity = Some(severity);
            }
            ex
        })
        .collect();
    ToyDataset { world: WorldKind::Depthrooms, split: "pool".to_string(), examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ppm::to_grid;

    #[test]
    fn empty_scene_is_far_plane_everywhere() {
        let (img, depth) = render_rects([0.8, 0.8, 0.8], &[]);
        assert!(depth.iter().all(|&z| z == 1.0));
        let expected = to_grid(shade(0.8, 1.0));
        assert!(img.iter().all(|&v| v == expected));
    }

    #[test]
    fn single_rectangle_writes_its_exact_depth() {
        let rect = Rect { x0: 2, y0: 3, x1: 7, y1: 9, z: 0.2, albedo: [0.5, 0.6, 0.7] };
        let (_, depth) = render_rects([0.9, 0.9, 0.9], &[rect]);
        assert_eq!(depth[4 * SIDE + 3], 0.2);
        assert_eq!(depth[0], 1.0);
    }

    #[test]
    fn overlap_takes_smaller_depth_matching_brute_force() {
        let mut r = rng(123);
        for _ in 0..20 {
            let rects = sample_rects(&mut r);
            let (_, depth) = render_rects([0.8, 0.8, 0.8], &rects);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let mut z = 1.0f64;
                    for rect in &rects {
                        if rect.covers(x, y) {
                            z = z.min(rect.z);
                        }
                    }
                    assert_eq!(depth[y * SIDE + x], to_grid(z));
                }
            }
        }
    }

    #[test]
    fn brightness_decreases_with_depth_for_equal_albedo() {
        let near = Rect { x0: 0, y0: 0, x1: 4, y1: 4, z: 0.1, albedo: [0.9, 0.9, 0.9] };
        let far = Rect { x0: 8, y0: 8, x1: 12, y1: 12, z: 0.9, albedo: [0.9, 0.9, 0.9] };
        let (img, _) = render_rects([0.8, 0.8, 0.8], &[near, far]);
        assert!(img[pix(1, 1, 0)] > img[pix(9, 9, 0)]);
    }

    #[test]
    fn pool_cycles_through_all_styles_deterministically() {
        let cfg = WorldConfig::defaults(WorldKind::Depthrooms, 4);
        let a = pool(&cfg, 16);
        let b = pool(&cfg, 16);
        assert_eq!(a.examples, b.examples);
        for kind in ["blur", "fog", "noise"] {
            assert!(a.examples.iter().any(|e| e.group.corruption.as_deref() == Some(kind)));
        }
        assert!(a.examples.iter().any(|e| e.group.corruption.is_none()));
        for ex in &a.examples {
            assert!(ex.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(ex.label.dense().unwrap().len(), MAP_LEN);
        }
    }
}
