//! Seven-way glyph classification across location palettes. Class 0 is
//! "background" (no glyph, empty mask); classes 1-6 are 5x5 glyph shapes.
//! Two of the five locations never appear in train/val. Day examples have
//! mean brightness >= 0.6, night examples <= 0.3.

use rand::Rng;

use super::*;
use crate::error::Result;

const GLYPH_SIDE: usize = 5;

const GLYPHS: [[&str; 5]; 6] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."], // plus
    [".###.", "#...#", "#...#", "#...#", ".###."], // ring
    ["#####", "..#..", "..#..", "..#..", "..#.."], // tee
    ["##...", ".#...", "..#..", "...#.", "...##"], // zig
    ["#...#", "#...#", "#####", "#...#", "#...#"], // aitch
    ["#....", "#....", "#....", "#....", "#####"], // corner
];

const PALETTES: [[[f64; 3]; 2]; WILDSPOTS_LOCATIONS] = [
    [[0.75, 0.62, 0.42], [0.55, 0.42, 0.28]], // sand
    [[0.25, 0.55, 0.30], [0.12, 0.35, 0.18]], // forest
    [[0.55, 0.55, 0.58], [0.35, 0.35, 0.40]], // rock
    [[0.55, 0.30, 0.65], [0.35, 0.15, 0.45]], // violet
    [[0.20, 0.60, 0.62], [0.08, 0.38, 0.42]], // teal
];

fn render(seed: u64, class: usize, location: usize, time: &str) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut img = vec![0.0; IMG_LEN];

    // Blocky value-noise texture between the two location colors.
    let jitter = uniform_in(&mut r, -0.04, 0.04);
    let lattice: Vec<f64> = (0..25).map(|_| r.gen::<f64>()).collect();
    let base = PALETTES[location];
    for y in 0..SIDE {
        for x in 0..SIDE {
            // bilinear over a 5x5 lattice spanning the image
            let fx = x as f64 / (SIDE - 1) as f64 * 4.0;
            let fy = y as f64 / (SIDE - 1) as f64 * 4.0;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (ix1, iy1) = ((ix + 1).min(4), (iy + 1).min(4));
            let l00 = lattice[iy * 5 + ix];
            let l10 = lattice[iy * 5 + ix1];
            let l01 = lattice[iy1 * 5 + ix];
            let l11 = lattice[iy1 * 5 + ix1];
            let t = (l00 * (1.0 - tx) + l10 * tx) * (1.0 - ty) + (l01 * (1.0 - tx) + l11 * tx) * ty;
            for c in 0..3 {
                let v = base[0][c] * (1.0 - t) + base[1][c] * t + jitter;
                img[pix(x, y, c)] = v.clamp(0.0, 1.0);
            }
        }
    }

    let mut mask = vec![0.0; MAP_LEN];
    if class > 0 {
        let glyph = &GLYPHS[class - 1];
        let col = [
            uniform_in(&mut r, 0.85, 0.95),
            uniform_in(&mut r, 0.55, 0.75),
            uniform_in(&mut r, 0.15, 0.30),
        ];
        let x0 = 2 + (r.gen::<u64>() % (SIDE as u64 - GLYPH_SIDE as u64 - 4)) as usize;
        let y0 = 2 + (r.gen::<u64>() % (SIDE as u64 - GLYPH_SIDE as u64 - 4)) as usize;
        for (gy, row) in glyph.iter().enumerate() {
            for (gx, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    let (x, y) = (x0 + gx, y0 + gy);
                    mask[y * SIDE + x] = 1.0;
                    for c in 0..3 {
                        img[pix(x, y, c)] = col[c];
                    }
                }
            }
        }
    }

    // Day lifts everything above 0.6 mean brightness; night caps it at 0.3.
    // Offsets leave headroom so 8-bit quantization cannot cross the bounds.
    for v in img.iter_mut() {
        *v = if time == "day" { 0.61 + 0.39 * *v } else { 0.29 * *v };
    }
    snap_image(&mut img);
    (img, mask)
}

fn make_example(
    cfg: &WorldConfig,
    split: &str,
    index: usize,
    class: usize,
    locations: &[usize],
) -> ToyExample {
    let seed = example_seed(cfg.seed, split, index);
    let mut r = rng(mix(seed, &[str_tag("group")]));
    let location = locations[(r.gen::<u64>() % locations.len() as u64) as usize];
    let time = if r.gen::<u64>() % 2 == 0 { "day" } else { "night" };
    let (image, mask) = render(seed, class, location, time);
    ToyExample {
        id: format!("{split}-{index:05}"),
        image,
        label: Label::Class(class),
        mask,
        group: Group {
            class: Some(class),
            location: Some(location),
            time_of_day: Some(time.to_string()),
            ..Group::default()
        },
        provenance: None,
    }
}

/// Classes interleaved round-robin so any prefix stays near the configured
/// histogram; total must match the split size exactly.
fn class_sequence(n: usize, counts: Option<&[usize]>) -> Result<Vec<usize>> {
    match counts {
        None => Ok((0..n).map(|i| i % 7).collect()),
        Some(c) => {
            if c.len() != 7 {
                return Err(Error::config("world.class_counts", "need exactly 7 counts"));
            }
            if c.iter().sum::<usize>() != n {
                return Err(Error::config(
                    "world.class_counts",
                    format!("counts sum {} != split size {n}", c.iter().sum::<usize>()),
                ));
            }
            let mut left = c.to_vec();
            let mut seq = Vec::with_capacity(n);
            while seq.len() < n {
                for (class, l) in left.iter_mut().enumerate() {
                    if *l > 0 {
                        *l -= 1;
                        seq.push(class);
                    }
                }
            }
            Ok(seq)
        }
    }
}

fn make_split(cfg: &WorldConfig, split: &str, n: usize, locations: &[usize], counts: Option<&[usize]>) -> Result<ToyDataset> {
    let seq = class_sequence(n, counts)?;
    let examples = seq
        .into_iter()
        .enumerate()
        .map(|(i, class)| make_example(cfg, split, i, class, locations))
        .collect();
    Ok(ToyDataset { world: WorldKind::Wildspots, split: split.to_string(), examples })
}

pub(super) fn build(cfg: &WorldConfig) -> Result<World> {
    Ok(World {
        cfg: cfg.clone(),
        train: make_split(cfg, "train", cfg.train, &WILDSPOTS_TRAIN_LOCATIONS, cfg.class_counts.as_deref())?,
        val: make_split(cfg, "val", cfg.val, &WILDSPOTS_TRAIN_LOCATIONS, None)?,
        test: make_split(cfg, "test", cfg.test, &WILDSPOTS_TEST_LOCATIONS, None)?,
    })
}

/// Broad pool over all five locations, both times, all classes.
pub(super) fn pool(cfg: &WorldConfig, size: usize) -> ToyDataset {
    let all: Vec<usize> = (0..WILDSPOTS_LOCATIONS).collect();
    make_split(cfg, "pool", size, &all, None).expect("balanced pool")
}

/// Seeded unlabeled-style renders from one (location, time) group.
pub fn group_pool(cfg: &WorldConfig, location: usize, time: &str, count: usize) -> Vec<ToyExample> {
    (0..count)
        .map(|i| {
            let split = format!("gpool-l{location}-{time}");
            let seed = example_seed(cfg.seed, &split, i);
            let class = i % 7;
            let (image, mask) = render(seed, class, location, time);
            ToyExample {
                id: format!("{split}-{i:05}"),
                image,
                label: Label::Class(class),
                mask,
                group: Group {
                    class: Some(class),
                    location: Some(location),
                    time_of_day: Some(time.to_string()),
                    ..Group::default()
                },
                provenance: None,
            }
        })
        .collect()
}
