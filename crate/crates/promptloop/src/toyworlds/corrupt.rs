//! Image corruptions with a 1..5 severity ladder: separable box blur,
//! fog (uniform or depth-weighted), additive Gaussian noise.

use rand_distr::{Distribution, Normal};

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Blur,
    Fog,
    Noise,
}

impl Corruption {
    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Blur => "blur",
            Corruption::Fog => "fog",
            Corruption::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Corruption> {
        match s {
            "blur" => Some(Corruption::Blur),
            "fog" => Some(Corruption::Fog),
            "noise" => Some(Corruption::Noise),
            _ => None,
        }
    }

    pub const ALL: [Corruption; 3] = [Corruption::Blur, Corruption::Fog, Corruption::Noise];
}

/// One 1D box pass of width 2·radius+1, replicate edges. The average is
/// computed as center + mean(deviations) so a constant line is returned
/// bit-identically.
fn box1d(line: &mut [f64], radius: usize) {
    let n = line.len() as isize;
    let w = (2 * radius + 1) as f64;
    let src = line.to_vec();
    for (i, out) in line.iter_mut().enumerate() {
        let mut dev = 0.0;
        for k in -(radius as isize)..=(radius as isize) {
            let j = (i as isize + k).clamp(0, n - 1) as usize;
            dev += src[j] - src[i];
        }
        *out = (src[i] + dev / w).clamp(0.0, 1.0);
    }
}

fn box_blur(image: &mut [f64], radius: usize) {
    let mut line = vec![0.0; SIDE];
    for c in 0..3 {
        for y in 0..SIDE {
            for x in 0..SIDE {
                line[x] = image[pix(x, y, c)];
            }
            box1d(&mut line, radius);
            for x in 0..SIDE {
                image[pix(x, y, c)] = line[x];
            }
        }
        for x in 0..SIDE {
            for y in 0..SIDE {
                line[y] = image[pix(x, y, c)];
            }
            box1d(&mut line, radius);
            for y in 0..SIDE {
                image[pix(x, y, c)] = line[y];
            }
        }
    }
}

/// Apply one corruption at the given severity. `depth` (a per-pixel map in
/// [0,1]) switches fog to the depth-weighted variant where density grows with
/// distance; it is ignored by blur and noise. Output stays in [0,1] and is
/// not re-quantized; callers persisting the result snap it back to the 8-bit
/// grid.
pub fn corrupt(
    image: &[f64],
    kind: Corruption,
    severity: usize,
    depth: Option<&[f64]>,
    seed: u64,
) -> Result<Vec<f64>> {
    if image.len() != IMG_LEN {
        return Err(Error::config("corrupt", format!("image length {} != {IMG_LEN}", image.len())));
    }
    if !(1..=5).contains(&severity) {
        return Err(Error::config("corrupt.severity", format!("{severity} outside [1,5]")));
    }
    if let Some(d) = depth {
        if d.len() != MAP_LEN {
            return Err(Error::config("corrupt", format!("depth length {} != {MAP_LEN}", d.len())));
        }
    }
    let mut out = image.to_vec();
    match kind {
        Corruption::Blur => box_blur(&mut out, severity),
        Corruption::Fog => {
            let alpha = 0.15 * severity as f64;
            for p in 0..MAP_LEN {
                let a = match depth {
                    Some(d) => alpha * d[p],
                    None => alpha,
                };
                for c in 0..3 {
                    let v = &mut out[p * 3 + c];
                    *v = (1.0 - a) * *v + a;
                }
            }
        }
        Corruption::Noise => {
            let sigma = 0.05 * severity as f64;
            let dist = Normal::new(0.0, sigma).expect("positive sigma");
            let mut r = rng(mix(seed, &[str_tag("noise"), severity as u64]));
            for v in out.iter_mut() {
                *v = (*v + dist.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Corrupted copy of a dataset: images corrupted (fog uses the dense label as
/// its depth map when present), labels kept, group tagged with the corruption,
/// pixels snapped back to the storage grid.
pub fn corrupted_copy(
    ds: &ToyDataset,
    kind: Corruption,
    severity: usize,
    seed: u64,
) -> Result<ToyDataset> {
    let examples = ds
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut ex = ex.clone();
            let depth = ex.label.dense().map(|d| d.to_vec());
            ex.image = corrupt(&ex.image, kind, severity, depth.as_deref(), mix(seed, &[i as u64]))?;
            snap_image(&mut ex.image);
            ex.group.corruption = Some(kind.as_str().to_string());
            ex.group.severity = Some(severity);
            ex.id = format!("{}-{}{severity}", ex.id, kind.as_str());
            Ok(ex)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset {
        world: ds.world,
        split: format!("{}-{}{severity}", ds.split, kind.as_str()),
        examples,
    })
}
