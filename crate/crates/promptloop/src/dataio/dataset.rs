//! Dataset directory format: `index.tsv` plus per-example binary files.
//!
//! Layout under the dataset root:
//!   index.tsv            one header row, then one row per example
//!   images/<id>.ppm      P6 RGB
//!   masks/<id>.pgm       P5, 0 or 255
//!   labels/<id>.pgm      P5 depth map (dense-label worlds only)
//!
//! Missing fields are stored as `-`. Examples carry their generation
//! provenance (prompt, source, seed, sampler) when synthetic.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::toyworlds::{Group, Label, Provenance, ToyDataset, ToyExample, WorldKind, SIDE};

use super::ppm;

const HEADER: &str = "id\tworld\tsplit\tclass_label\tlabel_path\timage_path\tmask_path\tgroup_class\tbackground\tlocation\ttime_of_day\tcorruption\tseverity\tprompt_id\tsource_id\tgen_seed\tsampler";
const COLS: usize = 17;

/// One parsed row of `index.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexRow {
    pub id: String,
    pub world: WorldKind,
    pub split: String,
    pub class_label: Option<usize>,
    pub label_path: Option<String>,
    pub image_path: String,
    pub mask_path: String,
    pub group: Group,
    pub provenance: Option<Provenance>,
}

fn field(value: &Option<String>) -> &str {
    value.as_deref().unwrap_or("-")
}

fn check_cell(row: usize, name: &str, v: &str) -> Result<()> {
    if v.is_empty() || v.contains(['\t', '\n', '\r']) {
        return Err(Error::config(
            "index.tsv",
            format!("row {row}: field `{name}` empty or contains separator characters"),
        ));
    }
    Ok(())
}

fn check_rel_path(row: usize, p: &str) -> Result<()> {
    if p.starts_with('/') || p.split('/').any(|part| part.is_empty() || part == "..") {
        return Err(Error::config("index.tsv", format!("row {row}: unsafe path `{p}`")));
    }
    Ok(())
}

fn opt(cell: &str) -> Option<&str> {
    if cell == "-" {
        None
    } else {
        Some(cell)
    }
}

fn parse_opt<T: std::str::FromStr>(row: usize, name: &str, cell: &str) -> Result<Option<T>> {
    match opt(cell) {
        None => Ok(None),
        Some(s) => s.parse::<T>().map(Some).map_err(|_| {
            Error::config("index.tsv", format!("row {row}: bad `{name}` value `{s}`"))
        }),
    }
}

/// Parse index text into typed rows. Pure (no filesystem access); every
/// malformed input maps to `Error::Config`.
pub fn parse_index(text: &str) -> Result<Vec<IndexRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(Error::config(
                "index.tsv",
                format!("bad header `{}`", other.unwrap_or("<empty>")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2; // 1-based, after header
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != COLS {
            return Err(Error::config(
                "index.tsv",
                format!("row {row}: {} columns, expected {COLS}", cells.len()),
            ));
        }
        let world = WorldKind::parse(cells[1])
            .ok_or_else(|| Error::config("index.tsv", format!("row {row}: unknown world `{}`", cells[1])))?;
        let class_label: Option<usize> = parse_opt(row, "class_label", cells[3])?;
        if let (Some(c), Some(k)) = (class_label, world.num_classes()) {
            if c >= k {
                return Err(Error::config("index.tsv", format!("row {row}: class {c} >= {k}")));
            }
        }
        match (world.is_dense(), class_label.is_some(), opt(cells[4]).is_some()) {
            (true, false, true) | (false, true, false) => {}
            _ => {
                return Err(Error::config(
                    "index.tsv",
                    format!("row {row}: label kind does not match world `{}`", cells[1]),
                ))
            }
        }
        for p in [Some(cells[5]), Some(cells[6]), opt(cells[4])].into_iter().flatten() {
            check_rel_path(row, p)?;
        }
        let group = Group {
            class: parse_opt(row, "group_class", cells[7])?,
            background: opt(cells[8]).map(str::to_string),
            location: parse_opt(row, "location", cells[9])?,
            time_of_day: opt(cells[10]).map(str::to_string),
            corruption: opt(cells[11]).map(str::to_string),
            severity: parse_opt(row, "severity", cells[12])?,
        };
        let prov_cells = [cells[13], cells[14], cells[15], cells[16]];
        let provenance = match prov_cells.iter().filter(|c| opt(c).is_some()).count() {
            0 => None,
            4 => Some(Provenance {
                prompt_id: prov_cells[0].to_string(),
                source_id: prov_cells[1].to_string(),
                seed: parse_opt(row, "gen_seed", prov_cells[2])?.unwrap(),
                sampler: prov_cells[3].to_string(),
            }),
            _ => {
                return Err(Error::config(
                    "index.tsv",
                    format!("row {row}: provenance fields must be all set or all `-`"),
                ))
            }
        };
        if cells[0] == "-" || cells[2] == "-" {
            return Err(Error::config("index.tsv", format!("row {row}: id and split are required")));
        }
        rows.push(IndexRow {
            id: cells[0].to_string(),
            world,
            split: cells[2].to_string(),
            class_label,
            label_path: opt(cells[4]).map(str::to_string),
            image_path: cells[5].to_string(),
            mask_path: cells[6].to_string(),
            group,
            provenance,
        });
    }
    Ok(rows)
}

fn format_row(i: usize, world: WorldKind, split: &str, ex: &ToyExample) -> Result<String> {
    let (class_label, label_path) = match &ex.label {
        Label::Class(c) => (Some(c.to_string()), None),
        Label::Dense(_) => (None, Some(format!("labels/{}.pgm", ex.id))),
    };
    let prov = ex.provenance.as_ref();
    let cells = [
        ex.id.clone(),
        world.as_str().to_string(),
        split.to_string(),
        field(&class_label).to_string(),
        field(&label_path).to_string(),
        format!("images/{}.ppm", ex.id),
        format!("masks/{}.pgm", ex.id),
        field(&ex.group.class.map(|c| c.to_string())).to_string(),
        field(&ex.group.background).to_string(),
        field(&ex.group.location.map(|l| l.to_string())).to_string(),
        field(&ex.group.time_of_day).to_string(),
        field(&ex.group.corruption).to_string(),
        field(&ex.group.severity.map(|s| s.to_string())).to_string(),
        prov.map_or("-".to_string(), |p| p.prompt_id.clone()),
        prov.map_or("-".to_string(), |p| p.source_id.clone()),
        prov.map_or("-".to_string(), |p| p.seed.to_string()),
        prov.map_or("-".to_string(), |p| p.sampler.clone()),
    ];
    let names = HEADER.split('\t');
    for (name, cell) in names.zip(&cells) {
        check_cell(i + 2, name, cell)?;
    }
    Ok(cells.join("\t"))
}

pub fn save_dataset(ds: &ToyDataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut index = String::from(HEADER);
    let mut seen = std::collections::BTreeSet::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        if !seen.insert(&ex.id) {
            return Err(Error::config("dataset", format!("duplicate example id `{}`", ex.id)));
        }
        index.push('\n');
        index.push_str(&format_row(i, ds.world, &ds.split, ex)?);
        ppm::write_p6(&dir.join(format!("images/{}.ppm", ex.id)), SIDE, SIDE, &ex.image)?;
        ppm::write_p5(&dir.join(format!("masks/{}.pgm", ex.id)), SIDE, SIDE, &ex.mask)?;
        if let Label::Dense(d) = &ex.label {
            ppm::write_p5(&dir.join(format!("labels/{}.pgm", ex.id)), SIDE, SIDE, d)?;
        }
    }
    index.push('\n');
    let path = dir.join("index.tsv");
    fs::write(&path, index).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<ToyDataset> {
    let index_path = dir.join("index.tsv");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(index_path, e))?;
    let rows = parse_index(&text)?;
    let first = rows
        .first()
        .ok_or_else(|| Error::config("index.tsv", "dataset has no rows"))?;
    let (world, split) = (first.world, first.split.clone());
    if rows.iter().any(|r| r.world != world || r.split != split) {
        return Err(Error::config("index.tsv", "mixed worlds or splits in one dataset"));
    }
    let read_map = |rel: &str, what: &str, id: &str| -> Result<Vec<f64>> {
        let (w, h, data) = ppm::read_p5(&dir.join(rel))?;
        if (w, h) != (SIDE, SIDE) {
            return Err(Error::config("dataset", format!("{what} for `{id}` is {w}x{h}, want {SIDE}x{SIDE}")));
        }
        Ok(data)
    };
    let mut examples = Vec::with_capacity(rows.len());
    for row in rows {
        let (w, h, image) = ppm::read_p6(&dir.join(&row.image_path))?;
        if (w, h) != (SIDE, SIDE) {
            return Err(Error::config("dataset", format!("image for `{}` is {w}x{h}, want {SIDE}x{SIDE}", row.id)));
        }
        let mask = read_map(&row.mask_path, "mask", &row.id)?;
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config("dataset", format!("mask for `{}` is not binary", row.id)));
        }
        let label = match (row.class_label, &row.label_path) {
            (Some(c), None) => Label::Class(c),
            (None, Some(p)) => Label::Dense(read_map(p, "label map", &row.id)?),
            _ => unreachable!("parse_index enforces exactly one label kind"),
        };
        examples.push(ToyExample {
            id: row.id,
            image,
            label,
            mask,
            group: row.group,
            provenance: row.provenance,
        });
    }
    Ok(ToyDataset { world, split, examples })
}

/// Canonical on-disk location for one split of a world build.
pub fn split_dir(root: &Path, world: WorldKind, split: &str) -> PathBuf {
    root.join(world.as_str()).join(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworlds::{build_world, WorldConfig};

    fn small(kind: WorldKind) -> ToyDataset {
        let mut cfg = WorldConfig::defaults(kind, 21);
        cfg.train = 12;
        cfg.val = 4;
        cfg.test = 8;
        build_world(&cfg).unwrap().train
    }

    #[test]
    fn roundtrip_is_bit_identical_for_every_world() {
        for kind in [WorldKind::Spurbirds, WorldKind::Wildspots, WorldKind::Depthrooms] {
            let ds = small(kind);
            let dir = tempfile::tempdir().unwrap();
            save_dataset(&ds, dir.path()).unwrap();
            let back = load_dataset(dir.path()).unwrap();
            assert_eq!(ds, back, "{kind:?}");
        }
    }

    #[test]
    fn provenance_roundtrips() {
        let mut ds = small(WorldKind::Spurbirds);
        ds.examples[0].provenance = Some(Provenance {
            prompt_id: "bank0-p3".to_string(),
            source_id: "train-00002".to_string(),
            seed: 123456789,
            sampler: "ddim".to_string(),
        });
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.examples[0].provenance, ds.examples[0].provenance);
        assert!(back.examples[0].is_synthetic());
        assert!(!back.examples[1].is_synthetic());
    }

    #[test]
    fn malformed_index_rows_are_rejected_not_panicked() {
        let good = format!("{HEADER}\na\tspurbirds\ttrain\t1\t-\timages/a.ppm\tmasks/a.pgm\t1\tstripes\t-\t-\t-\t-\t-\t-\t-\t-");
        assert_eq!(parse_index(&good).unwrap().len(), 1);
        let cases = [
            "not a header".to_string(),
            format!("{HEADER}\nonly\ttwo"),
            format!("{HEADER}\na\tnoworld\ttrain\t1\t-\ti\tm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t9\t-\ti\tm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t-\t-\ti\tm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t1\tlab\ti\tm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t1\t-\t/etc/shadow\tm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t1\t-\t../x.ppm\tm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t1\t-\ti\tm\t-\t-\t-\t-\t-\t-\tp\t-\t-\t-"),
            format!("{HEADER}\na\tspurbirds\ttrain\t1\t-\ti\tm\t-\t-\t-\t-\t-\t-\tp\ts\tNaN\tddim"),
        ];
        for (i, case) in cases.iter().enumerate() {
            assert!(parse_index(case).is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn duplicate_ids_and_mixed_splits_are_rejected() {
        let mut ds = small(WorldKind::Spurbirds);
        ds.examples[1].id = ds.examples[0].id.clone();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_dataset(&ds, dir.path()).is_err());

        let two = format!(
            "{HEADER}\na\tspurbirds\ttrain\t1\t-\ti.ppm\tm.pgm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-\nb\tspurbirds\tval\t0\t-\ti.ppm\tm.pgm\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-"
        );
        let dir2 = tempfile::tempdir().unwrap();
        std::fs::write(dir2.path().join("index.tsv"), two).unwrap();
        assert!(load_dataset(dir2.path()).is_err());
    }
}
