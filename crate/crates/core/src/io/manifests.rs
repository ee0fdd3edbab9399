//! Dataset directories: PPM images plus a CSV manifest.
//!
//! SPMS datasets hold `manifest.csv` with the header [`SPMS_HEADER`],
//! `target_NNNNN.ppm` / `source_NNNNN.ppm` per record and `synthesis.txt`
//! with attempt statistics. Source images are ideal renders, so on load they
//! are re-rendered from `id_seed` and `prompt_a` instead of read back.
//!
//! SPSS datasets hold `manifest.csv` with the header [`SPSS_HEADER`] and
//! `image_NNNNN.ppm` per record.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use csv::StringRecord;

use crate::error::{invalid, Result};
use crate::io::ppm::{read_ppm, write_ppm};
use crate::toyworld::{Prompt, SpssRecord, ToyWorld};
use crate::training::{SpmsRecord, SpmsReport};

pub const SPMS_HEADER: [&str; 10] = [
    "record_id",
    "prompt_a_hue",
    "prompt_a_position",
    "prompt_a_scale",
    "prompt_b_hue",
    "prompt_b_position",
    "prompt_b_scale",
    "id_seed",
    "accepted_id_loss",
    "enhancement_gamma",
];

pub const SPSS_HEADER: [&str; 15] = [
    "record_id",
    "id_seed",
    "bg_hue",
    "position",
    "scale",
    "eye_l_x",
    "eye_l_y",
    "eye_r_x",
    "eye_r_y",
    "nose_x",
    "nose_y",
    "mouth_l_x",
    "mouth_l_y",
    "mouth_r_x",
    "mouth_r_y",
];

fn prompt_fields(p: Prompt) -> [String; 3] {
    [
        p.bg_hue.to_string(),
        p.position.to_string(),
        p.scale.to_string(),
    ]
}

pub fn write_spms_dataset(dir: &Path, records: &[SpmsRecord], report: &SpmsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(SPMS_HEADER)?;
    for r in records {
        let mut row = vec![r.record_id.to_string()];
        row.extend(prompt_fields(r.prompt_a));
        row.extend(prompt_fields(r.prompt_b));
        row.extend([
            r.id_seed.to_string(),
            r.accepted_id_loss.to_string(),
            r.enhancement_gamma.to_string(),
        ]);
        w.write_record(&row)?;
        write_ppm(
            &r.target_image,
            &dir.join(format!("target_{:05}.ppm", r.record_id)),
        )?;
        write_ppm(
            &r.source_image,
            &dir.join(format!("source_{:05}.ppm", r.record_id)),
        )?;
    }
    w.flush()?;
    let mut s = File::create(dir.join("synthesis.txt"))?;
    writeln!(s, "attempts={}", report.attempts)?;
    writeln!(s, "accepted={}", report.accepted)?;
    writeln!(s, "acceptance_rate={}", report.acceptance_rate())?;
    writeln!(s, "mean_id_loss={}", report.mean_id_loss)?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| invalid(format!("manifest row lacks {name}")))?;
    raw.parse()
        .map_err(|_| invalid(format!("manifest field {name} = {raw:?} is malformed")))
}

fn prompt_at(rec: &StringRecord, i: usize, name: &str) -> Result<Prompt> {
    Prompt::new(
        field(rec, i, name)?,
        field(rec, i + 1, name)?,
        field(rec, i + 2, name)?,
    )
}

fn check_header(rd: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let got: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(invalid(format!(
            "manifest header {got:?} does not match {expected:?}"
        )));
    }
    Ok(())
}

pub fn read_spms_dataset(dir: &Path, world: &ToyWorld) -> Result<Vec<SpmsRecord>> {
    let path = dir.join("manifest.csv");
    if !path.exists() {
        return Err(invalid(format!("no SPMS manifest at {}", path.display())));
    }
    let mut rd = csv::Reader::from_path(path)?;
    check_header(&mut rd, &SPMS_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let record_id: usize = field(&rec, 0, "record_id")?;
        let prompt_a = prompt_at(&rec, 1, "prompt_a")?;
        let prompt_b = prompt_at(&rec, 4, "prompt_b")?;
        if prompt_a == prompt_b {
            return Err(invalid(format!(
                "record {record_id} has equal source and target prompts"
            )));
        }
        let id_seed: u64 = field(&rec, 7, "id_seed")?;
        let identity = world.identity(id_seed);
        let source_image = world.render(&identity, prompt_a);
        let id_embedding =
            world.encode_identity_cond(&source_image, &prompt_a.face_box().keypoints())?;
        let target_image = read_ppm(&dir.join(format!("target_{record_id:05}.ppm")))?;
        out.push(SpmsRecord {
            record_id,
            id_seed,
            prompt_a,
            prompt_b,
            source_image,
            id_embedding,
            target_image,
            accepted_id_loss: field(&rec, 8, "accepted_id_loss")?,
            enhancement_gamma: field(&rec, 9, "enhancement_gamma")?,
        });
    }
    if out.is_empty() {
        return Err(invalid("SPMS manifest has no records"));
    }
    Ok(out)
}

pub fn write_spss_dataset(dir: &Path, records: &[SpssRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(SPSS_HEADER)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![i.to_string(), r.id_seed.to_string()];
        row.extend(prompt_fields(r.prompt));
        for &(x, y) in &r.keypoints.0 {
            row.extend([x.to_string(), y.to_string()]);
        }
        w.write_record(&row)?;
        write_ppm(&r.target, &dir.join(format!("image_{i:05}.ppm")))?;
    }
    w.flush()?;
    Ok(())
}

/// `(id_seed, prompt)` per record of an SPSS manifest.
pub fn read_spss_manifest(dir: &Path) -> Result<Vec<(u64, Prompt)>> {
    let mut rd = csv::Reader::from_path(dir.join("manifest.csv"))?;
    check_header(&mut rd, &SPSS_HEADER)?;
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Ok((field(&rec, 1, "id_seed")?, prompt_at(&rec, 2, "prompt")?))
        })
        .collect()
}
