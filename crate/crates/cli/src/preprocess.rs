//! The preprocess subcommand: scan slide directories, detect foreground,
//! cut patches, embed them, and write bags plus a manifest.
//!
//! Input layout for `--embedder stub`: one subdirectory per slide holding
//! its grayscale channel PNGs, channels ordered by filename, channel name
//! taken from the file stem. `--embedder import` instead ingests `.bag`
//! files laid flat in the input directory.

use crate::PreprocessArgs;
use fluoroformer::fusion::EmbeddedBag;
use fluoroformer::pipeline::bagfile::{read_bag, write_bag};
use fluoroformer::pipeline::embed::{embed_bag, StubEmbedder};
use fluoroformer::pipeline::manifest::{write_manifest, ManifestRow};
use fluoroformer::pipeline::slide::{extract_patches, foreground_mask, SlideImage, SlideMode};
use fluoroformer::{Error, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const DEFAULT_D_EMB: usize = 64;

#[derive(serde::Deserialize)]
struct CohortRow {
    sample_id: String,
    patient_id: String,
    time_days: f64,
    censored: u8,
}

pub fn run(args: &PreprocessArgs) -> Result<()> {
    let labels = args.cohort.as_deref().map(read_cohort).transpose()?;
    let bags = match args.embedder.as_str() {
        "stub" => embed_slides(args)?,
        "import" => import_bags(args)?,
        other => {
            return Err(Error::config(format!(
                "unknown embedder {other:?}, expected stub or import"
            )))
        }
    };

    let bag_dir = args.out.join("bags");
    std::fs::create_dir_all(&bag_dir)?;
    let mut rows = Vec::with_capacity(bags.len());
    let mut total_patches = 0usize;
    for bag in &bags {
        let rel = PathBuf::from("bags").join(format!("{}.bag", bag.sample_id));
        write_bag(&args.out.join(&rel), bag)?;
        total_patches += bag.coords.len();
        rows.push(match &labels {
            Some(map) => {
                let l = map.get(&bag.sample_id).ok_or_else(|| {
                    Error::format(format!("cohort file has no row for slide {:?}", bag.sample_id))
                })?;
                ManifestRow {
                    sample_id: bag.sample_id.clone(),
                    patient_id: l.patient_id.clone(),
                    time_days: l.time_days,
                    censored: l.censored,
                    bag_path: rel,
                }
            }
            // no labels yet: placeholder rows, every sample censored at day 0
            None => ManifestRow {
                sample_id: bag.sample_id.clone(),
                patient_id: bag.sample_id.clone(),
                time_days: 0.0,
                censored: 1,
                bag_path: rel,
            },
        });
    }
    write_manifest(&args.out.join("manifest.csv"), &rows)?;

    let provenance = serde_json::json!({
        "input": args.input.display().to_string(),
        "mode": args.mode,
        "patch_size": args.patch_size,
        "factor": args.factor,
        "embedder": args.embedder,
        "d_emb": args.d_emb.unwrap_or(DEFAULT_D_EMB),
        "seed": args.seed,
    });
    std::fs::write(
        args.out.join("config.json"),
        format!("{}\n", serde_json::to_string_pretty(&provenance).expect("flags serialize")),
    )?;

    println!(
        "wrote {} slides, {} patches, {} channels to {}",
        bags.len(),
        total_patches,
        bags[0].m(),
        args.out.display()
    );
    Ok(())
}

fn embed_slides(args: &PreprocessArgs) -> Result<Vec<EmbeddedBag<f32>>> {
    let mode = SlideMode::from_str(&args.mode).map_err(Error::config)?;
    let embedder = StubEmbedder::new(args.seed, args.d_emb.unwrap_or(DEFAULT_D_EMB))?;
    let slide_dirs = sorted_entries(&args.input, |p| p.is_dir())?;
    if slide_dirs.is_empty() {
        return Err(Error::format(format!(
            "no slide subdirectories under {}",
            args.input.display()
        )));
    }
    let mut bags = Vec::with_capacity(slide_dirs.len());
    for dir in &slide_dirs {
        let sample_id = stem_of(dir)?;
        let slide = load_slide(dir)?;
        let mask = foreground_mask(&slide, args.factor, mode)?;
        let patches = extract_patches(&slide, &mask, args.patch_size)?;
        for w in &mask.warnings {
            eprintln!("warning: {sample_id}: {w}");
        }
        bags.push(embed_bag(sample_id, slide.channel_names.clone(), &patches, &embedder)?);
    }
    Ok(bags)
}

fn import_bags(args: &PreprocessArgs) -> Result<Vec<EmbeddedBag<f32>>> {
    let files = sorted_entries(&args.input, |p| {
        p.extension().is_some_and(|e| e.eq_ignore_ascii_case("bag"))
    })?;
    if files.is_empty() {
        return Err(Error::format(format!(
            "no .bag files under {}",
            args.input.display()
        )));
    }
    let mut bags = Vec::with_capacity(files.len());
    for f in &files {
        let bag = read_bag(f)?;
        if let Some(d) = args.d_emb {
            if bag.d_emb() != d {
                return Err(Error::format(format!(
                    "{}: embedding width {} does not match --d-emb {d}",
                    f.display(),
                    bag.d_emb()
                )));
            }
        }
        bags.push(bag);
    }
    Ok(bags)
}

/// One grayscale plane per PNG, ordered by filename.
fn load_slide(dir: &Path) -> Result<SlideImage> {
    let files = sorted_entries(dir, |p| {
        p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
    })?;
    if files.is_empty() {
        return Err(Error::format(format!("no channel PNGs under {}", dir.display())));
    }
    let mut names = Vec::with_capacity(files.len());
    let mut planes: Vec<Vec<u16>> = Vec::with_capacity(files.len());
    let mut extent: Option<(usize, usize)> = None;
    let mut max_value: Option<u16> = None;
    for f in &files {
        let img = image::open(f).map_err(|e| Error::format(format!("{}: {e}", f.display())))?;
        let (w, h, plane, max) = match img {
            image::DynamicImage::ImageLuma8(p) => {
                let (w, h) = (p.width() as usize, p.height() as usize);
                let plane: Vec<u16> = p.into_raw().into_iter().map(u16::from).collect();
                (w, h, plane, 255u16)
            }
            image::DynamicImage::ImageLuma16(p) => {
                let (w, h) = (p.width() as usize, p.height() as usize);
                (w, h, p.into_raw(), 65535u16)
            }
            _ => {
                return Err(Error::format(format!(
                    "{}: channel planes must be single-channel grayscale PNGs",
                    f.display()
                )))
            }
        };
        match extent {
            None => extent = Some((w, h)),
            Some((ew, eh)) if (ew, eh) != (w, h) => {
                return Err(Error::format(format!(
                    "{}: extent {w}x{h} differs from {ew}x{eh}",
                    f.display()
                )))
            }
            _ => {}
        }
        match max_value {
            None => max_value = Some(max),
            Some(m) if m != max => {
                return Err(Error::format(format!(
                    "{}: mixed 8-bit and 16-bit channels in one slide",
                    f.display()
                )))
            }
            _ => {}
        }
        names.push(stem_of(f)?);
        planes.push(plane);
    }
    let (w, h) = extent.expect("checked non-empty");
    SlideImage::new(w, h, names, planes, max_value.expect("checked non-empty"))
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir)
        .map_err(|e| Error::format(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| keep(p))
        .collect();
    out.sort();
    Ok(out)
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::format(format!("{}: cannot derive a name", path.display())))
}

fn read_cohort(path: &Path) -> Result<HashMap<String, CohortRow>> {
    let err = |e: csv::Error| Error::format(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    let mut map = HashMap::new();
    for rec in rdr.deserialize::<CohortRow>() {
        let row = rec.map_err(err)?;
        if row.censored > 1 {
            return Err(Error::format(format!(
                "{}: {}: censored must be 0 or 1",
                path.display(),
                row.sample_id
            )));
        }
        if !(row.time_days.is_finite() && row.time_days >= 0.0) {
            return Err(Error::format(format!(
                "{}: {}: time_days must be finite and non-negative",
                path.display(),
                row.sample_id
            )));
        }
        let key = row.sample_id.clone();
        if map.insert(key, row).is_some() {
            return Err(Error::format(format!(
                "{}: duplicate sample_id",
                path.display()
            )));
        }
    }
    Ok(map)
}
