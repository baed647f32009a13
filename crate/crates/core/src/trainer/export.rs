//! Interpretability artifacts: per-slide patch-attention grids (CSV and
//! PNG), per-slide argmax-marker grids, the cohort-level z-scored channel
//! attention matrix, and per-slide spatial autocorrelation.

use crate::error::{Error, Result};
use crate::metrics::{argmax_marker_heatmap, avg_marker_attention, morans_i, HeatmapGrid};
use crate::model::Model;
use crate::numerics::Scalar;
use crate::trainer::train::TrainSample;
use image::{GrayImage, Luma};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Fraction of top-attention patches feeding the channel attention summary.
pub const TOP_PATCH_FRACTION: f64 = 0.10;

/// Pixels per grid cell in exported attention images.
const CELL_PX: u32 = 16;

#[derive(Debug, Default)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
    /// (sample_id, Moran's I) per slide, None where undefined.
    pub morans: Vec<(String, Option<f64>)>,
}

pub fn export_interpretability<S: Scalar>(
    model: &Model<S>,
    samples: &[&TrainSample<S>],
    out_dir: &Path,
) -> Result<ExportReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, &e))?;
    let mut report = ExportReport::default();
    if samples.is_empty() {
        // nothing to export; still emit the (empty) index so callers can
        // tell the run happened
        let path = out_dir.join("morans_i.csv");
        write_morans_csv(&path, &[])?;
        report.files.push(path);
        return Ok(report);
    }

    let mut all_marker: Vec<Vec<f64>> = Vec::new();
    let mut all_patch: Vec<Vec<f64>> = Vec::new();
    let mut m_channels = 0usize;
    let mut channel_names: Vec<String> = Vec::new();

    for s in samples {
        let out = model.forward(&s.bag)?;
        let attn: Vec<f64> = out.patch_attention.data().iter().map(|&v| Scalar::to_f64(v)).collect();
        let grid = HeatmapGrid::from_patches(&s.bag.coords, &attn)?;

        let csv_path = out_dir.join(format!("{}_attention.csv", s.sample_id));
        write_attention_csv(&csv_path, &s.bag.coords, &attn)?;
        report.files.push(csv_path);

        let png_path = out_dir.join(format!("{}_attention.png", s.sample_id));
        write_attention_png(&png_path, &grid)?;
        report.files.push(png_path);

        let moran = match morans_i(&grid) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        report.morans.push((s.sample_id.clone(), moran));

        if let Some(marker) = &out.marker_attention {
            let m = s.bag.m();
            let flat: Vec<f64> = marker.data().iter().map(|&v| Scalar::to_f64(v)).collect();
            let arg = argmax_marker_heatmap(&flat, m, &s.bag.coords)?;
            let arg_path = out_dir.join(format!("{}_argmax.csv", s.sample_id));
            write_argmax_csv(&arg_path, &arg.indices, arg.cols, &s.bag.channel_names)?;
            report.files.push(arg_path);

            all_marker.push(flat);
            all_patch.push(attn);
            m_channels = m;
            if channel_names.is_empty() {
                channel_names = s.bag.channel_names.clone();
            }
        }
    }

    if !all_marker.is_empty() {
        let summary = avg_marker_attention(&all_marker, &all_patch, m_channels, TOP_PATCH_FRACTION)?;
        let path = out_dir.join("marker_attention.csv");
        write_marker_matrix_csv(&path, &summary.zscored, m_channels, &channel_names)?;
        report.files.push(path);
    }

    let path = out_dir.join("morans_i.csv");
    write_morans_csv(&path, &report.morans)?;
    report.files.push(path);
    Ok(report)
}

fn io_err(path: &Path, e: &std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, &e))?,
    ))
}

fn write_attention_csv(path: &Path, coords: &[(u32, u32)], attn: &[f64]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "col,row,attention").map_err(|e| io_err(path, &e))?;
    for (&(c, r), a) in coords.iter().zip(attn) {
        writeln!(f, "{c},{r},{a}").map_err(|e| io_err(path, &e))?;
    }
    f.flush().map_err(|e| io_err(path, &e))?;
    Ok(())
}

/// Grayscale rendering, per-slide min-max normalized; background cells stay
/// black. Each grid cell becomes a CELL_PX square.
fn write_attention_png(path: &Path, grid: &HeatmapGrid) -> Result<()> {
    let vals: Vec<f64> = grid.unmasked().map(|(_, _, v)| v).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 254.0 / (hi - lo) } else { 0.0 };
    let mut img = GrayImage::new(grid.cols as u32 * CELL_PX, grid.rows as u32 * CELL_PX);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let idx = r * grid.cols + c;
            let px = if grid.mask[idx] {
                1 + (scale * (grid.values[idx] - lo)) as u8
            } else {
                0
            };
            for dy in 0..CELL_PX {
                for dx in 0..CELL_PX {
                    img.put_pixel(c as u32 * CELL_PX + dx, r as u32 * CELL_PX + dy, Luma([px]));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    Ok(())
}

fn write_argmax_csv(
    path: &Path,
    indices: &[Option<usize>],
    cols: usize,
    channel_names: &[String],
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "col,row,channel_index,channel").map_err(|e| io_err(path, &e))?;
    for (i, idx) in indices.iter().enumerate() {
        if let Some(ci) = idx {
            let (r, c) = (i / cols, i % cols);
            writeln!(f, "{c},{r},{ci},{}", channel_names[*ci]).map_err(|e| io_err(path, &e))?;
        }
    }
    f.flush().map_err(|e| io_err(path, &e))?;
    Ok(())
}

fn write_marker_matrix_csv(path: &Path, zscored: &[f64], m: usize, names: &[String]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "query\\key,{}", names.join(",")).map_err(|e| io_err(path, &e))?;
    for qi in 0..m {
        let row: Vec<String> = (0..m).map(|ki| format!("{}", zscored[qi * m + ki])).collect();
        writeln!(f, "{},{}", names[qi], row.join(",")).map_err(|e| io_err(path, &e))?;
    }
    f.flush().map_err(|e| io_err(path, &e))?;
    Ok(())
}

fn write_morans_csv(path: &Path, morans: &[(String, Option<f64>)]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "sample_id,morans_i").map_err(|e| io_err(path, &e))?;
    for (id, m) in morans {
        match m {
            Some(v) => writeln!(f, "{id},{v}"),
            None => writeln!(f, "{id},"),
        }
        .map_err(|e| io_err(path, &e))?;
    }
    f.flush().map_err(|e| io_err(path, &e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionMode, ModelSpec};
    use crate::trainer::synth::{synth_cohort, SynthConfig, SynthKind};
    use crate::trainer::train::cohort_samples;

    fn setup(mode: FusionMode) -> (Model<f32>, Vec<TrainSample<f32>>) {
        let cohort = synth_cohort(&SynthConfig {
            kind: SynthKind::Linear,
            n_samples: 22,
            m: 3,
            d_emb: 8,
            grid: 3,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let samples = cohort_samples(&cohort);
        let spec = ModelSpec::new(mode, 8, 4, 6, 4);
        (Model::init(&spec, 2).unwrap(), samples)
    }

    #[test]
    fn exports_one_file_set_per_slide_plus_cohort_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let (model, samples) = setup(FusionMode::Fluoroformer);
        let refs: Vec<&TrainSample<f32>> = samples.iter().take(3).collect();
        let report = export_interpretability(&model, &refs, dir.path()).unwrap();
        for s in &refs {
            assert!(dir.path().join(format!("{}_attention.csv", s.sample_id)).exists());
            assert!(dir.path().join(format!("{}_attention.png", s.sample_id)).exists());
            assert!(dir.path().join(format!("{}_argmax.csv", s.sample_id)).exists());
        }
        assert!(dir.path().join("marker_attention.csv").exists());
        assert!(dir.path().join("morans_i.csv").exists());
        assert_eq!(report.morans.len(), 3);
        // 3x3 full grids have defined Moran's I
        assert!(report.morans.iter().all(|(_, m)| m.is_some()));
    }

    #[test]
    fn attention_csv_matches_forward_pass() {
        let dir = tempfile::tempdir().unwrap();
        let (model, samples) = setup(FusionMode::Fluoroformer);
        let refs = vec![&samples[0]];
        export_interpretability(&model, &refs, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(format!("{}_attention.csv", samples[0].sample_id))).unwrap();
        let out = model.forward(&samples[0].bag).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "col,row,attention");
        assert_eq!(lines.len(), 1 + samples[0].bag.coords.len());
        for (i, line) in lines[1..].iter().enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            let (c, r) = samples[0].bag.coords[i];
            assert_eq!(parts[0], c.to_string());
            assert_eq!(parts[1], r.to_string());
            let a: f64 = parts[2].parse().unwrap();
            assert_eq!(a, out.patch_attention.data()[i] as f64);
        }
    }

    #[test]
    fn empty_sample_list_writes_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _) = setup(FusionMode::Fluoroformer);
        let report = export_interpretability::<f32>(&model, &[], dir.path()).unwrap();
        assert!(report.morans.is_empty());
        let text = std::fs::read_to_string(dir.path().join("morans_i.csv")).unwrap();
        assert_eq!(text.trim(), "sample_id,morans_i");
    }

    #[test]
    fn channel_mean_mode_skips_marker_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (model, samples) = setup(FusionMode::ChannelMean);
        let refs = vec![&samples[0]];
        export_interpretability(&model, &refs, dir.path()).unwrap();
        assert!(!dir.path().join("marker_attention.csv").exists());
        assert!(!dir.path().join(format!("{}_argmax.csv", samples[0].sample_id)).exists());
        assert!(dir.path().join(format!("{}_attention.png", samples[0].sample_id)).exists());
    }

    #[test]
    fn single_patch_slide_exports_one_cell_and_undefined_moran() {
        let dir = tempfile::tempdir().unwrap();
        let (model, mut samples) = setup(FusionMode::Fluoroformer);
        // shrink the first bag to one patch
        let bag = &samples[0].bag;
        let k1 = crate::fusion::EmbeddedBag::new(
            bag.sample_id.clone(),
            bag.channel_names.clone(),
            vec![bag.coords[0]],
            crate::numerics::Tensor::new(
                vec![1, bag.m(), bag.d_emb()],
                bag.h.data()[..bag.m() * bag.d_emb()].to_vec(),
            )
            .unwrap(),
        )
        .unwrap();
        samples[0].bag = k1;
        let refs = vec![&samples[0]];
        let report = export_interpretability(&model, &refs, dir.path()).unwrap();
        assert_eq!(report.morans[0].1, None);
        let text = std::fs::read_to_string(dir.path().join(format!("{}_attention.csv", samples[0].sample_id))).unwrap();
        assert_eq!(text.lines().count(), 2, "header plus one cell");
    }

    #[test]
    fn marker_matrix_has_named_header_and_m_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (model, samples) = setup(FusionMode::Fluoroformer);
        let refs: Vec<&TrainSample<f32>> = samples.iter().take(4).collect();
        export_interpretability(&model, &refs, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("marker_attention.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "header plus 3 channel rows");
        assert!(lines[0].ends_with("dapi,cd8,foxp3"));
        assert!(lines[1].starts_with("dapi,"));
    }
}
