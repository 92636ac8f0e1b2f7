//! Diagnostic exports: sampling masks, structure-expert activation maps,
//! routing weights and aggregation attention.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::Serialize;

use crate::ctx::ForwardCtx;
use crate::data::MultiModalSample;
use crate::encoders::token_energy;
use crate::error::{Error, Result};
use crate::model::{Batch, Next};
use crate::modality::Modality;
use crate::nn;
use crate::train::omega_rows;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiagSummary {
    pub mask_images: Vec<PathBuf>,
    pub structure_images: Vec<PathBuf>,
    pub attention_images: Vec<PathBuf>,
    pub csv_files: Vec<PathBuf>,
}

/// Renders a row-major `(h, w)` grid in [0, 1], each cell scaled to
/// `cell x cell` pixels.
pub fn grid_image(values: &[f64], grid: (usize, usize), cell: usize) -> GrayImage {
    let (h, w) = grid;
    let cell = cell.max(1);
    GrayImage::from_fn((w * cell) as u32, (h * cell) as u32, |x, y| {
        let v = values[(y as usize / cell) * w + x as usize / cell];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Runs an eval-mode forward on `samples` and writes the diagnostics under
/// `out_dir`:
///
/// - `masks/<sample>/expert<i>_<modality>.png` binary sampling masks
/// - `structure/<sample>/expert<i>_<modality>.png` activation norms
/// - `attention/<sample>/entry<j>_<modality>.png` head-averaged attention of
///   one modality query over the rgb|nir|tir token grids
/// - `routes.csv`, `omega.csv`, `attention.csv`
pub fn export_diagnostics(model: &Next, samples: &[MultiModalSample], out_dir: &Path) -> Result<DiagSummary> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to diagnose".into()));
    }
    let enc = &model.cfg.encoder;
    let batch = Batch::from_samples(samples, enc)?;
    let out = model.forward(&batch, &ForwardCtx::eval())?;
    let grid = enc.grid();
    let n = enc.num_patches();
    let cell = enc.patch_size;
    let mut summary = DiagSummary::default();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut routes_csv = String::from("sample,expert,modality,sigma,density\n");
    for r in &out.routes {
        let masks = nn::to_vec2(&r.mask)?;
        let sigma = nn::to_vec2(&r.sigma)?;
        for (b, s) in samples.iter().enumerate() {
            let path = out_dir
                .join("masks")
                .join(sanitize(&s.sample_id))
                .join(format!("expert{}_{}.png", r.expert, r.modality));
            save_png(&grid_image(&masks[b], grid, cell), &path)?;
            summary.mask_images.push(path);
            let density = masks[b].iter().sum::<f64>() / n as f64;
            let _ = writeln!(routes_csv, "{},{},{},{},{}", s.sample_id, r.expert, r.modality, sigma[b][0], density);
        }
    }
    if !out.routes.is_empty() {
        let p = out_dir.join("routes.csv");
        crate::data::write_atomic(&p, routes_csv.as_bytes())?;
        summary.csv_files.push(p);
    }

    if let Some(omega) = &out.omega {
        let rows = omega_rows(omega)?;
        let per_sample = rows.len() / samples.len();
        let width = rows.first().map_or(0, Vec::len);
        let mut csv = String::from("sample,modality");
        for j in 0..width {
            let _ = write!(csv, ",w{j}");
        }
        csv.push('\n');
        for (i, row) in rows.iter().enumerate() {
            let s = &samples[i / per_sample];
            let m = if per_sample == 3 { Modality::ALL[i % 3].as_str() } else { "shared" };
            let vals: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(csv, "{},{m},{}", s.sample_id, vals.join(","));
        }
        let p = out_dir.join("omega.csv");
        crate::data::write_atomic(&p, csv.as_bytes())?;
        summary.csv_files.push(p);
        for (i, t) in out.structure_outputs.iter().enumerate() {
            let energy = nn::to_vec2(&token_energy(t)?)?;
            for (b, s) in samples.iter().enumerate() {
                for m in Modality::ALL {
                    let vals = normalize(&energy[b][m.index() * n..(m.index() + 1) * n]);
                    let path = out_dir
                        .join("structure")
                        .join(sanitize(&s.sample_id))
                        .join(format!("expert{i}_{m}.png"));
                    save_png(&grid_image(&vals, grid, cell), &path)?;
                    summary.structure_images.push(path);
                }
            }
        }
    }

    if !out.aggregation.is_empty() {
        let mut csv = String::from("sample,entry,query_modality,key_modality,token,weight\n");
        for (j, agg) in out.aggregation.iter().enumerate() {
            // (B, heads, 3, L) -> (B, 3, L)
            let w = agg.weights.mean(1)?;
            let (_, _, l) = w.dims3()?;
            let flat = nn::to_vec1(&w)?;
            for (b, s) in samples.iter().enumerate() {
                for q in Modality::ALL {
                    let row = &flat[(b * 3 + q.index()) * l..(b * 3 + q.index() + 1) * l];
                    for (t, v) in row.iter().enumerate() {
                        let km = if l == 3 * n { Modality::ALL[t / n].as_str() } else { "-" };
                        let _ = writeln!(csv, "{},{j},{q},{km},{},{v}", s.sample_id, t % n.max(1));
                    }
                    if l == 3 * n {
                        let (h, gw) = grid;
                        let norm = normalize(row);
                        let mut side = vec![0.0; 3 * n];
                        for (t, v) in norm.iter().enumerate() {
                            let (km, k) = (t / n, t % n);
                            side[(k / gw) * 3 * gw + km * gw + k % gw] = *v;
                        }
                        let path = out_dir
                            .join("attention")
                            .join(sanitize(&s.sample_id))
                            .join(format!("entry{j}_{q}.png"));
                        save_png(&grid_image(&side, (h, 3 * gw), cell), &path)?;
                        summary.attention_images.push(path);
                    }
                }
            }
        }
        let p = out_dir.join("attention.csv");
        crate::data::write_atomic(&p, csv.as_bytes())?;
        summary.csv_files.push(p);
    }
    Ok(summary)
}
