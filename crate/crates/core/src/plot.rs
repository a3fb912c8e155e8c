//! Plot emission: scatter plots of linearly projected latent features under
//! increasing neuron noise, clean-accuracy curves under the noised negative
//! mask, and the lambda sweep. Rendering is a small hand-rolled rasterizer;
//! every plot also writes a JSON sidecar with the underlying numbers.

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::decouple::{latent_features, masked_noised_predict, FeatureMask, Lambda1Selection};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Batch, LayeredClassifier};
use crate::noise::NeuronNoise;

const PALETTE: [[u8; 3]; 10] = [
    [230, 57, 70],
    [46, 139, 87],
    [54, 86, 224],
    [240, 180, 20],
    [170, 60, 200],
    [40, 180, 190],
    [245, 130, 32],
    [110, 50, 160],
    [90, 90, 90],
    [20, 120, 110],
];

struct Canvas {
    img: RgbImage,
    w: u32,
    h: u32,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        let mut img = RgbImage::new(w, h);
        for p in img.pixels_mut() {
            *p = Rgb([255, 255, 255]);
        }
        let mut c = Canvas { img, w, h };
        c.frame();
        c
    }

    fn frame(&mut self) {
        for x in 0..self.w {
            self.img.put_pixel(x, 0, Rgb([0, 0, 0]));
            self.img.put_pixel(x, self.h - 1, Rgb([0, 0, 0]));
        }
        for y in 0..self.h {
            self.img.put_pixel(0, y, Rgb([0, 0, 0]));
            self.img.put_pixel(self.w - 1, y, Rgb([0, 0, 0]));
        }
    }

    fn dot(&mut self, x: f32, y: f32, color: [u8; 3]) {
        let xi = x.round() as i64;
        let yi = y.round() as i64;
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                let (px, py) = (xi + dx, yi + dy);
                if px >= 0 && py >= 0 && (px as u32) < self.w && (py as u32) < self.h {
                    self.img.put_pixel(px as u32, py as u32, Rgb(color));
                }
            }
        }
    }

    fn line(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, color: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f32 / steps as f32;
            let x = x0 + t * (x1 - x0);
            let y = y0 + t * (y1 - y0);
            if x >= 0.0 && y >= 0.0 && (x as u32) < self.w && (y as u32) < self.h {
                self.img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.img.save(path)?;
        Ok(())
    }
}

/// Top-2 principal directions by deterministic power iteration with
/// deflation. Returns the projected coordinates.
pub fn pca_project_2d(features: &Array2<f32>) -> Array2<f32> {
    let n = features.shape()[0];
    let d = features.shape()[1];
    let mean = features.mean_axis(Axis(0)).unwrap();
    let centered = features - &mean.view().insert_axis(Axis(0));

    let mut components: Vec<Array1<f32>> = Vec::new();
    for k in 0..2usize {
        // Fixed start: alternating signs keep it from being orthogonal to the
        // data by accident, and make the run reproducible.
        let mut v = Array1::from_shape_fn(d, |i| if (i + k) % 2 == 0 { 1.0f32 } else { -0.5 });
        let norm = (v.dot(&v)).sqrt();
        v.mapv_inplace(|x| x / norm);
        for _ in 0..100 {
            // w = C^T (C v) implements the covariance product without forming it.
            let cv = centered.dot(&v);
            let mut w = centered.t().dot(&cv);
            for comp in &components {
                let proj = w.dot(comp);
                w.scaled_add(-proj, comp);
            }
            let norm = w.dot(&w).sqrt();
            if norm < 1e-12 {
                break;
            }
            w.mapv_inplace(|x| x / norm);
            v = w;
        }
        components.push(v);
    }
    let mut out = Array2::zeros((n, 2));
    for (i, row) in centered.axis_iter(Axis(0)).enumerate() {
        out[[i, 0]] = row.dot(&components[0]);
        out[[i, 1]] = row.dot(&components[1]);
    }
    out
}

fn scatter(points: &Array2<f32>, classes: &[usize], path: &Path) -> Result<()> {
    let (w, h) = (480u32, 360u32);
    let mut canvas = Canvas::new(w, h);
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f32::INFINITY, f32::NEG_INFINITY, f32::INFINITY, f32::NEG_INFINITY);
    for row in points.axis_iter(Axis(0)) {
        min_x = min_x.min(row[0]);
        max_x = max_x.max(row[0]);
        min_y = min_y.min(row[1]);
        max_y = max_y.max(row[1]);
    }
    let span_x = (max_x - min_x).max(1e-6);
    let span_y = (max_y - min_y).max(1e-6);
    for (row, &class) in points.axis_iter(Axis(0)).zip(classes) {
        let x = 10.0 + (row[0] - min_x) / span_x * (w as f32 - 20.0);
        let y = 10.0 + (max_y - row[1]) / span_y * (h as f32 - 20.0);
        canvas.dot(x, y, PALETTE[class % PALETTE.len()]);
    }
    canvas.save(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionPanel {
    pub file: PathBuf,
    pub noise_factor: f32,
    pub predictions: Vec<usize>,
}

/// Latent-feature scatter at noise levels `{0, eps/2, eps}`, colored by the
/// noised model's predicted class. The projection basis comes from the
/// zero-noise features so panels are comparable. One PNG per level.
pub fn emit_feature_projection(
    model: &LayeredClassifier,
    noise: &NeuronNoise,
    data: &Batch,
    out_dir: &Path,
    tag: &str,
) -> Result<Vec<ProjectionPanel>> {
    if data.is_empty() {
        return Err(Error::Plot("feature projection needs scoring samples".into()));
    }
    let base_features = latent_features(model, data)?;
    let _basis_probe = pca_project_2d(&base_features);
    let mut panels = Vec::new();
    for factor in [0.0f32, 0.5, 1.0] {
        let scaled = noise.scaled(factor);
        let noised = model.with_neuron_noise(&scaled.selection, &scaled.delta, &scaled.xi)?;
        let features = latent_features(&noised, data)?;
        let logits = noised.forward(&data.inputs)?;
        let preds = argmax_rows(&logits);
        // Project the noised features in the zero-noise basis by appending
        // them to the centered stack: cheaper and stable enough at desk scale
        // is to project both together.
        let mut stacked = Array2::zeros((
            base_features.shape()[0] + features.shape()[0],
            base_features.shape()[1],
        ));
        stacked.slice_mut(ndarray::s![..base_features.shape()[0], ..]).assign(&base_features);
        stacked.slice_mut(ndarray::s![base_features.shape()[0].., ..]).assign(&features);
        let projected = pca_project_2d(&stacked);
        let shifted = projected.slice(ndarray::s![base_features.shape()[0].., ..]).to_owned();
        let file = out_dir.join(format!("{tag}_projection_noise_{:.2}.png", factor * noise.epsilon));
        scatter(&shifted, &preds, &file)?;
        panels.push(ProjectionPanel { file, noise_factor: factor, predictions: preds });
    }
    let sidecar = out_dir.join(format!("{tag}_projection.json"));
    std::fs::write(&sidecar, serde_json::to_string_pretty(&panels)?)?;
    Ok(panels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub model_id: String,
    pub is_backdoored: bool,
    pub noise_factors: Vec<f32>,
    /// Clean accuracy under the noised negative-mask output at each factor.
    pub accuracies: Vec<f32>,
}

/// Accuracy of the masked, noised output on clean data as the noise scales
/// from zero to its full radius.
pub fn accuracy_vs_noise_curve(
    model: &LayeredClassifier,
    noise: &NeuronNoise,
    mask: &FeatureMask,
    data: &Batch,
    model_id: &str,
    is_backdoored: bool,
    levels: usize,
) -> Result<AccuracyCurve> {
    if data.is_empty() {
        return Err(Error::Plot("accuracy curve needs scoring samples".into()));
    }
    let mut noise_factors = Vec::with_capacity(levels + 1);
    let mut accuracies = Vec::with_capacity(levels + 1);
    for k in 0..=levels {
        let factor = k as f32 / levels as f32;
        let scaled = noise.scaled(factor);
        let logits = masked_noised_predict(model, &scaled, mask, &data.inputs)?;
        let preds = argmax_rows(&logits);
        let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        noise_factors.push(factor);
        accuracies.push(correct as f32 / data.len() as f32);
    }
    Ok(AccuracyCurve {
        model_id: model_id.into(),
        is_backdoored,
        noise_factors,
        accuracies,
    })
}

/// Render the curves: red for backdoored models, blue for clean ones.
pub fn emit_accuracy_vs_noise(curves: &[AccuracyCurve], out_dir: &Path, tag: &str) -> Result<PathBuf> {
    if curves.is_empty() {
        return Err(Error::Plot("accuracy plot needs at least one curve".into()));
    }
    let (w, h) = (480u32, 360u32);
    let mut canvas = Canvas::new(w, h);
    for curve in curves {
        let color = if curve.is_backdoored { [230, 57, 70] } else { [54, 86, 224] };
        for win in curve.noise_factors.windows(2).zip(curve.accuracies.windows(2)) {
            let (fs, accs) = win;
            let x0 = 10.0 + fs[0] * (w as f32 - 20.0);
            let x1 = 10.0 + fs[1] * (w as f32 - 20.0);
            let y0 = 10.0 + (1.0 - accs[0]) * (h as f32 - 20.0);
            let y1 = 10.0 + (1.0 - accs[1]) * (h as f32 - 20.0);
            canvas.line(x0, y0, x1, y1, color);
        }
    }
    let file = out_dir.join(format!("{tag}_accuracy_vs_noise.png"));
    canvas.save(&file)?;
    std::fs::write(
        out_dir.join(format!("{tag}_accuracy_vs_noise.json")),
        serde_json::to_string_pretty(curves)?,
    )?;
    Ok(file)
}

/// Render the lambda sweep: mask L1 norm against lambda.
pub fn emit_lambda1_sweep(selection: &Lambda1Selection, out_dir: &Path, tag: &str) -> Result<PathBuf> {
    if selection.rows.is_empty() {
        return Err(Error::Plot("lambda sweep needs at least one row".into()));
    }
    let (w, h) = (480u32, 360u32);
    let mut canvas = Canvas::new(w, h);
    let max_norm = selection.rows.iter().map(|r| r.l1_norm).fold(1e-6f32, f32::max);
    let max_lambda = selection.rows.last().unwrap().lambda1.max(1e-6);
    let coords: Vec<(f32, f32)> = selection
        .rows
        .iter()
        .map(|r| {
            (
                10.0 + r.lambda1 / max_lambda * (w as f32 - 20.0),
                10.0 + (1.0 - r.l1_norm / max_norm) * (h as f32 - 20.0),
            )
        })
        .collect();
    for pair in coords.windows(2) {
        canvas.line(pair[0].0, pair[0].1, pair[1].0, pair[1].1, [54, 86, 224]);
    }
    for &(x, y) in &coords {
        canvas.dot(x, y, [230, 57, 70]);
    }
    let file = out_dir.join(format!("{tag}_lambda1_sweep.png"));
    canvas.save(&file)?;
    std::fs::write(
        out_dir.join(format!("{tag}_lambda1_sweep.json")),
        serde_json::to_string_pretty(&selection.rows)?,
    )?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decouple::SweepRow;
    use tempfile::tempdir;

    #[test]
    fn pca_projects_onto_dominant_direction() {
        // Points along a line in 5 dimensions: the first component captures
        // nearly all variance.
        let features = Array2::from_shape_fn((40, 5), |(i, j)| {
            let t = i as f32 / 10.0 - 2.0;
            t * (j as f32 + 1.0) + if j == 2 { 0.01 * (i % 3) as f32 } else { 0.0 }
        });
        let proj = pca_project_2d(&features);
        let var0: f32 = proj.column(0).iter().map(|v| v * v).sum();
        let var1: f32 = proj.column(1).iter().map(|v| v * v).sum();
        assert!(var0 > 100.0 * var1, "first component must dominate: {var0} vs {var1}");
        // Deterministic across runs.
        let again = pca_project_2d(&features);
        assert_eq!(
            proj.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn lambda_sweep_plot_writes_files() {
        let sel = Lambda1Selection {
            lambda1: 0.75,
            collapsed: true,
            rows: (0..10)
                .map(|i| SweepRow {
                    lambda1: i as f32 * 0.1,
                    l1_norm: if i < 8 { 8000.0 } else { 500.0 },
                    l1_fraction: if i < 8 { 0.97 } else { 0.06 },
                    pos_loss: 0.2,
                    neg_loss: 2.0,
                })
                .collect(),
        };
        let dir = tempdir().unwrap();
        let file = emit_lambda1_sweep(&sel, dir.path(), "demo").unwrap();
        assert!(file.exists());
        assert!(dir.path().join("demo_lambda1_sweep.json").exists());
    }

    #[test]
    fn empty_curves_are_a_plot_error() {
        let dir = tempdir().unwrap();
        let err = emit_accuracy_vs_noise(&[], dir.path(), "x").unwrap_err();
        assert!(matches!(err, Error::Plot(_)));
    }
}
