//! Evaluation protocol: content prior, style classification accuracy on
//! generated samples, disentanglement probes, content consistency, and the
//! figure-style grid renderers.

pub mod ablation;
pub mod probe;

use ndarray::{Array2, Array3, Axis};

use crate::data::synthetic::FactorRow;
use crate::data::LoadedDataset;
use crate::error::{GadError, Result};
use crate::networks::{classify, encode, generate, style_lookup, ArchitectureSpec, NetworkParams, StyleTable};
use crate::rng::Stream;
use crate::types::{ArtistId, ImageBatch};

pub use probe::{mlp_probe_accuracy, ridge_r2};

const EVAL_BATCH: usize = 64;

/// Multivariate normal fitted to the encoder's code means over a dataset.
#[derive(Debug, Clone)]
pub struct ContentPrior {
    pub mean: Vec<f64>,
    /// Row-major covariance (dim x dim).
    pub covariance: Vec<f64>,
    pub dim: usize,
    /// True when the covariance was replaced by its diagonal (too few
    /// samples, or shrinkage never reached positive definiteness).
    pub diagonal_fallback: bool,
    /// Lower-triangular factor used for sampling (Cholesky of the covariance
    /// or sqrt of the diagonal).
    factor: Vec<f64>,
}

impl ContentPrior {
    pub fn sample(&self, rng: &mut Stream) -> Vec<f32> {
        let d = self.dim;
        let eps: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut out = vec![0.0f32; d];
        for i in 0..d {
            let mut v = self.mean[i];
            for j in 0..=i {
                v += self.factor[i * d + j] * eps[j];
            }
            out[i] = v as f32;
        }
        out
    }

    pub fn sample_batch(&self, n: usize, rng: &mut Stream) -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((n, self.dim));
        for i in 0..n {
            let s = self.sample(rng);
            for (j, v) in s.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Encode every image of the dataset (in chunks) and return the code means
/// as an (n, content_dim) matrix.
pub fn encode_all_means(
    spec: &ArchitectureSpec,
    encoder: &NetworkParams<f32>,
    data: &LoadedDataset,
) -> Result<Array2<f32>> {
    let n = data.len();
    let mut out = Array2::<f32>::zeros((n, spec.content_dim));
    let mut i = 0;
    while i < n {
        let hi = (i + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let images = data.gather(&idx)?;
        let codes = encode(spec, encoder, &images)?;
        out.slice_mut(ndarray::s![i..hi, ..]).assign(&codes.mean);
        i = hi;
    }
    Ok(out)
}

/// Fit the content prior: empirical mean and covariance of code means over
/// the full dataset, with diagonal shrinkage when not positive definite.
pub fn fit_content_prior(
    spec: &ArchitectureSpec,
    encoder: &NetworkParams<f32>,
    data: &LoadedDataset,
) -> Result<ContentPrior> {
    let means = encode_all_means(spec, encoder, data)?;
    fit_prior_from_means(&means)
}

/// Covariance fitting split out for tests.
pub fn fit_prior_from_means(means: &Array2<f32>) -> Result<ContentPrior> {
    let (n, d) = means.dim();
    if n == 0 {
        return Err(GadError::contract("cannot fit a prior to zero samples"));
    }
    let mut mean = vec![0.0f64; d];
    for row in means.axis_iter(Axis(0)) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for row in means.axis_iter(Axis(0)) {
        let c: Vec<f64> = row.iter().zip(mean.iter()).map(|(&v, &m)| v as f64 - m).collect();
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += c[a] * c[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a * d + b] = cov[b * d + a];
        }
    }
    for v in cov.iter_mut() {
        *v /= n as f64;
    }

    let forced_diag = n < d;
    let mut diagonal_fallback = forced_diag;
    let mut factor = None;
    if !forced_diag {
        let mut shrunk = cov.clone();
        for _ in 0..64 {
            if let Some(l) = probe::cholesky_factor(&shrunk, d) {
                factor = Some(l);
                cov = shrunk;
                break;
            }
            // shrink toward the diagonal by 5%
            for a in 0..d {
                for b in 0..d {
                    if a != b {
                        shrunk[a * d + b] *= 0.95;
                    }
                }
            }
            diagonal_fallback = true;
        }
    }
    let factor = match factor {
        Some(l) => l,
        None => {
            diagonal_fallback = true;
            let mut l = vec![0.0f64; d * d];
            let mut diag_cov = vec![0.0f64; d * d];
            for a in 0..d {
                let v = cov[a * d + a].max(0.0);
                diag_cov[a * d + a] = v;
                l[a * d + a] = v.sqrt();
            }
            cov = diag_cov;
            l
        }
    };

    Ok(ContentPrior {
        mean,
        covariance: cov,
        dim: d,
        diagonal_fallback,
        factor,
    })
}

/// Generate `count(manifest)` images with independent prior-sampled content
/// codes and per-artist frequencies exactly matching the manifest, then
/// report the fraction the classifier assigns to the conditioning artist.
pub fn eval_style_accuracy(
    spec: &ArchitectureSpec,
    generator: &NetworkParams<f32>,
    style: &StyleTable<f32>,
    classifier: &NetworkParams<f32>,
    prior: &ContentPrior,
    artist_counts: &[usize],
    rng: &mut Stream,
) -> Result<f64> {
    let mut labels: Vec<ArtistId> = Vec::new();
    for (a, &c) in artist_counts.iter().enumerate() {
        labels.extend(std::iter::repeat(ArtistId(a)).take(c));
    }
    let total = labels.len();
    if total == 0 {
        return Err(GadError::contract("empty artist counts"));
    }
    let mut correct = 0usize;
    let mut i = 0;
    while i < total {
        let hi = (i + EVAL_BATCH).min(total);
        let batch_labels = &labels[i..hi];
        let content = prior.sample_batch(hi - i, rng);
        let codes = style_lookup(style, batch_labels)?;
        let mut style_codes = codes.mean.clone();
        for ((s, &m), &l) in style_codes
            .iter_mut()
            .zip(codes.mean.iter())
            .zip(codes.logstd.iter())
        {
            *s = m + l.exp() * rng.normal() as f32;
        }
        let images = generate(spec, generator, &content, &style_codes)?;
        let logits = classify(spec, classifier, &images)?;
        for (row, want) in logits.axis_iter(Axis(0)).zip(batch_labels.iter()) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == want.0 {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok(correct as f64 / total as f64)
}

/// What the disentanglement probes found.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub style_accuracy: f64,
    /// Held-out R^2 per content factor.
    pub content_r2: Vec<(String, f64)>,
    pub chance: f64,
}

impl ProbeReport {
    pub fn mean_position_scale_r2(&self) -> f64 {
        let keys = ["cx", "cy", "scale"];
        let vals: Vec<f64> = self
            .content_r2
            .iter()
            .filter(|(k, _)| keys.contains(&k.as_str()))
            .map(|(_, v)| *v)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("style_accuracy,{}\n", self.style_accuracy));
        s.push_str(&format!("chance,{}\n", self.chance));
        for (k, v) in &self.content_r2 {
            s.push_str(&format!("r2_{k},{v}\n"));
        }
        s
    }
}

/// Fit the fixed probe family from representations to ground-truth factors
/// on a seeded held-out split.
pub fn probe_disentanglement(
    inputs: &Array2<f32>,
    rows: &[FactorRow],
    n_styles: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if inputs.nrows() != rows.len() {
        return Err(GadError::contract(format!(
            "probe inputs ({}) and factor table ({}) disagree",
            inputs.nrows(),
            rows.len()
        )));
    }
    let labels: Vec<usize> = rows.iter().map(|r| r.style_id).collect();
    let style_accuracy = mlp_probe_accuracy(inputs, &labels, n_styles, seed)?;

    let mut content_r2 = Vec::new();
    for (name, values) in [
        ("cx", rows.iter().map(|r| r.cx).collect::<Vec<f64>>()),
        ("cy", rows.iter().map(|r| r.cy).collect()),
        ("scale", rows.iter().map(|r| r.scale).collect()),
        ("rot", rows.iter().map(|r| r.rot).collect()),
    ] {
        content_r2.push((name.to_string(), ridge_r2(inputs, &values, seed)?));
    }

    Ok(ProbeReport {
        style_accuracy,
        content_r2,
        chance: 1.0 / n_styles as f64,
    })
}

/// Flatten dataset images into probe inputs (n, side*side*3).
pub fn flatten_pixels(data: &LoadedDataset) -> Array2<f32> {
    let n = data.len();
    let d = data.image_side * data.image_side * 3;
    let mut out = Array2::<f32>::zeros((n, d));
    for i in 0..n {
        for (dst, &v) in out.row_mut(i).iter_mut().zip(data.image(i).iter()) {
            *dst = v;
        }
    }
    out
}

/// The stage-2 content loss evaluated as a metric: mean squared distance
/// between E(G(E(x), S(a'))).mean and E(x).mean over sampled pairs.
pub fn content_consistency(
    spec: &ArchitectureSpec,
    encoder: &NetworkParams<f32>,
    generator: &NetworkParams<f32>,
    style: &StyleTable<f32>,
    data: &LoadedDataset,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<f64> {
    let cumulative = data.manifest.cumulative_counts();
    let mut total = 0.0f64;
    let mut done = 0usize;
    while done < n_samples {
        let b = EVAL_BATCH.min(n_samples - done);
        let idx: Vec<usize> = (0..b).map(|_| rng.index(data.len())).collect();
        let mismatched: Vec<ArtistId> = (0..b)
            .map(|_| ArtistId(rng.weighted_index(&cumulative)))
            .collect();
        let images = data.gather(&idx)?;
        let codes = encode(spec, encoder, &images)?;
        // content fed to the generator is a sample, the comparison uses means
        let mut content = codes.mean.clone();
        for ((c, &m), &l) in content.iter_mut().zip(codes.mean.iter()).zip(codes.logstd.iter()) {
            *c = m + l.exp() * rng.normal() as f32;
        }
        let style_codes = style_lookup(style, &mismatched)?;
        let mut style_sample = style_codes.mean.clone();
        for ((s, &m), &l) in style_sample
            .iter_mut()
            .zip(style_codes.mean.iter())
            .zip(style_codes.logstd.iter())
        {
            *s = m + l.exp() * rng.normal() as f32;
        }
        let fake = generate(spec, generator, &content, &style_sample)?;
        let fake_codes = encode(spec, encoder, &fake)?;
        for i in 0..b {
            let mut d2 = 0.0f64;
            for (a, b) in fake_codes.mean.row(i).iter().zip(codes.mean.row(i).iter()) {
                let d = (*a - *b) as f64;
                d2 += d * d;
            }
            total += d2;
        }
        done += b;
    }
    Ok(total / n_samples as f64)
}

// ---------------------------------------------------------------------------
// Grid renderers
// ---------------------------------------------------------------------------

pub const GRID_GAP: usize = 2;

fn to_rgb(image: &Array3<f32>) -> image::RgbImage {
    let (h, w, _) = image.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (((image[(y, x, 0)] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (((image[(y, x, 1)] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (((image[(y, x, 2)] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

/// Assemble tiles row-major into one image with a fixed white gap. The
/// output is exactly (cols*tile + (cols-1)*gap) x (rows*tile + (rows-1)*gap).
pub fn assemble_grid(tiles: &[image::RgbImage], rows: usize, cols: usize) -> Result<image::RgbImage> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(GadError::contract(format!(
            "grid needs rows*cols = {} tiles, got {}",
            rows * cols,
            tiles.len()
        )));
    }
    let tile = tiles[0].width() as usize;
    for t in tiles {
        if t.width() as usize != tile || t.height() as usize != tile {
            return Err(GadError::contract("grid tiles must be square and equal-sized"));
        }
    }
    let w = cols * tile + (cols - 1) * GRID_GAP;
    let h = rows * tile + (rows - 1) * GRID_GAP;
    let mut out = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    for (i, t) in tiles.iter().enumerate() {
        let r = i / cols;
        let c = i % cols;
        let ox = c * (tile + GRID_GAP);
        let oy = r * (tile + GRID_GAP);
        for y in 0..tile {
            for x in 0..tile {
                out.put_pixel((ox + x) as u32, (oy + y) as u32, *t.get_pixel(x as u32, y as u32));
            }
        }
    }
    Ok(out)
}

fn batch_tiles(images: &ImageBatch) -> Vec<image::RgbImage> {
    (0..images.len())
        .map(|i| to_rgb(&images.data().index_axis(Axis(0), i).to_owned()))
        .collect()
}

/// Columns (input, reconstruction with the artist's mean style code,
/// reconstruction with the all-zero style code), one row per input image.
pub fn zero_style_reconstruction(
    spec: &ArchitectureSpec,
    encoder: &NetworkParams<f32>,
    generator: &NetworkParams<f32>,
    style: &StyleTable<f32>,
    images: &ImageBatch,
    labels: &[ArtistId],
) -> Result<image::RgbImage> {
    let n = images.len();
    if labels.len() != n {
        return Err(GadError::contract("zero-style grid: labels/images mismatch"));
    }
    let codes = encode(spec, encoder, images)?;
    let styles = style_lookup(style, labels)?;
    let recon = generate(spec, generator, &codes.mean, &styles.mean)?;
    let zero_style = Array2::<f32>::zeros((n, spec.style_dim));
    let neutral = generate(spec, generator, &codes.mean, &zero_style)?;

    let input_tiles = batch_tiles(images);
    let recon_tiles = batch_tiles(&recon);
    let neutral_tiles = batch_tiles(&neutral);
    let mut tiles = Vec::with_capacity(n * 3);
    for i in 0..n {
        tiles.push(input_tiles[i].clone());
        tiles.push(recon_tiles[i].clone());
        tiles.push(neutral_tiles[i].clone());
    }
    assemble_grid(&tiles, n, 3)
}

/// Which figure-style grid to render.
pub enum GridKind<'a> {
    /// One style id, n prior-sampled contents.
    FixStyle { artist: ArtistId, n: usize },
    /// One content code; columns are artist mean styles followed by styles
    /// sampled from the N(0, I) style prior.
    FixContent {
        content_from: Option<&'a ImageBatch>,
        artists: Vec<ArtistId>,
        n_random: usize,
    },
    /// Rows are content images, columns are artists; every cell uses mean
    /// codes so the figure is reproducible.
    Transfer {
        contents: &'a ImageBatch,
        artists: Vec<ArtistId>,
    },
}

pub fn render_grid(
    spec: &ArchitectureSpec,
    encoder: &NetworkParams<f32>,
    generator: &NetworkParams<f32>,
    style: &StyleTable<f32>,
    prior: Option<&ContentPrior>,
    kind: GridKind,
    rng: &mut Stream,
) -> Result<image::RgbImage> {
    match kind {
        GridKind::FixStyle { artist, n } => {
            let prior = prior.ok_or_else(|| {
                GadError::contract("fix-style grids need a fitted content prior")
            })?;
            let content = prior.sample_batch(n, rng);
            let styles = style_lookup(style, &vec![artist; n])?;
            let images = generate(spec, generator, &content, &styles.mean)?;
            let cols = n.min(6).max(1);
            let rows = n.div_ceil(cols);
            let mut tiles = batch_tiles(&images);
            let blank = image::RgbImage::from_pixel(
                spec.base_size as u32,
                spec.base_size as u32,
                image::Rgb([255, 255, 255]),
            );
            tiles.resize(rows * cols, blank);
            assemble_grid(&tiles, rows, cols)
        }
        GridKind::FixContent { content_from, artists, n_random } => {
            let content_row = match content_from {
                Some(images) => {
                    let codes = encode(spec, encoder, images)?;
                    codes.mean.row(0).to_owned()
                }
                None => {
                    let prior = prior.ok_or_else(|| {
                        GadError::contract("fix-content without an image needs a content prior")
                    })?;
                    ndarray::Array1::from_vec(
                        prior.sample(rng).into_iter().collect::<Vec<f32>>(),
                    )
                }
            };
            let total = artists.len() + n_random;
            if total == 0 {
                return Err(GadError::contract("fix-content grid needs at least one style"));
            }
            let mut styles = Array2::<f32>::zeros((total, spec.style_dim));
            if !artists.is_empty() {
                let looked = style_lookup(style, &artists)?;
                styles.slice_mut(ndarray::s![..artists.len(), ..]).assign(&looked.mean);
            }
            for i in 0..n_random {
                for j in 0..spec.style_dim {
                    styles[(artists.len() + i, j)] = rng.normal() as f32;
                }
            }
            let mut content = Array2::<f32>::zeros((total, spec.content_dim));
            for mut row in content.axis_iter_mut(Axis(0)) {
                row.assign(&content_row);
            }
            let images = generate(spec, generator, &content, &styles)?;
            let cols = total.min(6).max(1);
            let rows = total.div_ceil(cols);
            let mut tiles = batch_tiles(&images);
            let blank = image::RgbImage::from_pixel(
                spec.base_size as u32,
                spec.base_size as u32,
                image::Rgb([255, 255, 255]),
            );
            tiles.resize(rows * cols, blank);
            assemble_grid(&tiles, rows, cols)
        }
        GridKind::Transfer { contents, artists } => {
            if artists.is_empty() {
                return Err(GadError::contract("transfer grid needs at least one artist"));
            }
            let codes = encode(spec, encoder, contents)?;
            let styles = style_lookup(style, &artists)?;
            let rows = contents.len();
            let cols = artists.len();
            let mut tiles = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let mut content = Array2::<f32>::zeros((cols, spec.content_dim));
                for mut row in content.axis_iter_mut(Axis(0)) {
                    row.assign(&codes.mean.row(r));
                }
                let images = generate(spec, generator, &content, &styles.mean)?;
                tiles.extend(batch_tiles(&images));
            }
            assemble_grid(&tiles, rows, cols)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_handles_degenerate_and_random_codes() {
        // constant codes: zero covariance, diagonal fallback flagged
        let means = Array2::<f32>::from_elem((50, 4), 0.7);
        let prior = fit_prior_from_means(&means).unwrap();
        assert!(prior.diagonal_fallback);
        let mut rng = Stream::new(1, "prior");
        let s = prior.sample(&mut rng);
        for (v, m) in s.iter().zip(prior.mean.iter()) {
            assert!((*v as f64 - m).abs() < 1e-6);
        }

        // fewer samples than dims: forced fallback
        let means = Array2::<f32>::from_elem((3, 8), 0.1);
        assert!(fit_prior_from_means(&means).unwrap().diagonal_fallback);

        // well-conditioned random codes: full covariance, samples follow it
        let mut rng = Stream::new(2, "prior2");
        let mut means = Array2::<f32>::zeros((4000, 3));
        for v in means.iter_mut() {
            *v = rng.normal() as f32;
        }
        let prior = fit_prior_from_means(&means).unwrap();
        assert!(!prior.diagonal_fallback);
        let mut acc = vec![0.0f64; 3];
        let n = 4000;
        for _ in 0..n {
            let s = prior.sample(&mut rng);
            for (a, v) in acc.iter_mut().zip(s.iter()) {
                *a += *v as f64;
            }
        }
        for (a, m) in acc.iter().zip(prior.mean.iter()) {
            let sample_mean = a / n as f64;
            assert!((sample_mean - m).abs() < 0.06, "{sample_mean} vs {m}");
        }
    }

    #[test]
    fn grid_dimensions_are_exact() {
        let tile = image::RgbImage::from_pixel(8, 8, image::Rgb([0, 0, 0]));
        let tiles = vec![tile; 6];
        let grid = assemble_grid(&tiles, 2, 3).unwrap();
        assert_eq!(grid.width() as usize, 3 * 8 + 2 * GRID_GAP);
        assert_eq!(grid.height() as usize, 2 * 8 + GRID_GAP);
        assert!(assemble_grid(&tiles, 2, 2).is_err());
    }
}
