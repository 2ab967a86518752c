//! Dataset ingestion and seeded batch sampling.
//!
//! Two layouts are accepted: a directory tree `root/<artist_name>/*.png`, or
//! a UTF-8 manifest file with one `relative_path<TAB>artist_name` line per
//! image. Artists with fewer than `min_images` images are dropped, and the
//! survivors get dense ids in lexicographic name order so id assignment is
//! reproducible across machines.

pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array3, Array4};

use crate::error::{GadError, Result};
use crate::rng::Stream;
use crate::types::{ArtistId, ImageBatch};

/// Filtered dataset listing with dense artist ids.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// (path relative to root, artist id), grouped by artist in name order.
    pub entries: Vec<(PathBuf, ArtistId)>,
    pub artist_names: Vec<String>,
    pub artist_counts: Vec<usize>,
    /// Side length of the first readable image (images are resized on load).
    pub image_size: usize,
}

impl DatasetManifest {
    pub fn n_artists(&self) -> usize {
        self.artist_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cumulative artist counts, for count-weighted marginal draws.
    pub fn cumulative_counts(&self) -> Vec<u64> {
        let mut acc = 0u64;
        self.artist_counts
            .iter()
            .map(|&c| {
                acc += c as u64;
                acc
            })
            .collect()
    }
}

/// Files that were skipped and why.
#[derive(Debug, Clone, Default)]
pub struct RejectsReport {
    pub entries: Vec<(PathBuf, String)>,
}

impl RejectsReport {
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (p, why) in &self.entries {
            text.push_str(&format!("{}\t{}\n", p.display(), why));
        }
        std::fs::write(path, text).map_err(|e| GadError::io(path, e))
    }
}

/// Scan a directory tree or parse a manifest file, apply the `min_images`
/// filter, and assign dense ids.
pub fn load_manifest(source: &Path, min_images: usize) -> Result<(DatasetManifest, RejectsReport)> {
    let mut rejects = RejectsReport::default();
    let (root, raw) = if source.is_dir() {
        (source.to_path_buf(), scan_directory(source, &mut rejects)?)
    } else {
        let root = source
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        (root, parse_manifest_file(source)?)
    };

    // group by artist name
    let mut by_artist: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for (path, artist) in raw {
        by_artist.entry(artist).or_default().push(path);
    }
    for paths in by_artist.values_mut() {
        paths.sort();
    }
    by_artist.retain(|_, paths| paths.len() >= min_images);

    if by_artist.is_empty() {
        return Err(GadError::contract(format!(
            "no trainable artists: every artist has fewer than {min_images} images"
        )));
    }

    let mut entries = Vec::new();
    let mut artist_names = Vec::new();
    let mut artist_counts = Vec::new();
    for (id, (name, paths)) in by_artist.into_iter().enumerate() {
        artist_counts.push(paths.len());
        artist_names.push(name);
        for p in paths {
            entries.push((p, ArtistId(id)));
        }
    }

    // nominal size from the first readable image
    let mut image_size = 0;
    for (p, _) in &entries {
        match image::image_dimensions(root.join(p)) {
            Ok((w, _)) => {
                image_size = w as usize;
                break;
            }
            Err(e) => rejects.entries.push((p.clone(), format!("unreadable: {e}"))),
        }
    }

    Ok((
        DatasetManifest {
            root,
            entries,
            artist_names,
            artist_counts,
            image_size,
        },
        rejects,
    ))
}

fn scan_directory(root: &Path, rejects: &mut RejectsReport) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| GadError::io(root, e))? {
        let entry = entry.map_err(|e| GadError::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    for dir in dirs {
        let artist = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| GadError::contract(format!("non-UTF-8 artist directory {dir:?}")))?
            .to_string();
        for entry in std::fs::read_dir(&dir).map_err(|e| GadError::io(&dir, e))? {
            let entry = entry.map_err(|e| GadError::io(&dir, e))?;
            let path = entry.path();
            if !path.is_file() {
                continue;
            }
            match path.extension().and_then(|e| e.to_str()) {
                Some("png") | Some("PNG") => {
                    let rel = path.strip_prefix(root).unwrap().to_path_buf();
                    out.push((rel, artist.clone()));
                }
                _ => rejects
                    .entries
                    .push((path.clone(), "not a png file".to_string())),
            }
        }
    }
    Ok(out)
}

fn parse_manifest_file(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| GadError::io(path, e))?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (p, artist) = line.split_once('\t').ok_or_else(|| {
            GadError::contract(format!(
                "manifest line {} is not `path<TAB>artist`: {line:?}",
                lineno + 1
            ))
        })?;
        if !seen.insert(p.to_string()) {
            return Err(GadError::contract(format!("duplicate path in manifest: {p}")));
        }
        out.push((PathBuf::from(p), artist.to_string()));
    }
    Ok(out)
}

/// Decode, resize to `target` with bilinear filtering, and map into [-1, 1].
pub fn preprocess_image(path: &Path, target: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| GadError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == target && rgb.height() as usize == target {
        rgb
    } else {
        image::imageops::resize(&rgb, target as u32, target as u32, FilterType::Triangle)
    };
    let mut out = Array3::<f32>::zeros((target, target, 3));
    for y in 0..target {
        for x in 0..target {
            let p = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[(y, x, c)] = p.0[c] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

/// Manifest plus decoded pixels, ready for sampling.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub image_side: usize,
    images: Vec<Array3<f32>>,
    cumulative: Vec<u64>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest, image_side: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for (rel, _) in &manifest.entries {
            images.push(preprocess_image(&manifest.root.join(rel), image_side)?);
        }
        let cumulative = manifest.cumulative_counts();
        Ok(LoadedDataset {
            manifest,
            image_side,
            images,
            cumulative,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Array3<f32> {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> ArtistId {
        self.manifest.entries[i].1
    }

    /// Assemble an [`ImageBatch`] from entry indices.
    pub fn gather(&self, indices: &[usize]) -> Result<ImageBatch> {
        let s = self.image_side;
        let mut data = Array4::<f32>::zeros((indices.len(), s, s, 3));
        for (bi, &i) in indices.iter().enumerate() {
            data.index_axis_mut(ndarray::Axis(0), bi).assign(&self.images[i]);
        }
        ImageBatch::new(data)
    }
}

/// One training batch: images x with jointly sampled labels a, plus an
/// independently drawn a' following the empirical artist marginal.
pub struct Batch {
    pub images: ImageBatch,
    pub labels: Vec<ArtistId>,
    pub mismatched: Vec<ArtistId>,
}

/// Draw entry indices uniformly (so labels follow the joint) and mismatch
/// labels from the count-weighted marginal. Draw order per batch is fixed:
/// first the entry indices, then the mismatched labels.
pub fn sample_indices(
    manifest: &DatasetManifest,
    cumulative: &[u64],
    batch_size: usize,
    rng: &mut Stream,
) -> (Vec<usize>, Vec<ArtistId>) {
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.index(manifest.len())).collect();
    let mismatched: Vec<ArtistId> = (0..batch_size)
        .map(|_| ArtistId(rng.weighted_index(cumulative)))
        .collect();
    (idx, mismatched)
}

/// Sample a full batch from a loaded dataset.
pub fn sample_batch(data: &LoadedDataset, batch_size: usize, rng: &mut Stream) -> Result<Batch> {
    if data.is_empty() {
        return Err(GadError::contract("cannot sample from an empty dataset"));
    }
    if batch_size == 0 {
        return Err(GadError::contract("batch_size must be >= 1"));
    }
    let (idx, mismatched) = sample_indices(&data.manifest, &data.cumulative, batch_size, rng);
    let labels = idx.iter().map(|&i| data.label(i)).collect();
    Ok(Batch {
        images: data.gather(&idx)?,
        labels,
        mismatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest(counts: &[usize]) -> DatasetManifest {
        let mut entries = Vec::new();
        let mut names = Vec::new();
        for (id, &c) in counts.iter().enumerate() {
            names.push(format!("artist_{id:02}"));
            for j in 0..c {
                entries.push((PathBuf::from(format!("artist_{id:02}/{j}.png")), ArtistId(id)));
            }
        }
        DatasetManifest {
            root: PathBuf::from("/nonexistent"),
            entries,
            artist_names: names,
            artist_counts: counts.to_vec(),
            image_size: 32,
        }
    }

    #[test]
    fn mismatched_labels_follow_empirical_marginal() {
        let manifest = toy_manifest(&[900, 100]);
        let cumulative = manifest.cumulative_counts();
        let mut rng = Stream::new(13, "marginal");
        let mut zero = 0usize;
        let n = 100_000;
        for _ in 0..n / 10 {
            let (_, mm) = sample_indices(&manifest, &cumulative, 10, &mut rng);
            zero += mm.iter().filter(|a| a.0 == 0).count();
        }
        let freq = zero as f64 / n as f64;
        assert!((freq - 0.9).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn single_artist_degenerate_marginal() {
        let manifest = toy_manifest(&[25]);
        let cumulative = manifest.cumulative_counts();
        let mut rng = Stream::new(14, "single");
        let (_, mm) = sample_indices(&manifest, &cumulative, 64, &mut rng);
        assert!(mm.iter().all(|a| a.0 == 0));
    }

    #[test]
    fn fixed_seed_fixed_sequence() {
        let manifest = toy_manifest(&[40, 60, 10]);
        let cumulative = manifest.cumulative_counts();
        let mut a = Stream::new(15, "det");
        let mut b = Stream::new(15, "det");
        for _ in 0..20 {
            let (ia, ma) = sample_indices(&manifest, &cumulative, 8, &mut a);
            let (ib, mb) = sample_indices(&manifest, &cumulative, 8, &mut b);
            assert_eq!(ia, ib);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn manifest_file_rules() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        let buf = image::RgbImage::from_pixel(8, 8, image::Rgb([128, 128, 128]));
        buf.save(&img).unwrap();
        let img2 = dir.path().join("b.png");
        buf.save(&img2).unwrap();

        // duplicate path rejected
        let mf = dir.path().join("dup.tsv");
        std::fs::write(&mf, "a.png\tx\na.png\ty\n").unwrap();
        assert!(load_manifest(&mf, 1).is_err());

        // boundary of the min_images rule: artists at 2 and 1 images, min 2
        let mf = dir.path().join("ok.tsv");
        std::fs::write(&mf, "a.png\talice\nb.png\talice\na.png\tbob\n").unwrap();
        // note: same file may appear under two artists; paths are unique
        let err = load_manifest(&mf, 2);
        assert!(err.is_err(), "duplicate path must be rejected");

        let mf = dir.path().join("ok2.tsv");
        std::fs::write(&mf, "a.png\talice\nb.png\talice\n").unwrap();
        let (m, _) = load_manifest(&mf, 2).unwrap();
        assert_eq!(m.n_artists(), 1);
        assert_eq!(m.len(), 2);
        assert_eq!(m.artist_names, vec!["alice"]);

        // everything filtered -> explicit error
        assert!(load_manifest(&mf, 3).is_err());
    }

    #[test]
    fn min_images_boundary_via_directories() {
        let dir = tempfile::tempdir().unwrap();
        let buf = image::RgbImage::from_pixel(8, 8, image::Rgb([10, 200, 30]));
        for (artist, count) in [("a", 50usize), ("b", 49), ("c", 200)] {
            let sub = dir.path().join(artist);
            std::fs::create_dir(&sub).unwrap();
            for i in 0..count {
                buf.save(sub.join(format!("{i:04}.png"))).unwrap();
            }
        }
        let (m, _) = load_manifest(dir.path(), 50).unwrap();
        assert_eq!(m.n_artists(), 2);
        assert_eq!(m.len(), 250);
        assert_eq!(m.artist_names, vec!["a", "c"]);
        assert_eq!(m.artist_counts, vec![50, 200]);
    }

    #[test]
    fn preprocess_maps_midgray_and_preserves_constants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        image::RgbImage::from_pixel(16, 16, image::Rgb([128, 128, 128]))
            .save(&p)
            .unwrap();
        // already target size: values only renormalized
        let arr = preprocess_image(&p, 16).unwrap();
        let want = 128.0 / 255.0 * 2.0 - 1.0;
        assert!((arr[(3, 7, 1)] - want).abs() < 1e-6);
        assert!((want - 0.0039).abs() < 5e-4);

        // constant 512x512 resized to 16: still constant, same color
        let p2 = dir.path().join("big.png");
        image::RgbImage::from_pixel(512, 512, image::Rgb([40, 90, 200]))
            .save(&p2)
            .unwrap();
        let arr = preprocess_image(&p2, 16).unwrap();
        for c in 0..3 {
            let want = [40.0, 90.0, 200.0][c] / 255.0 * 2.0 - 1.0;
            for v in arr.slice(ndarray::s![.., .., c]).iter() {
                assert!((v - want).abs() < 1e-5);
            }
        }
        // and the range invariant holds
        assert!(arr.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
