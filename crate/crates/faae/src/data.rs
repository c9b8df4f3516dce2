//! Latent prior sampling and desk-scale datasets.
//!
//! The prior is uniform on the n-dimensional unit sphere: standard normals
//! normalized to unit length. Datasets are synthetic 2-D mixtures, procedural
//! sprite images, or external P6 PPM directories; all are immutable after
//! construction and a pure function of their seed.

use crate::error::{Error, Result};
use crate::ppm;
use crate::rng::Rng;
use std::path::Path;

/// A point on the unit sphere S^n.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f64>,
}

impl LatentVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Draws a latent vector uniformly from the unit sphere: n standard normals
/// (Box-Muller) divided by their Euclidean norm.
pub fn sample_unit_sphere(n: usize, rng: &mut Rng) -> Result<LatentVector> {
    if n == 0 {
        return Err(Error::Contract("latent dimension must be >= 1".into()));
    }
    loop {
        let values: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Ok(LatentVector {
                values: values.into_iter().map(|v| v / norm).collect(),
            });
        }
    }
}

/// Batch of latent draws as a flat [batch, n] buffer.
pub fn sample_latent_batch(batch: usize, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        out.extend(sample_unit_sphere(n, rng)?.values);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Gauss8,
    Rings2d,
    Sprites,
    ImageDir,
}

/// Immutable collection of samples sharing one shape; image samples are
/// planar [c, h, w] with every value in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub sample_shape: Vec<usize>,
    /// Row-major: samples[i * sample_len .. (i+1) * sample_len].
    pub samples: Vec<f64>,
    /// Mode-circle radius for 2D mixture datasets; 0 when not applicable.
    pub mode_radius: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        let per: usize = self.sample_shape.iter().product();
        if per == 0 { 0 } else { self.samples.len() / per }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.samples[i * per..(i + 1) * per]
    }

    /// Gathers the given indices into one flat batch buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let per = self.sample_len();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(self.sample(i));
        }
        out
    }
}

/// Centers of the 8-Gaussian ring at angles 2*pi*k/8.
pub fn gauss8_modes(radius: f64) -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Equal-weight mixture of 8 isotropic Gaussians on a circle.
pub fn make_gauss8(count: usize, radius: f64, sigma: f64, rng: &mut Rng) -> Result<Dataset> {
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    if count < 8 {
        return Err(Error::Contract(format!("gauss8 needs count >= 8, got {count}")));
    }
    let modes = gauss8_modes(radius);
    let mut samples = Vec::with_capacity(count * 2);
    for _ in 0..count {
        let m = &modes[rng.below(8)];
        samples.push(m[0] + sigma * rng.normal());
        samples.push(m[1] + sigma * rng.normal());
    }
    Ok(Dataset { kind: DatasetKind::Gauss8, sample_shape: vec![2], samples, mode_radius: radius })
}

/// Two concentric circles with radial Gaussian jitter.
pub fn make_rings2d(count: usize, radius: f64, sigma: f64, rng: &mut Rng) -> Result<Dataset> {
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    if count < 2 {
        return Err(Error::Contract("rings2d needs count >= 2".into()));
    }
    let mut samples = Vec::with_capacity(count * 2);
    for _ in 0..count {
        let r = if rng.below(2) == 0 { radius } else { radius * 0.5 };
        let a = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        samples.push(r * a.cos() + sigma * rng.normal());
        samples.push(r * a.sin() + sigma * rng.normal());
    }
    Ok(Dataset { kind: DatasetKind::Rings2d, sample_shape: vec![2], samples, mode_radius: radius })
}

/// Procedural size x size x 3 images of one colored primitive each
/// (disk, square or bar) on a dark background.
pub fn make_sprites(count: usize, size: usize, rng: &mut Rng) -> Result<Dataset> {
    if ![8, 16, 32].contains(&size) {
        return Err(Error::Contract(format!(
            "sprite size must be 8, 16 or 32, got {size}"
        )));
    }
    let per = 3 * size * size;
    let mut samples = Vec::with_capacity(count * per);
    for _ in 0..count {
        let bg = rng.uniform_in(0.0, 0.15);
        let color = [
            rng.uniform_in(0.35, 1.0),
            rng.uniform_in(0.35, 1.0),
            rng.uniform_in(0.35, 1.0),
        ];
        let kind = rng.below(3);
        let s = size as f64;
        let cx = rng.uniform_in(0.25 * s, 0.75 * s);
        let cy = rng.uniform_in(0.25 * s, 0.75 * s);
        let half = rng.uniform_in(0.12 * s, 0.3 * s);
        let mut img = vec![bg; per];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match kind {
                    0 => {
                        let dx = fx - cx;
                        let dy = fy - cy;
                        dx * dx + dy * dy <= half * half
                    }
                    1 => (fx - cx).abs() <= half && (fy - cy).abs() <= half,
                    _ => (fx - cx).abs() <= half * 0.4 && (fy - cy).abs() <= half * 1.4,
                };
                if inside {
                    for c in 0..3 {
                        img[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
        samples.extend(img);
    }
    Ok(Dataset { kind: DatasetKind::Sprites, sample_shape: vec![3, size, size], samples, mode_radius: 0.0 })
}

/// Loads every P6 PPM in a directory, ordered by filename byte order.
pub fn load_image_dir(path: &Path, expected_shape: Option<&[usize]>) -> Result<Dataset> {
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(format!("{}: no samples", path.display())));
    }
    let mut shape: Option<Vec<usize>> = expected_shape.map(|s| s.to_vec());
    let mut samples = Vec::new();
    for f in &files {
        let im = ppm::read_ppm(f)?;
        let this = vec![3, im.height, im.width];
        match &shape {
            None => shape = Some(this),
            Some(s) if *s != this => {
                return Err(Error::Io(format!(
                    "{}: shape {this:?} does not match expected {s:?}",
                    f.display()
                )));
            }
            _ => {}
        }
        samples.extend(im.to_chw());
    }
    Ok(Dataset {
        kind: DatasetKind::ImageDir,
        sample_shape: shape.unwrap(),
        samples,
        mode_radius: 0.0,
    })
}

/// Yields shuffled index batches covering every sample exactly once per epoch.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_sphere_norm_and_zero_sphere() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let z = sample_unit_sphere(8, &mut rng).unwrap();
            assert!((z.norm() - 1.0).abs() < 1e-6);
        }
        for _ in 0..20 {
            let z = sample_unit_sphere(1, &mut rng).unwrap();
            assert!(z.values[0] == 1.0 || z.values[0] == -1.0);
        }
        assert!(sample_unit_sphere(0, &mut rng).is_err());
    }

    #[test]
    fn unit_sphere_symmetric_mean() {
        let mut rng = Rng::new(2);
        let n = 8;
        let draws = 100_000;
        let mut sums = vec![0.0; n];
        for _ in 0..draws {
            let z = sample_unit_sphere(n, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(&z.values) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / draws as f64).abs() < 0.02);
        }
    }

    #[test]
    fn prior_isotropy() {
        let mut rng = Rng::new(3);
        let n = 4;
        let draws = 100_000;
        let mut cov = vec![0.0; n * n];
        for _ in 0..draws {
            let z = sample_unit_sphere(n, &mut rng).unwrap();
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += z.values[i] * z.values[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let c = cov[i * n + j] / draws as f64;
                if i == j {
                    assert!((c - 1.0 / n as f64).abs() < 0.02, "diag {c}");
                } else {
                    assert!(c.abs() < 0.02, "offdiag {c}");
                }
            }
        }
    }

    #[test]
    fn gauss8_degenerate_sigma_hits_modes() {
        let mut rng = Rng::new(4);
        let ds = make_gauss8(200, 2.0, 1e-12, &mut rng).unwrap();
        let modes = gauss8_modes(2.0);
        for i in 0..ds.len() {
            let p = ds.sample(i);
            let nearest = modes
                .iter()
                .map(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-9);
        }
    }

    #[test]
    fn gauss8_centrally_symmetric_mean() {
        let mut rng = Rng::new(5);
        let radius = 2.0;
        let ds = make_gauss8(100_000, radius, 0.2, &mut rng).unwrap();
        let mut mx = 0.0;
        let mut my = 0.0;
        for i in 0..ds.len() {
            mx += ds.sample(i)[0];
            my += ds.sample(i)[1];
        }
        mx /= ds.len() as f64;
        my /= ds.len() as f64;
        assert!((mx * mx + my * my).sqrt() < 0.05 * radius);
    }

    #[test]
    fn gauss8_all_modes_occupied() {
        let mut rng = Rng::new(6);
        let radius = 2.0;
        let ds = make_gauss8(10_000, radius, radius / 10.0, &mut rng).unwrap();
        let modes = gauss8_modes(radius);
        let mut hits = [0usize; 8];
        for i in 0..ds.len() {
            let p = ds.sample(i);
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (k, m) in modes.iter().enumerate() {
                let d = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            hits[best] += 1;
        }
        assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
    }

    #[test]
    fn gauss8_rejects_bad_params() {
        let mut rng = Rng::new(7);
        assert!(make_gauss8(100, 2.0, 0.0, &mut rng).is_err());
        assert!(make_gauss8(4, 2.0, 0.1, &mut rng).is_err());
    }

    #[test]
    fn sprites_range_determinism_and_mean() {
        let mut a = Rng::new(8);
        let da = make_sprites(50, 8, &mut a).unwrap();
        assert!(da.samples.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut b = Rng::new(8);
        let db = make_sprites(50, 8, &mut b).unwrap();
        assert_eq!(da.samples, db.samples);
        let mut c = Rng::new(9);
        let dc = make_sprites(1000, 8, &mut c).unwrap();
        let mean: f64 = dc.samples.iter().sum::<f64>() / dc.samples.len() as f64;
        assert!(mean > 0.05 && mean < 0.95, "{mean}");
        assert!(make_sprites(10, 9, &mut c).is_err());
    }

    #[test]
    fn image_dir_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("faae-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        // empty dir errors
        match load_image_dir(&dir, None) {
            Err(Error::Io(msg)) => assert!(msg.contains("no samples")),
            other => panic!("expected no-samples error, got {other:?}"),
        }
        // one 2x2 all-white image
        let white = ppm::Image::new(2, 2, vec![1.0; 12]).unwrap();
        ppm::write_ppm(&dir.join("a.ppm"), &white).unwrap();
        let ds = load_image_dir(&dir, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.samples.iter().all(|&v| v == 1.0));
        // round trip of a random sprite within quantization
        let mut rng = Rng::new(10);
        let sp = make_sprites(1, 8, &mut rng).unwrap();
        let im = ppm::Image::from_chw(3, 8, 8, sp.sample(0)).unwrap();
        ppm::write_ppm(&dir.join("b.ppm"), &im).unwrap();
        let ds2 = load_image_dir(&dir, Some(&[3, 8, 8]));
        // the 2x2 white file has a different size now -> per-file error
        assert!(ds2.is_err());
        std::fs::remove_file(dir.join("a.ppm")).unwrap();
        let ds3 = load_image_dir(&dir, Some(&[3, 8, 8])).unwrap();
        for (a, b) in sp.sample(0).iter().zip(ds3.sample(0)) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn epoch_batches_cover_every_sample_once() {
        let mut rng = Rng::new(11);
        let batches = epoch_batches(103, 10, &mut rng);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
    }
}
