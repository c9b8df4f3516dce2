//! Post-training pipelines: reconstruction, sampling, latent morphing, and
//! the summary metrics used by the acceptance checks.

use crate::data::{sample_latent_batch, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::models::{mirror_check, Mode, Network};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Combinations whose pre-normalized magnitude falls at or below this are
/// rejected as degenerate rather than normalized into noise.
pub const MORPH_DEGENERACY_FLOOR: f64 = 1e-9;

/// Anchors and outputs are accepted as "unit norm" within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Four mixing coefficients for a latent combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorphWeights {
    pub alphas: [f64; 4],
}

/// Summary metrics of a trained (or fresh) model over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub recon_mse: f64,
    pub reenc_mse: f64,
    pub disc_accuracy: f64,
    /// Number of occupied modes; `None` for datasets without known modes.
    pub mode_coverage: Option<usize>,
    pub samples_evaluated: usize,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        self.recon_mse.is_finite() && self.reenc_mse.is_finite() && self.disc_accuracy.is_finite()
    }

    pub const CSV_HEADER: &'static str =
        "recon_mse,reenc_mse,disc_accuracy,mode_coverage,samples_evaluated";

    pub fn to_csv(&self) -> String {
        let mc = self
            .mode_coverage
            .map(|m| m.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.recon_mse, self.reenc_mse, self.disc_accuracy, mc, self.samples_evaluated
        )
    }
}

/// x_hat = G(E(x)) in eval mode; no parameters move.
pub fn reconstruct(
    e: &mut Network<f32>,
    g: &mut Network<f32>,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    if !mirror_check(g, e) {
        return Err(Error::Contract(
            "reconstruct: encoder does not mirror the generator".into(),
        ));
    }
    let mut tape: Tape<f32> = Tape::new();
    let xv = tape.leaf(x);
    let e_bind = e.bind(&mut tape);
    let g_bind = g.bind(&mut tape);
    let z = e.forward(&mut tape, &e_bind, xv, Mode::Eval)?;
    let x_hat = g.forward(&mut tape, &g_bind, z, Mode::Eval)?;
    Ok(tape.tensor(x_hat))
}

/// `count` generator samples from fresh unit-sphere draws.
pub fn generate(g: &mut Network<f32>, count: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let n = g.input_shape[0];
    let mut out_shape = vec![count];
    out_shape.extend_from_slice(&g.output_shape);
    if count == 0 {
        return Tensor::new(out_shape, vec![]);
    }
    let z = sample_latent_batch(count, n, rng)?;
    let zt = Tensor::from_f64(vec![count, n], &z)?;
    let mut tape: Tape<f32> = Tape::new();
    let zv = tape.leaf(&zt);
    let g_bind = g.bind(&mut tape);
    let x = g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
    Ok(tape.tensor(x))
}

/// Normalized linear combination of four unit-norm anchors.
///
/// Weights are first scaled by their largest magnitude so that uniformly
/// rescaled weights produce the same combination; the result is divided by
/// its norm unless it is already unit within [`UNIT_NORM_TOL`], which keeps
/// single-anchor combinations bit-identical to the anchor.
pub fn morph(anchors: &[&[f64]; 4], weights: &MorphWeights) -> Result<Vec<f64>> {
    let n = anchors[0].len();
    for (i, a) in anchors.iter().enumerate() {
        if a.len() != n {
            return Err(Error::Contract(format!(
                "anchor {i} has dimension {}, expected {n}",
                a.len()
            )));
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "anchor {i} has norm {norm}, expected unit"
            )));
        }
    }
    let amax = weights
        .alphas
        .iter()
        .fold(0.0f64, |m, a| m.max(a.abs()));
    if amax == 0.0 {
        return Err(Error::Degenerate(0.0));
    }
    let w: Vec<f64> = weights.alphas.iter().map(|a| a / amax).collect();
    let mut l = vec![0.0f64; n];
    for (wi, a) in w.iter().zip(anchors.iter()) {
        for (lj, aj) in l.iter_mut().zip(a.iter()) {
            *lj += wi * aj;
        }
    }
    let norm = l.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= MORPH_DEGENERACY_FLOOR {
        return Err(Error::Degenerate(norm));
    }
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        for v in l.iter_mut() {
            *v /= norm;
        }
    }
    Ok(l)
}

/// Encodes four corner images, morphs over a bilinear grid, and returns the
/// generated cells in row-major order ([grid_n*grid_n, ...sample_shape]).
pub fn morph_grid(
    e: &mut Network<f32>,
    g: &mut Network<f32>,
    corners: &Tensor<f32>,
    grid_n: usize,
) -> Result<Tensor<f32>> {
    if !mirror_check(g, e) {
        return Err(Error::Contract(
            "morph_grid: encoder does not mirror the generator".into(),
        ));
    }
    if grid_n < 2 {
        return Err(Error::Contract(format!("grid_n must be >= 2, got {grid_n}")));
    }
    if corners.shape.first() != Some(&4) {
        return Err(Error::Contract(format!(
            "expected 4 corner images, got shape {:?}",
            corners.shape
        )));
    }
    let n = g.input_shape[0];
    // anchors: one encoder pass over the four corners
    let anchors_t = {
        let mut tape: Tape<f32> = Tape::new();
        let xv = tape.leaf(corners);
        let e_bind = e.bind(&mut tape);
        let z = e.forward(&mut tape, &e_bind, xv, Mode::Eval)?;
        tape.tensor(z)
    };
    let anchor_rows: Vec<Vec<f64>> = (0..4)
        .map(|i| anchors_t.data[i * n..(i + 1) * n].iter().map(|v| *v as f64).collect())
        .collect();
    let anchors: [&[f64]; 4] = [
        &anchor_rows[0],
        &anchor_rows[1],
        &anchor_rows[2],
        &anchor_rows[3],
    ];
    let cells = grid_n * grid_n;
    let mut z_flat = Vec::with_capacity(cells * n);
    for j in 0..grid_n {
        for i in 0..grid_n {
            let u = i as f64 / (grid_n - 1) as f64;
            let v = j as f64 / (grid_n - 1) as f64;
            let weights = MorphWeights {
                alphas: [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v],
            };
            let l = morph(&anchors, &weights).map_err(|err| match err {
                Error::Degenerate(norm) => Error::Degenerate(norm),
                other => Error::Contract(format!("grid cell ({i},{j}): {other}")),
            })?;
            z_flat.extend(l);
        }
    }
    let zt = Tensor::from_f64(vec![cells, n], &z_flat)?;
    let mut tape: Tape<f32> = Tape::new();
    let zv = tape.leaf(&zt);
    let g_bind = g.bind(&mut tape);
    let x = g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
    Ok(tape.tensor(x))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Full metric sweep: reconstruction error over the dataset head, re-encoding
/// error over fresh prior draws, thresholded discriminator accuracy, and
/// nearest-mode coverage on 2D mixture datasets.
pub fn evaluate(
    e: &mut Network<f32>,
    g: &mut Network<f32>,
    d: Option<&mut Network<f32>>,
    dataset: &Dataset,
    count: usize,
    rng: &mut Rng,
) -> Result<MetricReport> {
    let count = count.min(dataset.len());
    if count == 0 {
        return Err(Error::Contract("evaluate needs at least one sample".into()));
    }
    let n = g.input_shape[0];
    let indices: Vec<usize> = (0..count).collect();
    let x = dataset.gather(&indices);
    let mut x_shape = vec![count];
    x_shape.extend_from_slice(&dataset.sample_shape);
    let xt = Tensor::from_f64(x_shape, &x)?;

    // reconstruction error
    let x_hat = reconstruct(e, g, &xt)?;
    let recon_mse = mse(&xt.data, &x_hat.data);

    // re-encoding error on fresh prior draws
    let z = sample_latent_batch(count, n, rng)?;
    let zt = Tensor::from_f64(vec![count, n], &z)?;
    let z_hat = {
        let mut tape: Tape<f32> = Tape::new();
        let zv = tape.leaf(&zt);
        let g_bind = g.bind(&mut tape);
        let e_bind = e.bind(&mut tape);
        let xg = g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
        let zh = e.forward(&mut tape, &e_bind, xg, Mode::Eval)?;
        tape.tensor(zh)
    };
    let reenc_mse = mse(&zt.data, &z_hat.data);

    // discriminator accuracy at threshold 0.5: real above, generated below
    let disc_accuracy = if let Some(d) = d {
        let fake = {
            let mut tape: Tape<f32> = Tape::new();
            let zv = tape.leaf(&zt);
            let g_bind = g.bind(&mut tape);
            let xg = g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
            tape.tensor(xg)
        };
        let score = |d: &mut Network<f32>, input: &Tensor<f32>| -> Result<Vec<f32>> {
            let mut tape: Tape<f32> = Tape::new();
            let iv = tape.leaf(input);
            let d_bind = d.bind(&mut tape);
            let s = d.forward(&mut tape, &d_bind, iv, Mode::Eval)?;
            Ok(tape.tensor(s).data)
        };
        let real_scores = score(d, &xt)?;
        let fake_scores = score(d, &fake)?;
        let correct = real_scores.iter().filter(|s| **s > 0.5).count()
            + fake_scores.iter().filter(|s| **s <= 0.5).count();
        correct as f64 / (2 * count) as f64
    } else {
        0.5
    };

    // mode coverage by nearest-mode assignment over generated samples
    let mode_coverage = match dataset.kind {
        DatasetKind::Gauss8 => {
            let gen = {
                let mut tape: Tape<f32> = Tape::new();
                let zv = tape.leaf(&zt);
                let g_bind = g.bind(&mut tape);
                let xg = g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
                tape.tensor(xg)
            };
            let modes = crate::data::gauss8_modes(dataset.mode_radius);
            let mut occupancy = vec![0usize; modes.len()];
            for i in 0..count {
                let px = gen.data[2 * i] as f64;
                let py = gen.data[2 * i + 1] as f64;
                let nearest = modes
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = (px - a[0]).powi(2) + (py - a[1]).powi(2);
                        let db = (px - b[0]).powi(2) + (py - b[1]).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                occupancy[nearest] += 1;
            }
            let threshold = count / (4 * modes.len());
            Some(occupancy.iter().filter(|c| **c >= threshold.max(1)).count())
        }
        _ => None,
    };

    let report = MetricReport {
        recon_mse,
        reenc_mse,
        disc_accuracy,
        mode_coverage,
        samples_evaluated: count,
    };
    if !report.all_finite() {
        return Err(Error::Numerical("non-finite metric".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_gauss8;
    use crate::layers::LayerSpec;

    fn identity_pair() -> (Network<f32>, Network<f32>) {
        let mut rng = Rng::new(1);
        let mut g = Network::build(
            "G",
            vec![2],
            vec![LayerSpec::Dense { units: 2 }],
            &mut rng,
        )
        .unwrap();
        let mut e = Network::build(
            "E",
            vec![2],
            vec![LayerSpec::Dense { units: 2 }],
            &mut rng,
        )
        .unwrap();
        for net in [&mut g, &mut e] {
            for p in net.param_tensors_mut() {
                if p.shape == vec![2, 2] {
                    p.data = vec![1.0, 0.0, 0.0, 1.0];
                } else {
                    p.data = vec![0.0, 0.0];
                }
            }
        }
        (g, e)
    }

    #[test]
    fn identity_pair_reconstructs_exactly() {
        let (mut g, mut e) = identity_pair();
        let x = Tensor::new(vec![3, 2], vec![0.5, -0.25, 1.0, 0.0, -1.5, 2.0]).unwrap();
        let x_hat = reconstruct(&mut e, &mut g, &x).unwrap();
        assert_eq!(x.data, x_hat.data);
    }

    #[test]
    fn generate_count_zero_and_determinism() {
        let (mut g, _) = identity_pair();
        let empty = generate(&mut g, 0, &mut Rng::new(3)).unwrap();
        assert!(empty.data.is_empty());
        let a = generate(&mut g, 5, &mut Rng::new(3)).unwrap();
        let b = generate(&mut g, 5, &mut Rng::new(3)).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, vec![5, 2]);
    }

    #[test]
    fn morph_single_anchor_is_identity() {
        let z1 = vec![0.6, 0.8];
        let z2 = vec![1.0, 0.0];
        let z3 = vec![0.0, 1.0];
        let z4 = vec![-0.6, 0.8];
        let anchors: [&[f64]; 4] = [&z1, &z2, &z3, &z4];
        let out = morph(&anchors, &MorphWeights { alphas: [1.0, 0.0, 0.0, 0.0] }).unwrap();
        assert_eq!(out, z1);
    }

    #[test]
    fn morph_cancellation_is_degenerate() {
        let z1 = vec![0.6, 0.8];
        let z2 = vec![-0.6, -0.8];
        let anchors: [&[f64]; 4] = [&z1, &z2, &z1, &z2];
        let err = morph(&anchors, &MorphWeights { alphas: [1.0, 1.0, 0.0, 0.0] }).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        let err0 = morph(&anchors, &MorphWeights { alphas: [0.0; 4] }).unwrap_err();
        assert!(matches!(err0, Error::Degenerate(_)));
    }

    #[test]
    fn morph_orthonormal_pair() {
        let z1 = vec![1.0, 0.0];
        let z2 = vec![0.0, 1.0];
        let anchors: [&[f64]; 4] = [&z1, &z2, &z1, &z2];
        let out = morph(&anchors, &MorphWeights { alphas: [1.0, 1.0, 0.0, 0.0] }).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((out[0] - s).abs() < 1e-15);
        assert!((out[1] - s).abs() < 1e-15);
    }

    #[test]
    fn morph_weight_scale_invariance() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| crate::data::sample_unit_sphere(4, &mut rng).unwrap().values)
                .collect();
            let anchors: [&[f64]; 4] = [&rows[0], &rows[1], &rows[2], &rows[3]];
            let alphas = [
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
            ];
            let c = 2.0f64.powi(rng.below(13) as i32 - 6);
            let scaled = [alphas[0] * c, alphas[1] * c, alphas[2] * c, alphas[3] * c];
            let a = morph(&anchors, &MorphWeights { alphas });
            let b = morph(&anchors, &MorphWeights { alphas: scaled });
            match (a, b) {
                (Ok(x), Ok(y)) => assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                other => panic!("scale changed outcome: {other:?}"),
            }
        }
    }

    #[test]
    fn morph_grid_corners_match_reconstructions() {
        let (mut g, mut e) = identity_pair();
        // unit-norm "images" so the identity encoder emits unit anchors
        let corners = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 0.8, -0.6, 0.6, 0.8],
        )
        .unwrap();
        let grid = morph_grid(&mut e, &mut g, &corners, 3).unwrap();
        let recon = reconstruct(&mut e, &mut g, &corners).unwrap();
        // row-major cells: (0,0), (2,0), (0,2), (2,2) hold the four corners
        let cell = |i: usize, j: usize| &grid.data[(j * 3 + i) * 2..(j * 3 + i) * 2 + 2];
        assert_eq!(cell(0, 0), &recon.data[0..2]);
        assert_eq!(cell(2, 0), &recon.data[2..4]);
        assert_eq!(cell(0, 2), &recon.data[4..6]);
        assert_eq!(cell(2, 2), &recon.data[6..8]);
        // interior cells are unit norm
        for c in 0..9 {
            let v = &grid.data[c * 2..c * 2 + 2];
            let norm = (v[0] as f64).hypot(v[1] as f64);
            assert!((norm - 1.0).abs() < 1e-5, "cell {c} norm {norm}");
        }
        assert!(morph_grid(&mut e, &mut g, &corners, 1).is_err());
    }

    #[test]
    fn evaluate_identity_stubs_and_read_only() {
        let (mut g, mut e) = identity_pair();
        let mut rng = Rng::new(4);
        let ds = make_gauss8(256, 2.0, 0.1, &mut rng).unwrap();
        let g_before = g.param_snapshot();
        let report = evaluate(&mut e, &mut g, None, &ds, 128, &mut Rng::new(5)).unwrap();
        assert_eq!(report.recon_mse, 0.0);
        assert_eq!(report.reenc_mse, 0.0);
        assert_eq!(report.samples_evaluated, 128);
        assert_eq!(g.param_snapshot(), g_before);
    }

    #[test]
    fn memorizing_stub_covers_all_modes() {
        // identity G on 2D passes prior samples straight through; scale the
        // dataset modes onto the sphere is overkill — instead check a stub
        // that maps the sphere onto the 8 modes via a dense layer is not
        // needed: coverage with sigma -> 0 and a generator that emits the
        // modes themselves. Build G as frozen lookup: dense 2->2 scaled by
        // radius, which maps unit circle onto the mode circle.
        let mut rng = Rng::new(6);
        let ds = make_gauss8(512, 2.0, 1e-9, &mut rng).unwrap();
        let (mut g, mut e) = identity_pair();
        for p in g.param_tensors_mut() {
            if p.shape == vec![2, 2] {
                p.data = vec![2.0, 0.0, 0.0, 2.0]; // radius-2 circle
            }
        }
        let report = evaluate(&mut e, &mut g, None, &ds, 512, &mut Rng::new(7)).unwrap();
        assert_eq!(report.mode_coverage, Some(8));
    }
}
