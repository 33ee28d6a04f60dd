//! Gaussian batch statistics, 2-Wasserstein distances, the distribution
//! alignment loss, knowledge-aware adaptive margins, and the combined
//! training objective.

use crate::gradcore::{Graph, Tensor, TensorError};

/// Mean and diagonal variance summarizing a set of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self, TensorError> {
        if mu.len() != var.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_stats",
                left: vec![mu.len()],
                right: vec![var.len()],
            });
        }
        if let Some(v) = var.iter().copied().find(|v| *v < 0.0) {
            return Err(TensorError::Domain {
                op: "gaussian_stats",
                detail: format!("negative variance {v}"),
            });
        }
        Ok(Self { mu, var })
    }

    /// Sample mean and population variance (divide by B) of row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let b = rows.len();
        if b == 0 {
            return Err(TensorError::Domain {
                op: "gaussian_stats",
                detail: "empty sample set".to_string(),
            });
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(TensorError::Domain {
                op: "gaussian_stats",
                detail: "ragged sample rows".to_string(),
            });
        }
        let inv_b = 1.0 / b as f64;
        let mut mu = vec![0.0; d];
        for row in rows {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m *= inv_b);
        let mut var = vec![0.0; d];
        for row in rows {
            for (s, (v, m)) in var.iter_mut().zip(row.iter().zip(&mu)) {
                let dev = v - m;
                *s += dev * dev;
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_b);
        Ok(Self { mu, var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// On-graph batch statistics, differentiable into the samples.
pub struct GaussianNodes {
    pub mu: Tensor,
    pub var: Tensor,
}

/// Differentiable per-dimension mean and population variance of a B×D batch.
pub fn estimate_gaussian(g: &mut Graph, samples: &Tensor) -> Result<GaussianNodes, TensorError> {
    let (mu, var) = g.reduce_stats(samples)?;
    Ok(GaussianNodes { mu, var })
}

fn check_dims(op: &'static str, g1: &GaussianStats, g2: &GaussianStats) -> Result<(), TensorError> {
    if g1.dim() != g2.dim() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: vec![g1.dim()],
            right: vec![g2.dim()],
        });
    }
    Ok(())
}

/// Exact 2-Wasserstein distance between diagonal Gaussians, via the trace
/// form trace(Σ1 + Σ2 − 2(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}), which for commuting
/// diagonal covariances reduces termwise to v1 + v2 − 2·sqrt(v1·v2).
pub fn w2_exact(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64, TensorError> {
    check_dims("w2_exact", g1, g2)?;
    let mu_term: f64 = g1
        .mu
        .iter()
        .zip(&g2.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let bures: f64 = g1
        .var
        .iter()
        .zip(&g2.var)
        // each term is (√v1 − √v2)² ≥ 0; clamp away negative rounding dust
        .map(|(v1, v2)| (v1 + v2 - 2.0 * (v1 * v2).sqrt()).max(0.0))
        .sum();
    Ok((mu_term + bures).sqrt())
}

/// Approximate 2-Wasserstein distance: (||μ1−μ2||² + ||Σ1^{1/2} − Σ2^{1/2}||²_F)^{1/2}
/// with elementwise square roots of the diagonal variances.
pub fn w2_approx(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64, TensorError> {
    check_dims("w2_approx", g1, g2)?;
    let mu_term: f64 = g1
        .mu
        .iter()
        .zip(&g2.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sig_term: f64 = g1
        .var
        .iter()
        .zip(&g2.var)
        .map(|(v1, v2)| {
            let d = v1.sqrt() - v2.sqrt();
            d * d
        })
        .sum();
    Ok((mu_term + sig_term).sqrt())
}

/// Distribution alignment loss: the approximate 2-Wasserstein distance
/// between the batch Gaussian of the audio-visual embeddings and the batch
/// Gaussian of the per-sample matched knowledge embeddings. Differentiable
/// into both branches. Requires B ≥ 2; a single sample gives a vacuous
/// distribution match.
pub fn align_loss(
    g: &mut Graph,
    rho_av: &Tensor,
    rho_t_matched: &Tensor,
) -> Result<Tensor, TensorError> {
    let shape = rho_av.shape();
    if shape != rho_t_matched.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "align_loss",
            left: shape,
            right: rho_t_matched.shape(),
        });
    }
    if shape.len() != 2 || shape[0] < 2 {
        return Err(TensorError::Domain {
            op: "align_loss",
            detail: format!("degenerate batch of shape {shape:?}; need B ≥ 2"),
        });
    }
    let av = estimate_gaussian(g, rho_av)?;
    let kn = estimate_gaussian(g, rho_t_matched)?;
    let dmu = g.sub(&av.mu, &kn.mu)?;
    let dmu_sq = g.square(&dmu)?;
    let mu_term = g.sum(&dmu_sq)?;
    let s_av = g.sqrt(&av.var)?;
    let s_kn = g.sqrt(&kn.var)?;
    let ds = g.sub(&s_av, &s_kn)?;
    let ds_sq = g.square(&ds)?;
    let sig_term = g.sum(&ds_sq)?;
    let total = g.add(&mu_term, &sig_term)?;
    g.sqrt(&total)
}

/// Symmetric per-class-pair additive margins m[i][j] = α·W2(i, j) + β with
/// diagonal exactly β.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    m: Vec<f64>,
    classes: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl MarginMatrix {
    /// An all-zero margin matrix; the margin loss then reduces to plain
    /// cross-entropy.
    pub fn zeros(classes: usize) -> Self {
        Self {
            m: vec![0.0; classes * classes],
            classes,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.classes + j]
    }

    /// The margin row applied when the ground-truth class is `label`.
    pub fn row(&self, label: usize) -> &[f64] {
        &self.m[label * self.classes..(label + 1) * self.classes]
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.m[i * self.classes + j] = v;
    }
}

/// Compute the margin matrix from each class's embedded knowledge vectors
/// (the common-space outputs of the knowledge embedding layer). Class c's
/// distribution is the Gaussian over its K_c embedded descriptions; the
/// resulting margins are plain values, detached from any graph.
pub fn compute_margins(
    class_embedded: &[Vec<Vec<f64>>],
    alpha: f64,
    beta: f64,
) -> Result<MarginMatrix, TensorError> {
    if class_embedded.is_empty() {
        return Err(TensorError::Domain {
            op: "compute_margins",
            detail: "empty class list".to_string(),
        });
    }
    if alpha < 0.0 {
        return Err(TensorError::Domain {
            op: "compute_margins",
            detail: format!("alpha {alpha} must be non-negative"),
        });
    }
    let stats = class_embedded
        .iter()
        .map(|rows| GaussianStats::from_rows(rows))
        .collect::<Result<Vec<_>, _>>()?;
    let c = stats.len();
    let mut matrix = MarginMatrix {
        m: vec![beta; c * c],
        classes: c,
        alpha,
        beta,
    };
    for i in 0..c {
        for j in (i + 1)..c {
            let m = alpha * w2_approx(&stats[i], &stats[j])? + beta;
            matrix.m[i * c + j] = m;
            matrix.m[j * c + i] = m;
        }
    }
    Ok(matrix)
}

fn batch_cross_entropy(
    g: &mut Graph,
    logits: &Tensor,
    labels: &[usize],
    margins: Option<&MarginMatrix>,
) -> Result<Tensor, TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::Domain {
            op: "kaml_loss",
            detail: format!("expected B×C logits, got shape {shape:?}"),
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(TensorError::ShapeMismatch {
            op: "kaml_loss",
            left: vec![b],
            right: vec![labels.len()],
        });
    }
    if let Some(m) = margins {
        if m.classes() != c {
            return Err(TensorError::ShapeMismatch {
                op: "kaml_loss",
                left: vec![c],
                right: vec![m.classes()],
            });
        }
    }
    if b == 0 {
        return Err(TensorError::Domain {
            op: "kaml_loss",
            detail: "empty batch".to_string(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (idx, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "kaml_loss",
                index: label,
                bound: c,
            });
        }
        let row = g.row(logits, idx)?;
        let margin_row = margins.map(|m| m.row(label));
        let ce = g.softmax_cross_entropy(&row, label, margin_row)?;
        acc = Some(match acc {
            None => ce,
            Some(prev) => g.add(&prev, &ce)?,
        });
    }
    g.scale(&acc.expect("non-empty batch"), 1.0 / b as f64)
}

/// Mean plain softmax cross-entropy over a batch of class logits.
pub fn cross_entropy_loss(
    g: &mut Graph,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor, TensorError> {
    batch_cross_entropy(g, logits, labels, None)
}

/// Knowledge-aware adaptive margin loss: mean over the batch of the margin
/// cross-entropy, where sample b with label y adds margin m[y][k] to each
/// competitor logit k ≠ y. With all margins zero this equals
/// [`cross_entropy_loss`] bit for bit.
pub fn kaml_loss(
    g: &mut Graph,
    logits: &Tensor,
    labels: &[usize],
    margins: &MarginMatrix,
) -> Result<Tensor, TensorError> {
    batch_cross_entropy(g, logits, labels, Some(margins))
}

/// The two loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub kaml: f64,
    pub align: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Combined-objective tensors plus plain values for logging.
pub struct KdaLoss {
    pub total: Tensor,
    pub kaml: Tensor,
    pub align: Tensor,
    pub breakdown: LossBreakdown,
}

/// Build a B×C one-hot row-selection matrix from labels.
pub fn one_hot_rows(labels: &[usize], classes: usize) -> Result<Tensor, TensorError> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::IndexOutOfRange {
                op: "one_hot_rows",
                index: label,
                bound: classes,
            });
        }
        data[i * classes + label] = 1.0;
    }
    Tensor::from_vec(vec![labels.len(), classes], data)
}

/// The full training objective total = kaml + λ·align over one batch.
/// `rho_av` is B×D, `rho_t` is C×D with one row per class (multi-description
/// classes already averaged); `labels` index rows of `rho_t`.
pub fn kda_objective(
    g: &mut Graph,
    rho_av: &Tensor,
    rho_t: &Tensor,
    labels: &[usize],
    margins: &MarginMatrix,
    lambda: f64,
) -> Result<KdaLoss, TensorError> {
    if lambda < 0.0 {
        return Err(TensorError::Domain {
            op: "kda_objective",
            detail: format!("lambda {lambda} must be non-negative"),
        });
    }
    let rho_t_t = g.transpose(rho_t)?;
    let logits = g.matmul(rho_av, &rho_t_t)?;
    let kaml = kaml_loss(g, &logits, labels, margins)?;

    let selector = one_hot_rows(labels, rho_t.rows())?;
    let rho_t_matched = g.matmul(&selector, rho_t)?;
    let align = align_loss(g, rho_av, &rho_t_matched)?;

    let weighted = g.scale(&align, lambda)?;
    let total = g.add(&kaml, &weighted)?;
    let breakdown = LossBreakdown {
        kaml: kaml.item()?,
        align: align.item()?,
        total: total.item()?,
        lambda,
    };
    Ok(KdaLoss {
        total,
        kaml,
        align,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{finite_difference_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn estimate_gaussian_hand_case() {
        let mut g = Graph::new();
        let x = t(&[2, 2], &[0.0, 0.0, 2.0, 2.0]);
        let stats = estimate_gaussian(&mut g, &x).unwrap();
        assert_eq!(stats.mu.to_vec(), vec![1.0, 1.0]);
        assert_eq!(stats.var.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn estimate_gaussian_single_sample_zero_variance() {
        let stats = GaussianStats::from_rows(&[vec![5.0, 7.0]]).unwrap();
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }

    #[test]
    fn estimate_gaussian_translation_equivariance() {
        let rows: Vec<Vec<f64>> = vec![vec![0.5, -1.0], vec![1.5, 2.0], vec![-0.5, 0.3]];
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v + 3.25).collect())
            .collect();
        let a = GaussianStats::from_rows(&rows).unwrap();
        let b = GaussianStats::from_rows(&shifted).unwrap();
        for d in 0..2 {
            assert!((b.mu[d] - a.mu[d] - 3.25).abs() < 1e-12);
            assert!((b.var[d] - a.var[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_identical_stats_is_zero() {
        let g1 = GaussianStats::new(vec![0.3, -1.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(w2_exact(&g1, &g1).unwrap(), 0.0);
        assert_eq!(w2_approx(&g1, &g1).unwrap(), 0.0);
    }

    #[test]
    fn w2_three_four_five() {
        let g1 = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let g2 = GaussianStats::new(vec![3.0, 4.0], vec![1.0, 1.0]).unwrap();
        assert!((w2_exact(&g1, &g2).unwrap() - 5.0).abs() < 1e-12);
        assert!((w2_approx(&g1, &g2).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn w2_variance_only_case() {
        let g1 = GaussianStats::new(vec![1.0], vec![4.0]).unwrap();
        let g2 = GaussianStats::new(vec![1.0], vec![1.0]).unwrap();
        assert!((w2_exact(&g1, &g2).unwrap() - 1.0).abs() < 1e-12);
        assert!((w2_approx(&g1, &g2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w2_dim_mismatch() {
        let g1 = GaussianStats::new(vec![0.0], vec![1.0]).unwrap();
        let g2 = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            w2_exact(&g1, &g2),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn w2_routes_agree_and_are_metric_like(
            dims in 1usize..6,
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gen = |d: usize| {
                let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let var: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..4.0)).collect();
                GaussianStats::new(mu, var).unwrap()
            };
            let a = gen(dims);
            let b = gen(dims);
            let c = gen(dims);

            let ab_exact = w2_exact(&a, &b).unwrap();
            let ab_approx = w2_approx(&a, &b).unwrap();
            prop_assert!((ab_exact - ab_approx).abs() < 1e-10);
            prop_assert!(ab_exact >= 0.0);
            // symmetry
            prop_assert!((w2_exact(&b, &a).unwrap() - ab_exact).abs() < 1e-12);
            // identity of indiscernibles
            prop_assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
            prop_assert!(ab_exact > 0.0);
            // triangle inequality
            let ac = w2_exact(&a, &c).unwrap();
            let cb = w2_exact(&c, &b).unwrap();
            prop_assert!(ab_exact <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn align_loss_zero_for_identical_inputs() {
        let mut g = Graph::new();
        let x = t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let loss = align_loss(&mut g, &x, &x).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn align_loss_constant_offset_is_offset_norm() {
        let mut g = Graph::new();
        let base = t(&[3, 2], &[0.1, 0.2, 0.9, 0.4, 0.5, -0.6]);
        let offset = [3.0, 4.0];
        let shifted_data: Vec<f64> = base
            .to_vec()
            .chunks(2)
            .flat_map(|row| vec![row[0] + offset[0], row[1] + offset[1]])
            .collect();
        let shifted = t(&[3, 2], &shifted_data);
        let loss = align_loss(&mut g, &shifted, &base).unwrap();
        assert!((loss.item().unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn align_loss_rejects_degenerate_batch() {
        let mut g = Graph::new();
        let x = t(&[1, 2], &[0.1, 0.2]);
        assert!(matches!(
            align_loss(&mut g, &x, &x),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn align_loss_matches_value_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect()
        };
        let a_rows = rows(&mut rng);
        let b_rows = rows(&mut rng);
        let a = Tensor::from_rows(&a_rows).unwrap();
        let b = Tensor::from_rows(&b_rows).unwrap();
        let mut g = Graph::new();
        let graph_value = align_loss(&mut g, &a, &b).unwrap().item().unwrap();
        let value = w2_approx(
            &GaussianStats::from_rows(&a_rows).unwrap(),
            &GaussianStats::from_rows(&b_rows).unwrap(),
        )
        .unwrap();
        assert!((graph_value - value).abs() < 1e-12);
    }

    #[test]
    fn align_loss_gradient_passes_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let data2: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = t(&[4, 2], &data);
            let b = t(&[4, 2], &data2);
            let params = vec![
                ("rho_av".to_string(), a.clone()),
                ("rho_t".to_string(), b.clone()),
            ];
            let report = finite_difference_check(&params, GradCheckConfig::default(), |g| {
                align_loss(g, &a, &b)
            })
            .unwrap();
            assert!(report.pass, "seed {seed}:\n{}", report.summary());
        }
    }

    #[test]
    fn margins_alpha_zero_gives_all_beta() {
        let classes = vec![
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![vec![5.0, 5.0]],
            vec![vec![-2.0, 3.0]],
        ];
        let m = compute_margins(&classes, 0.0, 0.7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), 0.7);
            }
        }
    }

    #[test]
    fn margins_identical_descriptions_give_beta() {
        let classes = vec![
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        ];
        let m = compute_margins(&classes, 2.5, 0.2).unwrap();
        assert_eq!(m.get(0, 1), 0.2);
        assert_eq!(m.get(1, 0), 0.2);
    }

    #[test]
    fn margins_single_description_euclidean_case() {
        // K = 1, prototypes (0,0) and (3,4), alpha 1, beta 0.2 → 5.2.
        let classes = vec![vec![vec![0.0, 0.0]], vec![vec![3.0, 4.0]]];
        let m = compute_margins(&classes, 1.0, 0.2).unwrap();
        assert!((m.get(0, 1) - 5.2).abs() < 1e-12);
    }

    #[test]
    fn margins_symmetric_with_beta_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let classes: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..3)
                    .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let m = compute_margins(&classes, 1.3, 0.4).unwrap();
        for i in 0..4 {
            assert_eq!(m.get(i, i), 0.4);
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
                assert!(m.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn margins_reject_empty_and_negative_alpha() {
        assert!(matches!(
            compute_margins(&[], 1.0, 0.0),
            Err(TensorError::Domain { .. })
        ));
        let classes = vec![vec![vec![0.0]]];
        assert!(matches!(
            compute_margins(&classes, -1.0, 0.0),
            Err(TensorError::Domain { .. })
        ));
        let ragged = vec![vec![]];
        assert!(matches!(
            compute_margins(&ragged, 1.0, 0.0),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn kaml_zero_margins_equals_plain_cross_entropy_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let b = rng.gen_range(1..6);
            let c = rng.gen_range(2..5);
            let data: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let logits = t(&[b, c], &data);
            let mut g = Graph::new();
            let plain = cross_entropy_loss(&mut g, &logits, &labels).unwrap();
            let with = kaml_loss(&mut g, &logits, &labels, &MarginMatrix::zeros(c)).unwrap();
            assert_eq!(
                plain.item().unwrap().to_bits(),
                with.item().unwrap().to_bits()
            );
        }
    }

    #[test]
    fn kaml_single_sample_hand_case() {
        // logits [2,1], y = 0, m[0][1] = 1: e²/(e² + e²) → ln 2.
        let logits = t(&[1, 2], &[2.0, 1.0]);
        let mut margins = MarginMatrix::zeros(2);
        margins.set(0, 1, 1.0);
        margins.set(1, 0, 1.0);
        let mut g = Graph::new();
        let loss = kaml_loss(&mut g, &logits, &[0], &margins).unwrap();
        assert!((loss.item().unwrap() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kaml_increasing_competitor_margin_never_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = 4;
            let data: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits = t(&[1, c], &data);
            let y = rng.gen_range(0..c);
            let k = (y + 1 + rng.gen_range(0..c - 1)) % c;
            let mut margins = MarginMatrix::zeros(c);
            let mut g = Graph::new();
            let base = kaml_loss(&mut g, &logits, &[y], &margins)
                .unwrap()
                .item()
                .unwrap();
            margins.set(y, k, 0.8);
            let bumped = kaml_loss(&mut g, &logits, &[y], &margins)
                .unwrap()
                .item()
                .unwrap();
            assert!(bumped >= base);
        }
    }

    #[test]
    fn kaml_label_out_of_range() {
        let logits = t(&[1, 2], &[0.0, 0.0]);
        let mut g = Graph::new();
        assert!(matches!(
            kaml_loss(&mut g, &logits, &[2], &MarginMatrix::zeros(2)),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn kaml_gradient_passes_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (b, c) = (3, 4);
            let data: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits = t(&[b, c], &data);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let mut classes = Vec::new();
            for _ in 0..c {
                classes.push(vec![(0..2)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect::<Vec<f64>>()]);
            }
            let margins = compute_margins(&classes, 1.0, 0.2).unwrap();
            let params = vec![("logits".to_string(), logits.clone())];
            let report = finite_difference_check(&params, GradCheckConfig::default(), |g| {
                kaml_loss(g, &logits, &labels, &margins)
            })
            .unwrap();
            assert!(report.pass, "seed {seed}:\n{}", report.summary());
        }
    }

    #[test]
    fn objective_lambda_zero_total_is_kaml() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, c, d) = (4, 3, 2);
        let rho_av = t(
            &[b, d],
            &(0..b * d)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let rho_t = t(
            &[c, d],
            &(0..c * d)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let labels = vec![0, 1, 2, 0];
        let margins = MarginMatrix::zeros(c);
        let mut g = Graph::new();
        let loss = kda_objective(&mut g, &rho_av, &rho_t, &labels, &margins, 0.0).unwrap();
        assert_eq!(loss.breakdown.total, loss.breakdown.kaml);
        assert!(loss.breakdown.align > 0.0); // still reported
    }

    #[test]
    fn objective_total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, c, d) = (4, 3, 2);
        let rho_av = t(
            &[b, d],
            &(0..b * d)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let rho_t = t(
            &[c, d],
            &(0..c * d)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let labels = vec![2, 1, 0, 1];
        let margins = MarginMatrix::zeros(c);
        let mut g = Graph::new();
        // λ = 10 is the strongest configuration on the first benchmark's sweep
        let loss = kda_objective(&mut g, &rho_av, &rho_t, &labels, &margins, 10.0).unwrap();
        let b = loss.breakdown;
        assert!((b.total - (b.kaml + b.lambda * b.align)).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_negative_lambda() {
        let rho = t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        let rho_t = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let mut g = Graph::new();
        assert!(matches!(
            kda_objective(&mut g, &rho, &rho_t, &[0, 1], &MarginMatrix::zeros(2), -1.0),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn objective_gradients_pass_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (b, c, d) = (4, 3, 2);
            let rho_av = t(
                &[b, d],
                &(0..b * d)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect::<Vec<_>>(),
            );
            let rho_t = t(
                &[c, d],
                &(0..c * d)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect::<Vec<_>>(),
            );
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let classes: Vec<Vec<Vec<f64>>> = (0..c)
                .map(|_| vec![(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()])
                .collect();
            let margins = compute_margins(&classes, 1.0, 0.2).unwrap();
            let params = vec![
                ("rho_av".to_string(), rho_av.clone()),
                ("rho_t".to_string(), rho_t.clone()),
            ];
            let report = finite_difference_check(&params, GradCheckConfig::default(), |g| {
                Ok(kda_objective(g, &rho_av, &rho_t, &labels, &margins, 1.5)?.total)
            })
            .unwrap();
            assert!(report.pass, "seed {seed}:\n{}", report.summary());
        }
    }
}
