//! Noisy-query generation: ground-truth perturbation, the noisy-box embedding
//! MLP, and the variational query generator (reparameterized sampling plus the
//! KL regularizer).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Box2D;
use crate::kitti::{Category, Object3D, Scene, ALL_CATEGORIES, NUM_CATEGORIES};
use crate::numeric::{reparam_sample, NumericError, NumericResult, Tape, Tensor, Var};

pub type DenoisingResult<T> = Result<T, NumericError>;

/// Noise-strength knobs: `lambda_c` scales the continuous perturbations,
/// `lambda_d` is the discrete flip rate, `noisy_groups` is C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub noisy_groups: usize,
    pub orientation_bins: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { lambda_c: 0.4, lambda_d: 0.2, noisy_groups: 5, orientation_bins: 12, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambda_c < 0.0 {
            return Err(format!("lambda_c {} must be >= 0", self.lambda_c));
        }
        if !(0.0..=1.0).contains(&self.lambda_d) {
            return Err(format!("lambda_d {} must be in [0, 1]", self.lambda_d));
        }
        if self.noisy_groups == 0 {
            return Err("noisy_groups (C) must be >= 1".into());
        }
        if self.orientation_bins < 2 {
            return Err("orientation_bins must be >= 2".into());
        }
        Ok(())
    }
}

/// A perturbed ground-truth object plus its 6D anchor
/// (x̃_c, ỹ_c, l̃, r̃, t̃, b̃).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyObject {
    pub category: Category,
    pub center_proj: (f64, f64),
    pub box2d: Box2D,
    pub dims: [f64; 3],
    pub depth: f64,
    pub orientation_bin: usize,
    pub orientation_residual: f64,
    pub anchor6d: [f64; 6],
}

/// Applies the full noise recipe with independent U(-1,1) draws per
/// continuous component and flip draws for the discrete ones:
///
/// - center shifted within the 2D box extent,
/// - 2D edges scaled by (1 + lambda_c * u) then clipped to [0, 1],
/// - 3D dims scaled by (1 + lambda_c * u),
/// - depth shifted by at most lambda_c * l3d / 2,
/// - category flipped to a random other category with rate lambda_d,
/// - orientation bin flipped likewise, residual preserved.
pub fn perturb(gt: &Object3D, cfg: &NoiseConfig, rng: &mut ChaCha8Rng) -> NoisyObject {
    let lc = cfg.lambda_c;
    let mut u = || rng.gen_range(-1.0f64..1.0);

    let x_c = gt.center_proj.0 + lc * u() * (gt.box2d.r + gt.box2d.l) / 2.0;
    let y_c = gt.center_proj.1 + lc * u() * (gt.box2d.t + gt.box2d.b) / 2.0;
    let scale_clip = |v: f64, u: f64| (v + lc * u * v).clamp(0.0, 1.0);
    let l = scale_clip(gt.box2d.l, u());
    let r = scale_clip(gt.box2d.r, u());
    let t = scale_clip(gt.box2d.t, u());
    let b = scale_clip(gt.box2d.b, u());

    let l3d = gt.dims[0] + lc * u() * gt.dims[0];
    let h3d = gt.dims[2] + lc * u() * gt.dims[2];
    let w3d = gt.dims[1] + lc * u() * gt.dims[1];
    let depth = gt.depth + lc * u() * gt.dims[0] / 2.0;

    let category = flip_category(gt.category, cfg.lambda_d, rng);
    let orientation_bin = flip_bin(gt.orientation_bin, cfg.orientation_bins, cfg.lambda_d, rng);

    NoisyObject {
        category,
        center_proj: (x_c, y_c),
        box2d: Box2D { l, r, t, b },
        dims: [l3d, w3d, h3d],
        depth,
        orientation_bin,
        orientation_residual: gt.orientation_residual,
        anchor6d: [x_c, y_c, l, r, t, b],
    }
}

fn flip_category(cat: Category, rate: f64, rng: &mut ChaCha8Rng) -> Category {
    let roll: f64 = rng.gen_range(0.0..1.0);
    if roll >= rate {
        return cat;
    }
    // uniform over the other categories
    let mut idx = rng.gen_range(0..NUM_CATEGORIES - 1);
    if idx >= cat.index() {
        idx += 1;
    }
    ALL_CATEGORIES[idx]
}

fn flip_bin(bin: usize, bins: usize, rate: f64, rng: &mut ChaCha8Rng) -> usize {
    let roll: f64 = rng.gen_range(0.0..1.0);
    if roll >= rate {
        return bin;
    }
    let mut idx = rng.gen_range(0..bins - 1);
    if idx >= bin {
        idx += 1;
    }
    idx
}

/// Interleaved sin/cos positional encoding of a scalar over `dims` slots
/// (dims must be even) at the standard temperature.
pub fn sinusoidal_encoding(value: f64, dims: usize, temperature: f64) -> Vec<f64> {
    assert!(dims % 2 == 0, "sinusoidal dims must be even");
    let mut out = Vec::with_capacity(dims);
    let pairs = dims / 2;
    for i in 0..pairs {
        let freq = temperature.powf(2.0 * i as f64 / dims as f64);
        out.push((value / freq).sin());
        out.push((value / freq).cos());
    }
    out
}

/// Tape-level weights of the noisy-box embedder: learned category and bin
/// tables, the three-layer MLP, and the variational heads.
#[derive(Clone)]
pub struct EmbedderWeights {
    pub cat_table: Var,
    pub bin_table: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub mu_w: Var,
    pub mu_b: Var,
    pub lv_w: Var,
    pub lv_b: Var,
}

/// Log-variance clamp range keeping sigma within sane bounds.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

const SINUSOID_TEMPERATURE: f64 = 10_000.0;

/// Deterministic embedding of noisy objects into query space:
/// sinusoid(l3d, h3d, w3d, d) ++ cat embedding ++ bin embedding -> MLP.
/// Returns the (n, D) query matrix.
pub fn embed_noisy(objs: &[NoisyObject], w: &EmbedderWeights, tape: &Tape) -> NumericResult<Var> {
    let d = w.cat_table.shape()[1];
    if d % 8 != 0 {
        return Err(NumericError::Invalid {
            op: "embed_noisy",
            msg: format!("hidden dim {} must be divisible by 8 for the sinusoid split", d),
        });
    }
    let quarter = d / 4;
    let n = objs.len();
    let mut sin_data = Vec::with_capacity(n * d);
    let mut cat_ids = Vec::with_capacity(n);
    let mut bin_ids = Vec::with_capacity(n);
    for o in objs {
        for value in [o.dims[0], o.dims[2], o.dims[1], o.depth] {
            sin_data.extend(sinusoidal_encoding(value, quarter, SINUSOID_TEMPERATURE));
        }
        cat_ids.push(o.category.index());
        bin_ids.push(o.orientation_bin);
    }
    let sin = tape.constant(Tensor::new(vec![n, d], sin_data)?);
    let cat = w.cat_table.embedding(&cat_ids)?;
    let bin = w.bin_table.embedding(&bin_ids)?;
    let x = Var::concat_cols(&[sin, cat, bin])?;

    let h1 = x.matmul(&w.w1)?.add_row(&w.b1)?.gelu();
    let h2 = h1.matmul(&w.w2)?.add_row(&w.b2)?.gelu();
    h2.matmul(&w.w3)?.add_row(&w.b3)
}

/// Variational heads on top of the embedding output.
pub fn variational_params(embedded: &Var, w: &EmbedderWeights) -> NumericResult<(Var, Var)> {
    let mu = embedded.matmul(&w.mu_w)?.add_row(&w.mu_b)?;
    let lv = embedded
        .matmul(&w.lv_w)?
        .add_row(&w.lv_b)?
        .clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
    Ok((mu, lv))
}

/// Standard-normal tensor via the Marsaglia polar method, deterministic per
/// rng state.
pub fn standard_normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Marsaglia polar method
        let (mut x, mut y, mut s);
        loop {
            x = rng.gen_range(-1.0f64..1.0);
            y = rng.gen_range(-1.0f64..1.0);
            s = x * x + y * y;
            if s > 0.0 && s < 1.0 {
                break;
            }
        }
        let f = (-2.0 * s.ln() / s).sqrt();
        data.push(x * f);
        if data.len() < n {
            data.push(y * f);
        }
    }
    Tensor::new(shape, data).expect("normal shape")
}

/// z = mu + sigma * eps with eps recorded as a constant. Returns the sample
/// and the draw used (so a caller can replay it).
pub fn variational_sample(
    mu: &Var,
    log_var: &Var,
    rng: &mut ChaCha8Rng,
) -> NumericResult<(Var, Tensor)> {
    let eps = standard_normal(mu.shape().to_vec(), rng);
    let z = reparam_sample(mu, log_var, &eps)?;
    Ok((z, eps))
}

/// KL(N(mu, sigma^2) || N(0, I)) averaged over queries:
/// mean_rows 0.5 * sum_d (mu^2 + sigma^2 - 1 - log sigma^2).
pub fn kl_loss(mu: &Var, log_var: &Var) -> NumericResult<Var> {
    let rows = mu.shape()[0] as f64;
    let mu2 = mu.mul(mu)?;
    let sigma2 = log_var.exp()?;
    let per_elem = mu2.add(&sigma2)?.add_scalar(-1.0).sub(log_var)?;
    Ok(per_elem.sum().scale(0.5 / rows))
}

/// The assembled denoising side of a training step: per-group query tensors,
/// their generating noisy objects, aligned reconstruction targets, and (in
/// variational mode) the distribution parameters and noise draw.
pub struct NoisyQuerySets {
    /// One (C*K, D) tensor per learnable group, rows ordered
    /// [group-1 noisy block .. group-C noisy block], each block K rows.
    pub queries: Vec<Var>,
    /// Noisy objects per group, aligned with query rows.
    pub noisy: Vec<Vec<NoisyObject>>,
    /// Reconstruction target for row `r` of any group: `gts[r % k]`.
    pub targets: Vec<Object3D>,
    pub k: usize,
    pub mu: Option<Var>,
    pub log_var: Option<Var>,
    pub eps: Option<Tensor>,
}

impl NoisyQuerySets {
    /// Ground-truth object reconstructed by row `row` of any group.
    pub fn target_of_row(&self, row: usize) -> &Object3D {
        &self.targets[row % self.k]
    }
}

/// Inputs that must be replayed bit-exactly when a forward pass is re-run
/// (finite differencing, scheduler-gating comparisons).
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoise {
    pub noisy: Vec<Vec<NoisyObject>>,
    pub eps: Option<Tensor>,
}

/// Replicates the scene's ground truth C times per learnable group,
/// independently perturbs and embeds every copy, and (optionally) reroutes
/// the queries through the variational sampler.
///
/// Pass `frozen` to replay a previous draw instead of consuming the rng.
pub fn make_noisy_query_sets(
    scene: &Scene,
    groups: usize,
    cfg: &NoiseConfig,
    variational: bool,
    weights: &EmbedderWeights,
    tape: &Tape,
    rng: &mut ChaCha8Rng,
    frozen: Option<&FrozenNoise>,
) -> NumericResult<Option<NoisyQuerySets>> {
    let k = scene.k();
    if k == 0 {
        return Ok(None);
    }
    let c = cfg.noisy_groups;
    let noisy: Vec<Vec<NoisyObject>> = match frozen {
        Some(f) => f.noisy.clone(),
        None => {
            let mut all = Vec::with_capacity(groups);
            for _ in 0..groups {
                let mut group = Vec::with_capacity(c * k);
                for _ in 0..c {
                    for gt in &scene.objects {
                        group.push(perturb(gt, cfg, rng));
                    }
                }
                all.push(group);
            }
            all
        }
    };

    // embed the whole stack at once, then split per group
    let all: Vec<NoisyObject> = noisy.iter().flatten().cloned().collect();
    let embedded = embed_noisy(&all, weights, tape)?;

    let (queries_stack, mu, log_var, eps) = if variational {
        let (mu, lv) = variational_params(&embedded, weights)?;
        let eps = match frozen {
            Some(f) => f.eps.clone().ok_or(NumericError::Invalid {
                op: "make_noisy_query_sets",
                msg: "frozen noise missing eps for variational mode".into(),
            })?,
            None => standard_normal(mu.shape().to_vec(), rng),
        };
        let z = reparam_sample(&mu, &lv, &eps)?;
        (z, Some(mu), Some(lv), Some(eps))
    } else {
        (embedded, None, None, None)
    };

    let queries = queries_stack.split_rows(&vec![c * k; groups])?;
    Ok(Some(NoisyQuerySets {
        queries,
        noisy,
        targets: scene.objects.clone(),
        k,
        mu,
        log_var,
        eps,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::{generate_scene, SceneGenConfig};
    use crate::numeric::check_gradients;
    use rand::SeedableRng;

    fn test_gt() -> Object3D {
        generate_scene(1, 1, &SceneGenConfig::default()).unwrap().objects[0].clone()
    }

    fn zero_noise() -> NoiseConfig {
        NoiseConfig { lambda_c: 0.0, lambda_d: 0.0, ..NoiseConfig::default() }
    }

    #[test]
    fn zero_noise_is_identity() {
        let gt = test_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = perturb(&gt, &zero_noise(), &mut rng);
        assert_eq!(n.category, gt.category);
        assert_eq!(n.center_proj, gt.center_proj);
        assert_eq!(n.box2d, gt.box2d);
        assert_eq!(n.dims, gt.dims);
        assert_eq!(n.depth, gt.depth);
        assert_eq!(n.orientation_bin, gt.orientation_bin);
        assert_eq!(n.orientation_residual, gt.orientation_residual);
        assert_eq!(
            n.anchor6d,
            [gt.center_proj.0, gt.center_proj.1, gt.box2d.l, gt.box2d.r, gt.box2d.t, gt.box2d.b]
        );
    }

    #[test]
    fn wide_edges_clip_at_one() {
        let mut gt = test_gt();
        gt.box2d = Box2D { l: 0.95, r: 0.9, t: 0.9, b: 0.9 };
        let cfg = NoiseConfig { lambda_c: 0.4, lambda_d: 0.0, ..NoiseConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_clip = false;
        for _ in 0..200 {
            let n = perturb(&gt, &cfg, &mut rng);
            for v in [n.box2d.l, n.box2d.r, n.box2d.t, n.box2d.b] {
                assert!((0.0..=1.0).contains(&v));
                if v == 1.0 {
                    saw_clip = true;
                }
            }
        }
        assert!(saw_clip, "expected at least one edge clipped to exactly 1.0");
    }

    #[test]
    fn full_flip_rate_always_changes_category() {
        let gt = test_gt();
        let cfg = NoiseConfig { lambda_c: 0.0, lambda_d: 1.0, ..NoiseConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = perturb(&gt, &cfg, &mut rng);
            assert_ne!(n.category, gt.category);
            assert_ne!(n.orientation_bin, gt.orientation_bin);
            assert_eq!(n.orientation_residual, gt.orientation_residual);
        }
    }

    #[test]
    fn depth_noise_bound_is_never_exceeded() {
        let gt = test_gt();
        let cfg = NoiseConfig { lambda_c: 0.4, lambda_d: 0.0, ..NoiseConfig::default() };
        let bound = cfg.lambda_c * gt.dims[0] / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut max_seen = 0.0f64;
        for _ in 0..100_000 {
            let n = perturb(&gt, &cfg, &mut rng);
            max_seen = max_seen.max((n.depth - gt.depth).abs());
        }
        assert!(max_seen <= bound, "max {} bound {}", max_seen, bound);
    }

    #[test]
    fn clip_is_idempotent_under_repeated_perturbation() {
        let mut gt = test_gt();
        gt.box2d = Box2D { l: 1.0, r: 0.0, t: 0.5, b: 0.5 };
        let cfg = NoiseConfig { lambda_c: 0.9, lambda_d: 0.0, ..NoiseConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let n = perturb(&gt, &cfg, &mut rng);
            for v in [n.box2d.l, n.box2d.r, n.box2d.t, n.box2d.b] {
                assert!((0.0..=1.0).contains(&v));
            }
            // feed the noisy box back in as if it were ground truth
            gt.box2d = n.box2d;
        }
    }

    #[test]
    fn empirical_flip_rate_tracks_lambda_d() {
        let gt = test_gt();
        let rate = 0.2;
        let cfg = NoiseConfig { lambda_c: 0.0, lambda_d: rate, ..NoiseConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let mut flips = 0usize;
        for _ in 0..trials {
            if perturb(&gt, &cfg, &mut rng).category != gt.category {
                flips += 1;
            }
        }
        let empirical = flips as f64 / trials as f64;
        assert!((empirical - rate).abs() < 0.01, "empirical {}", empirical);
    }

    #[test]
    fn sinusoid_of_zero_alternates_zero_one() {
        let enc = sinusoidal_encoding(0.0, 8, 10_000.0);
        assert_eq!(enc, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    fn random_weights(tape: &Tape, d: usize, bins: usize, rng: &mut ChaCha8Rng) -> EmbedderWeights {
        let mk = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let scale = (1.0 / rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
            tape.var(Tensor::new(vec![rows, cols], data).unwrap())
        };
        let vect = |cols: usize, _rng: &mut ChaCha8Rng| tape.var(Tensor::zeros(vec![cols]));
        EmbedderWeights {
            cat_table: mk(NUM_CATEGORIES, d, rng),
            bin_table: mk(bins, d, rng),
            w1: mk(3 * d, d, rng),
            b1: vect(d, rng),
            w2: mk(d, d, rng),
            b2: vect(d, rng),
            w3: mk(d, d, rng),
            b3: vect(d, rng),
            mu_w: mk(d, d, rng),
            mu_b: vect(d, rng),
            lv_w: mk(d, d, rng),
            lv_b: vect(d, rng),
        }
    }

    #[test]
    fn identical_noisy_objects_embed_identically() {
        let gt = test_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noisy = perturb(&gt, &NoiseConfig::default(), &mut rng);
        let tape = Tape::new();
        let w = random_weights(&tape, 16, 12, &mut rng);
        let q = embed_noisy(&[noisy.clone(), noisy], &w, &tape).unwrap().value();
        let (a, b) = q.data().split_at(16);
        assert_eq!(a, b);
    }

    #[test]
    fn embedder_hidden_dim_must_split_into_quarters() {
        let gt = test_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let noisy = perturb(&gt, &zero_noise(), &mut rng);
        let tape = Tape::new();
        let w = random_weights(&tape, 12, 12, &mut rng); // 12 % 8 != 0
        assert!(embed_noisy(&[noisy], &w, &tape).is_err());
    }

    #[test]
    fn kl_loss_closed_forms() {
        let tape = Tape::new();
        // mu = 0, sigma = 1 (log_var = 0) -> 0
        let mu = tape.constant(Tensor::zeros(vec![3, 4]));
        let lv = tape.constant(Tensor::zeros(vec![3, 4]));
        assert_eq!(kl_loss(&mu, &lv).unwrap().item(), 0.0);

        // single dim mu = 1, sigma = 1 -> 0.5
        let mu = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let lv = tape.constant(Tensor::zeros(vec![1, 1]));
        assert!((kl_loss(&mu, &lv).unwrap().item() - 0.5).abs() < 1e-15);

        // single dim mu = 0, sigma^2 = e -> (e - 2) / 2
        let mu = tape.constant(Tensor::zeros(vec![1, 1]));
        let lv = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let expect = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kl_loss(&mu, &lv).unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn kl_loss_nonnegative_and_zero_only_at_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let tape = Tape::new();
            let mu_t = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let lv_t = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let off_zero = mu_t.data().iter().any(|v| v.abs() > 1e-6)
                || lv_t.data().iter().any(|v| v.abs() > 1e-6);
            let kl = kl_loss(&tape.constant(mu_t), &tape.constant(lv_t)).unwrap().item();
            assert!(kl >= 0.0);
            if off_zero {
                assert!(kl > 1e-12);
            }
        }
    }

    #[test]
    fn kl_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mu = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let lv = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let err = check_gradients(|_t, v| kl_loss(&v[0], &v[1]), &[mu, lv], 1e-5).unwrap();
        assert!(err <= 1e-6, "kl rel err {}", err);
    }

    #[test]
    fn tiny_log_var_collapses_sample_to_mu() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -0.7, 1.1, 0.0]).unwrap());
        let lv = tape.constant(Tensor::full(vec![1, 4], LOG_VAR_CLAMP.0));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (z, eps) = variational_sample(&mu, &lv, &mut rng).unwrap();
        let eps_norm: f64 = eps.data().iter().map(|e| e * e).sum::<f64>().sqrt();
        let diff: f64 = z
            .value()
            .data()
            .iter()
            .zip(mu.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-2 * eps_norm, "diff {} vs eps norm {}", diff, eps_norm);
    }

    #[test]
    fn variational_sample_reproducible_per_seed() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(vec![2, 3]));
        let lv = tape.constant(Tensor::zeros(vec![2, 3]));
        let (z1, e1) = variational_sample(&mu, &lv, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (z2, e2) = variational_sample(&mu, &lv, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(z1.value(), z2.value());
        assert_eq!(e1, e2);
    }

    #[test]
    fn sample_mean_approaches_mu() {
        let tape = Tape::new();
        let mu_vals = [0.7, -1.2];
        let lv_vals = [0.4, -0.6];
        let mu = tape.constant(Tensor::new(vec![1, 2], mu_vals.to_vec()).unwrap());
        let lv = tape.constant(Tensor::new(vec![1, 2], lv_vals.to_vec()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws = 100_000usize;
        let mut acc = [0.0f64; 2];
        for _ in 0..draws {
            let (z, _) = variational_sample(&mu, &lv, &mut rng).unwrap();
            let v = z.value();
            acc[0] += v.data()[0];
            acc[1] += v.data()[1];
        }
        for i in 0..2 {
            let mean = acc[i] / draws as f64;
            let sigma = (lv_vals[i] / 2.0f64).exp();
            let bound = 3.0 * sigma / (draws as f64).sqrt();
            assert!((mean - mu_vals[i]).abs() <= bound, "mean {} mu {}", mean, mu_vals[i]);
        }
    }

    #[test]
    fn query_sets_shapes_and_alignment() {
        let scene = generate_scene(31, 2, &SceneGenConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let tape = Tape::new();
        let w = random_weights(&tape, 16, 12, &mut rng);
        let cfg = NoiseConfig { noisy_groups: 5, ..NoiseConfig::default() };
        let sets = make_noisy_query_sets(&scene, 11, &cfg, false, &w, &tape, &mut rng, None)
            .unwrap()
            .unwrap();
        assert_eq!(sets.queries.len(), 11);
        let total: usize = sets.queries.iter().map(|q| q.shape()[0]).sum();
        assert_eq!(total, 110);
        for q in &sets.queries {
            assert_eq!(q.shape(), &[10, 16]);
        }
        // row r of any group reconstructs gt r % K
        for row in 0..10 {
            assert_eq!(sets.target_of_row(row), &scene.objects[row % 2]);
        }
    }

    #[test]
    fn non_variational_mode_is_plain_embedding() {
        let scene = generate_scene(33, 1, &SceneGenConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let tape = Tape::new();
        let w = random_weights(&tape, 16, 12, &mut rng);
        let cfg = NoiseConfig { noisy_groups: 2, ..NoiseConfig::default() };
        let mut rng2 = rng.clone();
        let sets = make_noisy_query_sets(&scene, 2, &cfg, false, &w, &tape, &mut rng, None)
            .unwrap()
            .unwrap();
        assert!(sets.mu.is_none() && sets.log_var.is_none() && sets.eps.is_none());

        // replaying the same noisy objects through embed_noisy matches
        let frozen = FrozenNoise { noisy: sets.noisy.clone(), eps: None };
        let again = make_noisy_query_sets(&scene, 2, &cfg, false, &w, &tape, &mut rng2, Some(&frozen))
            .unwrap()
            .unwrap();
        for (a, b) in sets.queries.iter().zip(&again.queries) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn embedder_gradcheck_small() {
        let gt = test_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let noisy: Vec<NoisyObject> =
            (0..2).map(|_| perturb(&gt, &NoiseConfig::default(), &mut rng)).collect();
        let d = 8 * 1; // smallest valid hidden dim
        let bins = 12;
        let scale = 0.4;
        let mk = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
                .unwrap()
        };
        let inputs = vec![
            mk(&mut rng, NUM_CATEGORIES, d),
            mk(&mut rng, bins, d),
            mk(&mut rng, 3 * d, d),
            mk(&mut rng, d, d),
            mk(&mut rng, d, d),
        ];
        let noisy_cl = noisy.clone();
        let err = check_gradients(
            move |tape, v| {
                let w = EmbedderWeights {
                    cat_table: v[0].clone(),
                    bin_table: v[1].clone(),
                    w1: v[2].clone(),
                    b1: tape.constant(Tensor::zeros(vec![d])),
                    w2: v[3].clone(),
                    b2: tape.constant(Tensor::zeros(vec![d])),
                    w3: v[4].clone(),
                    b3: tape.constant(Tensor::zeros(vec![d])),
                    mu_w: tape.constant(Tensor::eye(d)),
                    mu_b: tape.constant(Tensor::zeros(vec![d])),
                    lv_w: tape.constant(Tensor::zeros(vec![d, d])),
                    lv_b: tape.constant(Tensor::zeros(vec![d])),
                };
                let e = embed_noisy(&noisy_cl, &w, tape)?;
                let (mu, lv) = variational_params(&e, &w)?;
                let kl = kl_loss(&mu, &lv)?;
                Ok(e.mul(&e)?.sum().add(&kl)?)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "embedder rel err {}", err);
    }
}
